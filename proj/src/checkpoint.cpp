#include "crossfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace crossfuse {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'F', 'C', 'K', 'P'};

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    void get_floats(float* dst, std::size_t n, const char* what) {
        need(n * sizeof(float), what);
        std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
    }

    bool at_end() const noexcept { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }

    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw std::invalid_argument(std::string("config key '") + key + "' has the wrong type");
    }
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* section) {
    if (!j.is_object()) throw std::invalid_argument(std::string(section) + " config must be an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw std::invalid_argument(std::string("unknown ") + section + " config key '" + key + "'");
    }
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::string out;
    out.append(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string meta = ckpt.meta.dump();
    put<std::uint64_t>(out, meta.size());
    out += meta;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        std::size_t n = 1;
        for (auto d : t.dims) n *= d;
        if (n != t.data.size()) throw CheckpointError("tensor '" + t.name + "' dims do not match its data");
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) put<std::uint32_t>(out, d);
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot create " + tmp.string());
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw CheckpointError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    Reader r(std::vector<char>(std::istreambuf_iterator<char>(f), {}));
    if (r.get_string(4, "magic") != std::string(kMagic, 4)) throw CheckpointError(path.string() + ": not a checkpoint");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion)
        throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    const auto meta_len = r.get<std::uint64_t>("metadata length");
    try {
        ckpt.meta = nlohmann::json::parse(r.get_string(meta_len, "metadata"));
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError(path.string() + ": bad metadata: " + e.what());
    }
    const auto n = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < n; ++i) {
        CheckpointTensor t;
        t.name = r.get_string(r.get<std::uint32_t>("name length"), "tensor name");
        const auto ndim = r.get<std::uint8_t>("ndim");
        std::size_t count = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            t.dims.push_back(r.get<std::uint32_t>("dims"));
            count *= t.dims.back();
        }
        t.data.resize(count);
        r.get_floats(t.data.data(), count, "tensor payload");
        ckpt.tensors.push_back(std::move(t));
    }
    if (!r.at_end()) throw CheckpointError(path.string() + ": trailing bytes after last tensor");
    return ckpt;
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"d_v", c.d_v},
            {"d_s", c.d_s},
            {"d_model", c.d_model},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"ffn_dim", c.ffn_dim},
            {"head_hidden", c.head_hidden},
            {"dropout", c.dropout},
            {"num_classes", c.num_classes},
            {"seq_len", c.seq_len},
            {"layer_norm_eps", c.layer_norm_eps},
            {"cls_init_std", c.cls_init_std}};
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"base_lr", c.base_lr},
            {"weight_decay", c.weight_decay},
            {"warmup_fraction", c.warmup_fraction},
            {"clip_max_norm", c.clip_max_norm},
            {"dropout", c.dropout},
            {"seeds", c.seeds},
            {"betas", {c.beta1, c.beta2}},
            {"eps", c.eps},
            {"tsn_segments", c.tsn.n_segments},
            {"tsn_frames_per_segment", c.tsn.frames_per_segment},
            {"restrict_classes", c.restrict_classes},
            {"eval_train", c.eval_train}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
    reject_unknown(j,
                   {"d_v", "d_s", "d_model", "n_layers", "n_heads", "ffn_dim", "head_hidden", "dropout", "num_classes",
                    "seq_len", "layer_norm_eps", "cls_init_std"},
                   "model");
    read_field(j, "d_v", c.d_v);
    read_field(j, "d_s", c.d_s);
    read_field(j, "d_model", c.d_model);
    read_field(j, "n_layers", c.n_layers);
    read_field(j, "n_heads", c.n_heads);
    read_field(j, "ffn_dim", c.ffn_dim);
    read_field(j, "head_hidden", c.head_hidden);
    read_field(j, "dropout", c.dropout);
    read_field(j, "num_classes", c.num_classes);
    read_field(j, "seq_len", c.seq_len);
    read_field(j, "layer_norm_eps", c.layer_norm_eps);
    read_field(j, "cls_init_std", c.cls_init_std);
    c.validate();
    return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
    reject_unknown(j,
                   {"epochs", "batch_size", "base_lr", "weight_decay", "warmup_fraction", "clip_max_norm", "dropout",
                    "seeds", "betas", "eps", "tsn_segments", "tsn_frames_per_segment", "restrict_classes",
                    "eval_train"},
                   "train");
    read_field(j, "epochs", c.epochs);
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "base_lr", c.base_lr);
    read_field(j, "weight_decay", c.weight_decay);
    read_field(j, "warmup_fraction", c.warmup_fraction);
    read_field(j, "clip_max_norm", c.clip_max_norm);
    read_field(j, "dropout", c.dropout);
    read_field(j, "seeds", c.seeds);
    if (j.contains("betas")) {
        std::vector<double> b;
        read_field(j, "betas", b);
        if (b.size() != 2) throw std::invalid_argument("config key 'betas' needs two values");
        c.beta1 = b[0];
        c.beta2 = b[1];
    }
    read_field(j, "eps", c.eps);
    read_field(j, "tsn_segments", c.tsn.n_segments);
    read_field(j, "tsn_frames_per_segment", c.tsn.frames_per_segment);
    read_field(j, "restrict_classes", c.restrict_classes);
    read_field(j, "eval_train", c.eval_train);
    c.validate();
    return c;
}

Checkpoint make_checkpoint(const TrainedModel& model, nlohmann::json meta) {
    Checkpoint ckpt;
    ckpt.meta = std::move(meta);
    ckpt.meta["variant"] = to_string(model.variant);
    ckpt.meta["model_config"] = to_json(model.config);
    switch (model.variant) {
        case Variant::CrossAttention: store_tensors(ckpt, model.cross, "model."); break;
        case Variant::EarlyFusion: store_tensors(ckpt, model.early, "model."); break;
        case Variant::VisualProbe: store_tensors(ckpt, model.visual_probe, "model."); break;
        case Variant::SkeletonProbe: store_tensors(ckpt, model.skeleton_probe, "model."); break;
        case Variant::LateFusion:
            store_tensors(ckpt, model.visual_probe, "visual_probe.");
            store_tensors(ckpt, model.skeleton_probe, "skeleton_probe.");
            break;
    }
    return ckpt;
}

TrainedModel load_model(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("variant") || !ckpt.meta.contains("model_config"))
        throw CheckpointError("checkpoint metadata lacks variant/model_config");
    TrainedModel m;
    try {
        m.variant = parse_variant(ckpt.meta.at("variant").get<std::string>());
        m.config = model_config_from_json(ckpt.meta.at("model_config"));
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
    }
    switch (m.variant) {
        case Variant::CrossAttention: {
            CrossAttentionNet<float> net(m.config);
            m.cross = net.init(0);
            load_tensors(ckpt, m.cross, "model.");
            break;
        }
        case Variant::EarlyFusion: {
            EarlyFusionNet<float> net(m.config);
            m.early = net.init(0);
            load_tensors(ckpt, m.early, "model.");
            break;
        }
        case Variant::VisualProbe:
            m.visual_probe = ProbeNet<float>(m.config, Modality::Visual).init(0);
            load_tensors(ckpt, m.visual_probe, "model.");
            break;
        case Variant::SkeletonProbe:
            m.skeleton_probe = ProbeNet<float>(m.config, Modality::Skeleton).init(0);
            load_tensors(ckpt, m.skeleton_probe, "model.");
            break;
        case Variant::LateFusion:
            m.visual_probe = ProbeNet<float>(m.config, Modality::Visual).init(0);
            m.skeleton_probe = ProbeNet<float>(m.config, Modality::Skeleton).init(0);
            load_tensors(ckpt, m.visual_probe, "visual_probe.");
            load_tensors(ckpt, m.skeleton_probe, "skeleton_probe.");
            break;
    }
    return m;
}

}  // namespace crossfuse
