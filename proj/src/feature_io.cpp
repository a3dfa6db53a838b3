#include "crossfuse/feature_io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "json.hpp"

namespace crossfuse {

namespace {

constexpr std::array<char, 4> kMagic = {'F', 'S', 'E', 'Q'};
constexpr std::uint8_t kDtypeF32 = 1;

using Kind = FeatureIoError::Kind;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint32_t> canonical_dims(Modality m, std::size_t frames) {
    if (m == Modality::Visual) return {static_cast<std::uint32_t>(frames), static_cast<std::uint32_t>(kVisualDim)};
    return {static_cast<std::uint32_t>(frames), static_cast<std::uint32_t>(kNumJoints), 3u};
}

std::string dims_string(const std::vector<std::uint32_t>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

struct ParsedHeader {
    FeatureHeader header;
    std::size_t header_bytes = 0;
};

ParsedHeader parse_header(const std::vector<unsigned char>& bytes, const std::string& name) {
    auto need = [&](std::size_t n, const char* what) {
        if (bytes.size() < n)
            throw FeatureIoError(Kind::TruncatedPayload, name + ": file ends inside " + what);
    };
    need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic.data(), 4) != 0)
        throw FeatureIoError(Kind::BadMagic, name + ": bad magic (expected FSEQ)");
    need(10, "header");
    const std::uint32_t version = get_u32(bytes.data() + 4);
    if (version != kFeatureFormatVersion)
        throw FeatureIoError(Kind::UnsupportedVersion,
                             name + ": unsupported version " + std::to_string(version));
    const std::uint8_t modality = bytes[8];
    if (modality > 1)
        throw FeatureIoError(Kind::BadModality, name + ": unknown modality " + std::to_string(modality));
    const std::size_t ndim = bytes[9];
    need(10 + 4 * ndim + 1, "dims");
    ParsedHeader ph;
    ph.header.modality = static_cast<Modality>(modality);
    for (std::size_t i = 0; i < ndim; ++i) ph.header.dims.push_back(get_u32(bytes.data() + 10 + 4 * i));
    const std::uint8_t dtype = bytes[10 + 4 * ndim];
    ph.header_bytes = 10 + 4 * ndim + 1;

    const std::size_t frames = ph.header.dims.empty() ? 0 : ph.header.dims[0];
    if (frames < 1 || ph.header.dims != canonical_dims(ph.header.modality, frames))
        throw FeatureIoError(Kind::DimMismatch,
                             name + ": dims " + dims_string(ph.header.dims) + " invalid for " +
                                 to_string(ph.header.modality) + " (expected " +
                                 dims_string(canonical_dims(ph.header.modality, frames ? frames : 1)) +
                                 " with T >= 1)");
    if (dtype != kDtypeF32)
        throw FeatureIoError(Kind::BadDtype, name + ": unsupported dtype " + std::to_string(dtype));

    std::uintmax_t count = 1;
    for (auto d : ph.header.dims) count *= d;
    ph.header.payload_bytes = count * 4;
    if (bytes.size() - ph.header_bytes < ph.header.payload_bytes)
        throw FeatureIoError(Kind::TruncatedPayload,
                             name + ": truncated payload (" +
                                 std::to_string(bytes.size() - ph.header_bytes) + " of " +
                                 std::to_string(ph.header.payload_bytes) + " bytes)");
    ph.header.trailer_bytes = bytes.size() - ph.header_bytes - ph.header.payload_bytes;
    return ph;
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FeatureIoError(Kind::Io, "cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw FeatureIoError(Kind::Io, "read failed: " + path.string());
    return bytes;
}

}  // namespace

const char* to_string(Modality m) { return m == Modality::Visual ? "visual" : "skeleton"; }

const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw FeatureIoError(Kind::Manifest, "unknown split '" + s + "'");
}

const char* to_string(FeatureIoError::Kind k) {
    switch (k) {
        case Kind::Io: return "io";
        case Kind::BadMagic: return "bad magic";
        case Kind::UnsupportedVersion: return "unsupported version";
        case Kind::TruncatedPayload: return "truncated payload";
        case Kind::DimMismatch: return "dim mismatch";
        case Kind::BadDtype: return "bad dtype";
        case Kind::BadModality: return "bad modality";
        case Kind::NonFinite: return "non-finite value";
        case Kind::Manifest: return "manifest";
    }
    return "?";
}

void validate_sequence(const FeatureSequence& seq) {
    const std::size_t want = seq.modality == Modality::Visual ? kVisualDim : kSkeletonDim;
    if (seq.data.rows() < 1 || seq.data.cols() != want)
        throw FeatureIoError(Kind::DimMismatch,
                             seq.clip_id + ": " + to_string(seq.modality) + " sequence has shape [" +
                                 std::to_string(seq.data.rows()) + ", " + std::to_string(seq.data.cols()) +
                                 "], expected [T>=1, " + std::to_string(want) + "]");
    for (std::size_t i = 0; i < seq.data.size(); ++i)
        if (!std::isfinite(seq.data[i]))
            throw FeatureIoError(Kind::NonFinite, seq.clip_id + ": non-finite entry at flat index " +
                                                      std::to_string(i));
}

void write_sequence(const FeatureSequence& seq, const std::filesystem::path& path) {
    validate_sequence(seq);
    std::string buf;
    buf.reserve(32 + seq.data.size() * 4);
    buf.append(kMagic.data(), kMagic.size());
    put_u32(buf, kFeatureFormatVersion);
    buf.push_back(static_cast<char>(seq.modality));
    const auto dims = canonical_dims(seq.modality, seq.frames());
    buf.push_back(static_cast<char>(dims.size()));
    for (auto d : dims) put_u32(buf, d);
    buf.push_back(static_cast<char>(kDtypeF32));
    for (std::size_t i = 0; i < seq.data.size(); ++i) put_u32(buf, std::bit_cast<std::uint32_t>(seq.data[i]));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FeatureIoError(Kind::Io, "cannot create " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FeatureIoError(Kind::Io, "write failed: " + path.string());
}

FeatureHeader read_header(const std::filesystem::path& path) {
    return parse_header(slurp(path), path.string()).header;
}

FeatureSequence read_sequence(const std::filesystem::path& path) {
    const auto bytes = slurp(path);
    const auto ph = parse_header(bytes, path.string());
    FeatureSequence seq;
    seq.clip_id = path.stem().string();
    seq.modality = ph.header.modality;
    const std::size_t frames = ph.header.dims[0];
    const std::size_t width = ph.header.payload_bytes / 4 / frames;
    seq.data = Matrix<float>(frames, width);
    const unsigned char* p = bytes.data() + ph.header_bytes;
    for (std::size_t i = 0; i < seq.data.size(); ++i) seq.data[i] = std::bit_cast<float>(get_u32(p + 4 * i));
    for (std::size_t i = 0; i < seq.data.size(); ++i)
        if (!std::isfinite(seq.data[i]))
            throw FeatureIoError(Kind::NonFinite,
                                 path.string() + ": non-finite entry at flat index " + std::to_string(i));
    return seq;
}

std::filesystem::path DatasetManifest::resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
}

std::vector<const ClipRecord*> DatasetManifest::split(Split s) const {
    std::vector<const ClipRecord*> out;
    for (const auto& r : records)
        if (r.split == s) out.push_back(&r);
    return out;
}

void validate_manifest(const DatasetManifest& m, bool verify) {
    if (m.num_classes < 1) throw FeatureIoError(Kind::Manifest, "num_classes must be >= 1");
    if (m.class_names.size() != static_cast<std::size_t>(m.num_classes))
        throw FeatureIoError(Kind::Manifest, "class_names has " + std::to_string(m.class_names.size()) +
                                                 " entries but num_classes is " +
                                                 std::to_string(m.num_classes));
    std::unordered_set<std::string> seen;
    for (const auto& r : m.records) {
        if (!seen.insert(r.clip_id).second)
            throw FeatureIoError(Kind::Manifest, "duplicate clip_id '" + r.clip_id + "'");
        if (r.label_id < 0 || r.label_id >= m.num_classes)
            throw FeatureIoError(Kind::Manifest, "clip '" + r.clip_id + "': unknown label_id " +
                                                     std::to_string(r.label_id));
        if (r.t_clip < 1) throw FeatureIoError(Kind::Manifest, "clip '" + r.clip_id + "': t_clip < 1");
        if (!verify) continue;
        const std::pair<const std::string*, Modality> files[] = {{&r.visual_path, Modality::Visual},
                                                                  {&r.skeleton_path, Modality::Skeleton}};
        for (const auto& [rel, modality] : files) {
            const auto path = m.resolve(*rel);
            if (!std::filesystem::exists(path))
                throw FeatureIoError(Kind::Io, "clip '" + r.clip_id + "': missing file " + path.string());
            const auto h = read_header(path);
            if (h.modality != modality)
                throw FeatureIoError(Kind::BadModality, path.string() + ": expected " + to_string(modality) +
                                                            " file, found " + to_string(h.modality));
            if (h.dims[0] != r.t_clip)
                throw FeatureIoError(Kind::DimMismatch, "clip '" + r.clip_id + "': t_clip " +
                                                            std::to_string(r.t_clip) + " but " + path.string() +
                                                            " has " + std::to_string(h.dims[0]) + " frames");
        }
    }
}

DatasetManifest load_manifest(const std::filesystem::path& path, bool verify) {
    std::ifstream in(path);
    if (!in) throw FeatureIoError(Kind::Io, "cannot open manifest " + path.string());
    DatasetManifest m;
    m.base_dir = path.parent_path();
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    try {
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            const auto j = nlohmann::json::parse(line);
            if (!have_header) {
                m.num_classes = j.at("num_classes").get<int>();
                m.class_names = j.at("class_names").get<std::vector<std::string>>();
                have_header = true;
                continue;
            }
            ClipRecord r;
            r.clip_id = j.at("clip_id").get<std::string>();
            r.label_id = j.at("label_id").get<int>();
            r.label_name = j.value("label_name", std::string{});
            r.split = parse_split(j.at("split").get<std::string>());
            r.t_clip = j.at("t_clip").get<std::size_t>();
            r.visual_path = j.at("visual_path").get<std::string>();
            r.skeleton_path = j.at("skeleton_path").get<std::string>();
            m.records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FeatureIoError(Kind::Manifest, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!have_header) throw FeatureIoError(Kind::Manifest, path.string() + ": missing header line");
    validate_manifest(m, verify);
    for (auto& r : m.records)
        if (r.label_name.empty()) r.label_name = m.class_names[static_cast<std::size_t>(r.label_id)];
    return m;
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    validate_manifest(m);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FeatureIoError(Kind::Io, "cannot create manifest " + path.string());
    nlohmann::ordered_json header;
    header["num_classes"] = m.num_classes;
    header["class_names"] = m.class_names;
    out << header.dump() << '\n';
    for (const auto& r : m.records) {
        nlohmann::ordered_json j;
        j["clip_id"] = r.clip_id;
        j["label_id"] = r.label_id;
        j["label_name"] = r.label_name;
        j["split"] = to_string(r.split);
        j["t_clip"] = r.t_clip;
        j["visual_path"] = r.visual_path;
        j["skeleton_path"] = r.skeleton_path;
        out << j.dump() << '\n';
    }
    if (!out) throw FeatureIoError(Kind::Io, "write failed: " + path.string());
}

}  // namespace crossfuse
