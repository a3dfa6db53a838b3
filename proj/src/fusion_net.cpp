#include "crossfuse/fusion_net.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "crossfuse/kernels.hpp"

namespace crossfuse {

const char* to_string(Variant v) {
    switch (v) {
        case Variant::CrossAttention: return "cross";
        case Variant::EarlyFusion: return "early";
        case Variant::LateFusion: return "late";
        case Variant::VisualProbe: return "vprobe";
        case Variant::SkeletonProbe: return "sprobe";
    }
    return "?";
}

Variant parse_variant(const std::string& s) {
    if (s == "cross") return Variant::CrossAttention;
    if (s == "early") return Variant::EarlyFusion;
    if (s == "late") return Variant::LateFusion;
    if (s == "vprobe") return Variant::VisualProbe;
    if (s == "sprobe") return Variant::SkeletonProbe;
    throw std::invalid_argument("unknown variant '" + s + "' (expected cross|early|late|vprobe|sprobe)");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (d_v < 1 || d_s < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || ffn_dim < 1 || head_hidden < 1 ||
        num_classes < 1 || seq_len < 1)
        fail("all dimensions must be >= 1");
    if (d_model % n_heads != 0)
        fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
    if (d_model % 2 != 0) fail("d_model must be even for sinusoidal position encoding");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
    if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be > 0");
}

template <typename Real>
Batch<Real> make_batch(std::span<const AlignedClip* const> clips) {
    if (clips.empty()) throw std::invalid_argument("make_batch: empty batch");
    Batch<Real> b;
    b.size = clips.size();
    b.seq_len = clips.front()->visual.rows();
    const std::size_t dv = clips.front()->visual.cols();
    const std::size_t ds = clips.front()->skeleton_flat.cols();
    b.visual = Matrix<Real>(b.size * b.seq_len, dv);
    b.skeleton = Matrix<Real>(b.size * b.seq_len, ds);
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const AlignedClip& c = *clips[i];
        if (c.visual.rows() != b.seq_len || c.skeleton_flat.rows() != b.seq_len || c.visual.cols() != dv ||
            c.skeleton_flat.cols() != ds)
            throw std::invalid_argument("make_batch: clips have inconsistent shapes");
        for (std::size_t j = 0; j < c.visual.size(); ++j) b.visual[i * c.visual.size() + j] = static_cast<Real>(c.visual[j]);
        for (std::size_t j = 0; j < c.skeleton_flat.size(); ++j)
            b.skeleton[i * c.skeleton_flat.size() + j] = static_cast<Real>(c.skeleton_flat[j]);
        b.labels.push_back(c.label_id);
    }
    return b;
}

template <typename Real>
Batch<Real> make_batch(std::span<const AlignedClip> clips) {
    std::vector<const AlignedClip*> ptrs;
    for (const auto& c : clips) ptrs.push_back(&c);
    return make_batch<Real>(std::span<const AlignedClip* const>(ptrs));
}

template <typename Real>
Matrix<Real> sinusoidal_pe(std::size_t length, std::size_t d_model) {
    if (length < 1) throw std::invalid_argument("sinusoidal_pe: length must be >= 1");
    if (d_model % 2 != 0) throw std::invalid_argument("sinusoidal_pe: d_model must be even");
    Matrix<Real> pe(length, d_model);
    for (std::size_t pos = 0; pos < length; ++pos)
        for (std::size_t i = 0; i < d_model / 2; ++i) {
            const double angle =
                static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
            pe(pos, 2 * i) = static_cast<Real>(std::sin(angle));
            pe(pos, 2 * i + 1) = static_cast<Real>(std::cos(angle));
        }
    return pe;
}

template <typename Real>
Matrix<Real> softmax(const Matrix<Real>& logits) {
    Matrix<Real> p(logits.rows(), logits.cols());
    kernels::softmax_rows<Real>(logits.span(), p.span(), logits.rows(), logits.cols());
    return p;
}

template <typename Real>
std::pair<double, Matrix<Real>> softmax_cross_entropy(const Matrix<Real>& logits, std::span<const int> labels) {
    if (labels.size() != logits.rows())
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(logits.rows()) + " rows");
    const std::size_t n = logits.rows();
    const std::size_t c = logits.cols();
    Matrix<Real> grad(n, c);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = logits.row(r);
        const auto y = static_cast<std::size_t>(labels[r]);
        if (labels[r] < 0 || y >= c) throw std::invalid_argument("softmax_cross_entropy: label out of range");
        const double mx = static_cast<double>(*std::max_element(row.begin(), row.end()));
        double z = 0.0;
        for (Real v : row) z += std::exp(static_cast<double>(v) - mx);
        loss += mx + std::log(z) - static_cast<double>(row[y]);
        for (std::size_t k = 0; k < c; ++k) {
            const double p = std::exp(static_cast<double>(row[k]) - mx) / z;
            grad(r, k) = static_cast<Real>((p - (k == y ? 1.0 : 0.0)) / static_cast<double>(n));
        }
    }
    return {loss / static_cast<double>(n), std::move(grad)};
}

namespace {

template <typename Real>
void expect_dims(const Matrix<Real>& m, std::size_t rows, std::size_t cols, const std::string& what) {
    if (m.rows() != rows || m.cols() != cols)
        throw std::invalid_argument(what + ": expected [" + std::to_string(rows) + ", " + std::to_string(cols) +
                                    "], got [" + std::to_string(m.rows()) + ", " + std::to_string(m.cols()) + "]");
}

template <typename Real>
void check_batch(const Batch<Real>& b, const ModelConfig& cfg, bool need_visual, bool need_skeleton) {
    if (b.size == 0) throw std::invalid_argument("batch is empty");
    if (b.seq_len != cfg.seq_len)
        throw std::invalid_argument("batch seq_len " + std::to_string(b.seq_len) + " does not match model seq_len " +
                                    std::to_string(cfg.seq_len));
    if (need_visual) expect_dims(b.visual, b.size * b.seq_len, cfg.d_v, "visual batch");
    if (need_skeleton) expect_dims(b.skeleton, b.size * b.seq_len, cfg.d_s, "skeleton batch");
}

template <typename Real>
void check_linear(const Linear<Real>& l, std::size_t in, std::size_t out, const std::string& name) {
    expect_dims(l.w, in, out, name + ".w");
    expect_dims(l.b, 1, out, name + ".b");
}

template <typename Real>
void check_block(const BlockParams<Real>& b, const ModelConfig& cfg, const std::string& name) {
    const std::size_t d = cfg.d_model;
    for (const auto* l : {&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o}) check_linear(*l, d, d, name + ".attn");
    check_linear(b.ffn_in, d, cfg.ffn_dim, name + ".ffn_in");
    check_linear(b.ffn_out, cfg.ffn_dim, d, name + ".ffn_out");
    for (const auto* n : {&b.norm_attn, &b.norm_ffn}) {
        expect_dims(n->gamma, 1, d, name + ".norm");
        expect_dims(n->beta, 1, d, name + ".norm");
    }
}

template <typename Real>
void check_head(const HeadParams<Real>& h, std::size_t in, const ModelConfig& cfg) {
    check_linear(h.hidden, in, cfg.head_hidden, "head.hidden");
    check_linear(h.out, cfg.head_hidden, cfg.num_classes, "head.out");
}

// Prepends the CLS token to each clip and adds position encodings:
// x [B*T, d] -> z [B*(T+1), d].
template <typename Real>
Matrix<Real> with_cls(const Matrix<Real>& x, const Matrix<Real>& cls, const Matrix<Real>& pe, std::size_t batch) {
    const std::size_t t = x.rows() / batch;
    const std::size_t d = x.cols();
    Matrix<Real> z(batch * (t + 1), d);
    for (std::size_t b = 0; b < batch; ++b) {
        auto head = z.row(b * (t + 1));
        for (std::size_t c = 0; c < d; ++c) head[c] = cls[c] + pe(0, c);
        for (std::size_t i = 0; i < t; ++i) {
            auto dst = z.row(b * (t + 1) + 1 + i);
            const auto src = x.row(b * t + i);
            for (std::size_t c = 0; c < d; ++c) dst[c] = src[c] + pe(1 + i, c);
        }
    }
    return z;
}

// Inverse of with_cls for gradients: returns dx and accumulates dcls.
template <typename Real>
Matrix<Real> split_cls_grad(const Matrix<Real>& dz, std::size_t batch, Matrix<Real>& dcls) {
    const std::size_t t = dz.rows() / batch - 1;
    const std::size_t d = dz.cols();
    Matrix<Real> dx(batch * t, d);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto head = dz.row(b * (t + 1));
        for (std::size_t c = 0; c < d; ++c) dcls[c] += head[c];
        for (std::size_t i = 0; i < t; ++i) std::ranges::copy(dz.row(b * (t + 1) + 1 + i), dx.row(b * t + i).begin());
    }
    return dx;
}

template <typename Real>
Matrix<Real> cls_rows(const Matrix<Real>& z, std::size_t batch) {
    const std::size_t len = z.rows() / batch;
    Matrix<Real> out(batch, z.cols());
    for (std::size_t b = 0; b < batch; ++b) std::ranges::copy(z.row(b * len), out.row(b).begin());
    return out;
}

// Scatters [B, d] CLS gradients (taken from column offset `col`) into a zero [B*len, d] stream gradient.
template <typename Real>
Matrix<Real> scatter_cls(const Matrix<Real>& dfeat, std::size_t col, std::size_t d, std::size_t batch,
                         std::size_t len) {
    Matrix<Real> dz(batch * len, d);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < d; ++c) dz(b * len, c) = dfeat(b, col + c);
    return dz;
}

template <typename Real>
void add_into(Matrix<Real>& a, const Matrix<Real>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename Real>
Dropout make_dropout(const ModelConfig& cfg, Mode mode, std::mt19937_64* rng) {
    return mode == Mode::Train ? Dropout{cfg.dropout, rng} : Dropout{};
}

// Self-attention stack shared by the early-fusion and probe variants.
template <typename Real>
Matrix<Real> self_stack_forward(const std::vector<BlockParams<Real>>& layers, Matrix<Real> z, const BlockShape& shape,
                                Dropout& dropout, std::vector<BlockCache<Real>>* caches) {
    if (caches) caches->resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l)
        z = block_forward(layers[l], z, z, shape, dropout, caches ? &(*caches)[l] : nullptr,
                          "layers." + std::to_string(l));
    return z;
}

template <typename Real>
Matrix<Real> self_stack_backward(const std::vector<BlockParams<Real>>& layers,
                                 const std::vector<BlockCache<Real>>& caches, Matrix<Real> dz,
                                 const BlockShape& shape, std::vector<BlockParams<Real>>& grads) {
    for (std::size_t l = layers.size(); l-- > 0;) {
        Matrix<Real> dq, dkv;
        block_backward(layers[l], caches[l], dz, shape, grads[l], dq, dkv);
        add_into(dq, dkv);
        dz = std::move(dq);
    }
    return dz;
}

}  // namespace

// ---------------------------------------------------------------------------
// CrossAttentionNet

template <typename Real>
CrossAttentionNet<Real>::CrossAttentionNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    pe_ = sinusoidal_pe<Real>(cfg_.seq_len + 1, cfg_.d_model);
}

template <typename Real>
BlockShape CrossAttentionNet<Real>::block_shape(std::size_t batch) const {
    return {batch, cfg_.n_heads, cfg_.layer_norm_eps};
}

template <typename Real>
typename CrossAttentionNet<Real>::Params CrossAttentionNet<Real>::init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    Params p;
    p.proj_v = init_linear<Real>(cfg_.d_v, cfg_.d_model, rng);
    p.proj_s = init_linear<Real>(cfg_.d_s, cfg_.d_model, rng);
    p.cls_v = init_token<Real>(cfg_.d_model, cfg_.cls_init_std, rng);
    p.cls_s = init_token<Real>(cfg_.d_model, cfg_.cls_init_std, rng);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        FusionLayerParams<Real> layer;
        layer.cross_v = init_block<Real>(cfg_.d_model, cfg_.ffn_dim, rng);
        layer.cross_s = init_block<Real>(cfg_.d_model, cfg_.ffn_dim, rng);
        layer.self_v = init_block<Real>(cfg_.d_model, cfg_.ffn_dim, rng);
        layer.self_s = init_block<Real>(cfg_.d_model, cfg_.ffn_dim, rng);
        p.layers.push_back(std::move(layer));
    }
    p.head = init_head<Real>(2 * cfg_.d_model, cfg_.head_hidden, cfg_.num_classes, rng);
    return p;
}

template <typename Real>
void CrossAttentionNet<Real>::check_shapes(const Params& p) const {
    check_linear(p.proj_v, cfg_.d_v, cfg_.d_model, "proj_v");
    check_linear(p.proj_s, cfg_.d_s, cfg_.d_model, "proj_s");
    expect_dims(p.cls_v, 1, cfg_.d_model, "cls_v");
    expect_dims(p.cls_s, 1, cfg_.d_model, "cls_s");
    if (p.layers.size() != cfg_.n_layers)
        throw std::invalid_argument("expected " + std::to_string(cfg_.n_layers) + " fusion layers, got " +
                                    std::to_string(p.layers.size()));
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string n = "layers." + std::to_string(l);
        check_block(p.layers[l].cross_v, cfg_, n + ".cross_v");
        check_block(p.layers[l].cross_s, cfg_, n + ".cross_s");
        check_block(p.layers[l].self_v, cfg_, n + ".self_v");
        check_block(p.layers[l].self_s, cfg_, n + ".self_s");
    }
    check_head(p.head, 2 * cfg_.d_model, cfg_);
}

template <typename Real>
std::pair<Matrix<Real>, Matrix<Real>> CrossAttentionNet<Real>::embed(const Params& p, const Batch<Real>& batch,
                                                                     Dropout& dropout, Cache* cache) const {
    check_batch(batch, cfg_, true, true);
    Matrix<Real> zv = with_cls(linear_forward(batch.visual, p.proj_v), p.cls_v, pe_, batch.size);
    Matrix<Real> zs = with_cls(linear_forward(batch.skeleton, p.proj_s), p.cls_s, pe_, batch.size);
    Matrix<Real> mv = dropout_mask<Real>(zv.rows(), zv.cols(), dropout);
    Matrix<Real> ms = dropout_mask<Real>(zs.rows(), zs.cols(), dropout);
    apply_mask(zv, mv);
    apply_mask(zs, ms);
    if (cache) {
        cache->embed_mask_v = std::move(mv);
        cache->embed_mask_s = std::move(ms);
    }
    return {std::move(zv), std::move(zs)};
}

template <typename Real>
std::pair<Matrix<Real>, Matrix<Real>> CrossAttentionNet<Real>::layer_forward(
    const FusionLayerParams<Real>& layer, const Matrix<Real>& zv, const Matrix<Real>& zs, std::size_t batch,
    Dropout& dropout, LayerCache* cache, const std::string& name) const {
    const BlockShape shape = block_shape(batch);
    // Both directions read the previous layer's streams.
    Matrix<Real> tv = block_forward(layer.cross_v, zv, zs, shape, dropout, cache ? &cache->cross_v : nullptr,
                                    name + ".cross_v");
    Matrix<Real> ts = block_forward(layer.cross_s, zs, zv, shape, dropout, cache ? &cache->cross_s : nullptr,
                                    name + ".cross_s");
    Matrix<Real> ov = block_forward(layer.self_v, tv, tv, shape, dropout, cache ? &cache->self_v : nullptr,
                                    name + ".self_v");
    Matrix<Real> os = block_forward(layer.self_s, ts, ts, shape, dropout, cache ? &cache->self_s : nullptr,
                                    name + ".self_s");
    return {std::move(ov), std::move(os)};
}

template <typename Real>
Matrix<Real> CrossAttentionNet<Real>::classify(const HeadParams<Real>& head, const Matrix<Real>& zv,
                                               const Matrix<Real>& zs, std::size_t batch, Dropout& dropout,
                                               HeadCache<Real>* cache) const {
    const std::size_t d = cfg_.d_model;
    const Matrix<Real> cv = cls_rows(zv, batch);
    const Matrix<Real> cs = cls_rows(zs, batch);
    Matrix<Real> features(batch, 2 * d);
    for (std::size_t b = 0; b < batch; ++b) {
        std::ranges::copy(cv.row(b), features.row(b).begin());
        std::ranges::copy(cs.row(b), features.row(b).begin() + static_cast<std::ptrdiff_t>(d));
    }
    return head_forward(head, features, dropout, cache);
}

template <typename Real>
Matrix<Real> CrossAttentionNet<Real>::forward(const Params& p, const Batch<Real>& batch, Mode mode,
                                              std::mt19937_64* rng, Cache* cache) const {
    Dropout dropout = make_dropout<Real>(cfg_, mode, rng);
    auto [zv, zs] = embed(p, batch, dropout, cache);
    if (cache) cache->layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto next = layer_forward(p.layers[l], zv, zs, batch.size, dropout, cache ? &cache->layers[l] : nullptr,
                                  "layers." + std::to_string(l));
        zv = std::move(next.first);
        zs = std::move(next.second);
    }
    return classify(p.head, zv, zs, batch.size, dropout, cache ? &cache->head : nullptr);
}

template <typename Real>
void CrossAttentionNet<Real>::backward(const Params& p, const Batch<Real>& batch, const Cache& cache,
                                       const Matrix<Real>& dlogits, Params& grads) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t len = batch.seq_len + 1;
    const BlockShape shape = block_shape(batch.size);
    const Matrix<Real> dfeat = head_backward(p.head, cache.head, dlogits, grads.head);
    Matrix<Real> dzv = scatter_cls(dfeat, 0, d, batch.size, len);
    Matrix<Real> dzs = scatter_cls(dfeat, d, d, batch.size, len);

    for (std::size_t l = p.layers.size(); l-- > 0;) {
        const auto& lp = p.layers[l];
        const auto& lc = cache.layers[l];
        auto& lg = grads.layers[l];
        Matrix<Real> dtv, dtv_kv, dts, dts_kv;
        block_backward(lp.self_v, lc.self_v, dzv, shape, lg.self_v, dtv, dtv_kv);
        add_into(dtv, dtv_kv);
        block_backward(lp.self_s, lc.self_s, dzs, shape, lg.self_s, dts, dts_kv);
        add_into(dts, dts_kv);

        Matrix<Real> dzv_q, dzs_kv, dzs_q, dzv_kv;
        block_backward(lp.cross_v, lc.cross_v, dtv, shape, lg.cross_v, dzv_q, dzs_kv);
        block_backward(lp.cross_s, lc.cross_s, dts, shape, lg.cross_s, dzs_q, dzv_kv);
        add_into(dzv_q, dzv_kv);
        add_into(dzs_q, dzs_kv);
        dzv = std::move(dzv_q);
        dzs = std::move(dzs_q);
    }

    apply_mask(dzv, cache.embed_mask_v);
    apply_mask(dzs, cache.embed_mask_s);
    const Matrix<Real> dxv = split_cls_grad(dzv, batch.size, grads.cls_v);
    const Matrix<Real> dxs = split_cls_grad(dzs, batch.size, grads.cls_s);
    linear_backward(batch.visual, dxv, p.proj_v, grads.proj_v);
    linear_backward(batch.skeleton, dxs, p.proj_s, grads.proj_s);
}

// ---------------------------------------------------------------------------
// EarlyFusionNet

template <typename Real>
EarlyFusionNet<Real>::EarlyFusionNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    pe_ = sinusoidal_pe<Real>(cfg_.seq_len + 1, cfg_.d_model);
}

template <typename Real>
typename EarlyFusionNet<Real>::Params EarlyFusionNet<Real>::init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    Params p;
    p.proj_v = init_linear<Real>(cfg_.d_v, cfg_.d_model, rng);
    p.proj_s = init_linear<Real>(cfg_.d_s, cfg_.d_model, rng);
    p.merge = init_linear<Real>(2 * cfg_.d_model, cfg_.d_model, rng);
    p.cls = init_token<Real>(cfg_.d_model, cfg_.cls_init_std, rng);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) p.layers.push_back(init_block<Real>(cfg_.d_model, cfg_.ffn_dim, rng));
    p.head = init_head<Real>(cfg_.d_model, cfg_.head_hidden, cfg_.num_classes, rng);
    return p;
}

template <typename Real>
void EarlyFusionNet<Real>::check_shapes(const Params& p) const {
    check_linear(p.proj_v, cfg_.d_v, cfg_.d_model, "proj_v");
    check_linear(p.proj_s, cfg_.d_s, cfg_.d_model, "proj_s");
    check_linear(p.merge, 2 * cfg_.d_model, cfg_.d_model, "merge");
    expect_dims(p.cls, 1, cfg_.d_model, "cls");
    if (p.layers.size() != cfg_.n_layers) throw std::invalid_argument("early fusion: wrong layer count");
    for (std::size_t l = 0; l < p.layers.size(); ++l) check_block(p.layers[l], cfg_, "layers." + std::to_string(l));
    check_head(p.head, cfg_.d_model, cfg_);
}

template <typename Real>
Matrix<Real> EarlyFusionNet<Real>::forward(const Params& p, const Batch<Real>& batch, Mode mode, std::mt19937_64* rng,
                                           Cache* cache) const {
    check_batch(batch, cfg_, true, true);
    Dropout dropout = make_dropout<Real>(cfg_, mode, rng);
    const std::size_t d = cfg_.d_model;
    Matrix<Real> xv = linear_forward(batch.visual, p.proj_v);
    Matrix<Real> xs = linear_forward(batch.skeleton, p.proj_s);
    Matrix<Real> cat(xv.rows(), 2 * d);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        std::ranges::copy(xv.row(r), cat.row(r).begin());
        std::ranges::copy(xs.row(r), cat.row(r).begin() + static_cast<std::ptrdiff_t>(d));
    }
    Matrix<Real> z = with_cls(linear_forward(cat, p.merge), p.cls, pe_, batch.size);
    Matrix<Real> mask = dropout_mask<Real>(z.rows(), z.cols(), dropout);
    apply_mask(z, mask);
    const BlockShape shape{batch.size, cfg_.n_heads, cfg_.layer_norm_eps};
    z = self_stack_forward(p.layers, std::move(z), shape, dropout, cache ? &cache->layers : nullptr);
    Matrix<Real> logits = head_forward(p.head, cls_rows(z, batch.size), dropout, cache ? &cache->head : nullptr);
    if (cache) {
        cache->merged_in = std::move(cat);
        cache->embed_mask = std::move(mask);
    }
    return logits;
}

template <typename Real>
void EarlyFusionNet<Real>::backward(const Params& p, const Batch<Real>& batch, const Cache& cache,
                                    const Matrix<Real>& dlogits, Params& grads) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t len = batch.seq_len + 1;
    const BlockShape shape{batch.size, cfg_.n_heads, cfg_.layer_norm_eps};
    const Matrix<Real> dfeat = head_backward(p.head, cache.head, dlogits, grads.head);
    Matrix<Real> dz = self_stack_backward(p.layers, cache.layers, scatter_cls(dfeat, 0, d, batch.size, len), shape,
                                          grads.layers);
    apply_mask(dz, cache.embed_mask);
    const Matrix<Real> dmerged = split_cls_grad(dz, batch.size, grads.cls);
    Matrix<Real> dcat;
    linear_backward(cache.merged_in, dmerged, p.merge, grads.merge, &dcat);
    Matrix<Real> dxv(dcat.rows(), d), dxs(dcat.rows(), d);
    for (std::size_t r = 0; r < dcat.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) {
            dxv(r, c) = dcat(r, c);
            dxs(r, c) = dcat(r, d + c);
        }
    linear_backward(batch.visual, dxv, p.proj_v, grads.proj_v);
    linear_backward(batch.skeleton, dxs, p.proj_s, grads.proj_s);
}

// ---------------------------------------------------------------------------
// ProbeNet

template <typename Real>
ProbeNet<Real>::ProbeNet(ModelConfig cfg, Modality modality) : cfg_(std::move(cfg)), modality_(modality) {
    cfg_.validate();
    pe_ = sinusoidal_pe<Real>(cfg_.seq_len + 1, cfg_.d_model);
}

template <typename Real>
const Matrix<Real>& ProbeNet<Real>::input(const Batch<Real>& batch) const {
    return modality_ == Modality::Visual ? batch.visual : batch.skeleton;
}

template <typename Real>
typename ProbeNet<Real>::Params ProbeNet<Real>::init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    Params p;
    p.proj = init_linear<Real>(modality_ == Modality::Visual ? cfg_.d_v : cfg_.d_s, cfg_.d_model, rng);
    p.cls = init_token<Real>(cfg_.d_model, cfg_.cls_init_std, rng);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) p.layers.push_back(init_block<Real>(cfg_.d_model, cfg_.ffn_dim, rng));
    p.head = init_head<Real>(cfg_.d_model, cfg_.head_hidden, cfg_.num_classes, rng);
    return p;
}

template <typename Real>
void ProbeNet<Real>::check_shapes(const Params& p) const {
    check_linear(p.proj, modality_ == Modality::Visual ? cfg_.d_v : cfg_.d_s, cfg_.d_model, "proj");
    expect_dims(p.cls, 1, cfg_.d_model, "cls");
    if (p.layers.size() != cfg_.n_layers) throw std::invalid_argument("probe: wrong layer count");
    for (std::size_t l = 0; l < p.layers.size(); ++l) check_block(p.layers[l], cfg_, "layers." + std::to_string(l));
    check_head(p.head, cfg_.d_model, cfg_);
}

template <typename Real>
Matrix<Real> ProbeNet<Real>::forward(const Params& p, const Batch<Real>& batch, Mode mode, std::mt19937_64* rng,
                                     Cache* cache) const {
    check_batch(batch, cfg_, modality_ == Modality::Visual, modality_ == Modality::Skeleton);
    Dropout dropout = make_dropout<Real>(cfg_, mode, rng);
    Matrix<Real> z = with_cls(linear_forward(input(batch), p.proj), p.cls, pe_, batch.size);
    Matrix<Real> mask = dropout_mask<Real>(z.rows(), z.cols(), dropout);
    apply_mask(z, mask);
    const BlockShape shape{batch.size, cfg_.n_heads, cfg_.layer_norm_eps};
    z = self_stack_forward(p.layers, std::move(z), shape, dropout, cache ? &cache->layers : nullptr);
    Matrix<Real> logits = head_forward(p.head, cls_rows(z, batch.size), dropout, cache ? &cache->head : nullptr);
    if (cache) cache->embed_mask = std::move(mask);
    return logits;
}

template <typename Real>
void ProbeNet<Real>::backward(const Params& p, const Batch<Real>& batch, const Cache& cache,
                              const Matrix<Real>& dlogits, Params& grads) const {
    const BlockShape shape{batch.size, cfg_.n_heads, cfg_.layer_norm_eps};
    const Matrix<Real> dfeat = head_backward(p.head, cache.head, dlogits, grads.head);
    Matrix<Real> dz = self_stack_backward(p.layers, cache.layers,
                                          scatter_cls(dfeat, 0, cfg_.d_model, batch.size, batch.seq_len + 1), shape,
                                          grads.layers);
    apply_mask(dz, cache.embed_mask);
    const Matrix<Real> dx = split_cls_grad(dz, batch.size, grads.cls);
    linear_backward(input(batch), dx, p.proj, grads.proj);
}

// ---------------------------------------------------------------------------
// Functional entry points

template <typename Real>
std::pair<Matrix<Real>, Matrix<Real>> embed_streams(const Batch<Real>& batch, const FusionModelParams<Real>& params,
                                                    const ModelConfig& cfg, Mode mode, std::mt19937_64* rng) {
    const CrossAttentionNet<Real> net(cfg);
    net.check_shapes(params);
    Dropout dropout = make_dropout<Real>(cfg, mode, rng);
    return net.embed(params, batch, dropout, nullptr);
}

template <typename Real>
std::pair<Matrix<Real>, Matrix<Real>> fusion_layer_forward(const Matrix<Real>& zv, const Matrix<Real>& zs,
                                                           const FusionLayerParams<Real>& layer,
                                                           const ModelConfig& cfg, std::size_t batch, Mode mode,
                                                           std::mt19937_64* rng) {
    if (!zv.same_shape(zs) || zv.cols() != cfg.d_model)
        throw std::invalid_argument("fusion_layer_forward: streams must both be [B*(T+1), d_model]");
    check_finite(zv, "fusion_layer_forward input (visual)");
    check_finite(zs, "fusion_layer_forward input (skeleton)");
    const CrossAttentionNet<Real> net(cfg);
    Dropout dropout = make_dropout<Real>(cfg, mode, rng);
    return net.layer_forward(layer, zv, zs, batch, dropout, nullptr);
}

template <typename Real>
Matrix<Real> classify(const Matrix<Real>& zv_final, const Matrix<Real>& zs_final, const HeadParams<Real>& head,
                      const ModelConfig& cfg, std::size_t batch, Mode mode, std::mt19937_64* rng) {
    const CrossAttentionNet<Real> net(cfg);
    Dropout dropout = make_dropout<Real>(cfg, mode, rng);
    return net.classify(head, zv_final, zs_final, batch, dropout, nullptr);
}

template <typename Real>
Matrix<Real> forward(const Batch<Real>& batch, const FusionModelParams<Real>& params, const ModelConfig& cfg,
                     Mode mode, std::mt19937_64* rng) {
    const CrossAttentionNet<Real> net(cfg);
    net.check_shapes(params);
    return net.forward(params, batch, mode, rng);
}

template <typename Real>
Matrix<Real> forward_early_fusion(const Batch<Real>& batch, const EarlyFusionParams<Real>& params,
                                  const ModelConfig& cfg, Mode mode, std::mt19937_64* rng) {
    const EarlyFusionNet<Real> net(cfg);
    net.check_shapes(params);
    return net.forward(params, batch, mode, rng);
}

template <typename Real>
Matrix<Real> average_probabilities(const Matrix<Real>& a, const Matrix<Real>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("average_probabilities: shape mismatch");
    Matrix<Real> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = Real(0.5) * (a[i] + b[i]);
    return out;
}

template <typename Real>
Matrix<Real> forward_late_fusion(const Batch<Real>& batch, const ProbeParams<Real>& visual_probe,
                                 const ProbeParams<Real>& skeleton_probe, const ModelConfig& cfg) {
    const ProbeNet<Real> vnet(cfg, Modality::Visual);
    const ProbeNet<Real> snet(cfg, Modality::Skeleton);
    vnet.check_shapes(visual_probe);
    snet.check_shapes(skeleton_probe);
    return average_probabilities(softmax(vnet.forward(visual_probe, batch, Mode::Eval, nullptr)),
                                 softmax(snet.forward(skeleton_probe, batch, Mode::Eval, nullptr)));
}

template <typename Real>
GradientResult<FusionModelParams<Real>> backward(const Batch<Real>& batch, const FusionModelParams<Real>& params,
                                                 const ModelConfig& cfg, std::mt19937_64* rng) {
    const CrossAttentionNet<Real> net(cfg);
    net.check_shapes(params);
    return loss_and_gradients(net, params, batch, rng);
}

#define CROSSFUSE_INSTANTIATE_NET(Real)                                                                            \
    template Batch<Real> make_batch<Real>(std::span<const AlignedClip* const>);                                    \
    template Batch<Real> make_batch<Real>(std::span<const AlignedClip>);                                           \
    template Matrix<Real> sinusoidal_pe<Real>(std::size_t, std::size_t);                                           \
    template Matrix<Real> softmax<Real>(const Matrix<Real>&);                                                      \
    template std::pair<double, Matrix<Real>> softmax_cross_entropy<Real>(const Matrix<Real>&,                       \
                                                                         std::span<const int>);                    \
    template class CrossAttentionNet<Real>;                                                                        \
    template class EarlyFusionNet<Real>;                                                                           \
    template class ProbeNet<Real>;                                                                                 \
    template std::pair<Matrix<Real>, Matrix<Real>> embed_streams<Real>(                                            \
        const Batch<Real>&, const FusionModelParams<Real>&, const ModelConfig&, Mode, std::mt19937_64*);           \
    template std::pair<Matrix<Real>, Matrix<Real>> fusion_layer_forward<Real>(                                     \
        const Matrix<Real>&, const Matrix<Real>&, const FusionLayerParams<Real>&, const ModelConfig&, std::size_t, \
        Mode, std::mt19937_64*);                                                                                   \
    template Matrix<Real> classify<Real>(const Matrix<Real>&, const Matrix<Real>&, const HeadParams<Real>&,        \
                                         const ModelConfig&, std::size_t, Mode, std::mt19937_64*);                 \
    template Matrix<Real> forward<Real>(const Batch<Real>&, const FusionModelParams<Real>&, const ModelConfig&,    \
                                        Mode, std::mt19937_64*);                                                   \
    template Matrix<Real> forward_early_fusion<Real>(const Batch<Real>&, const EarlyFusionParams<Real>&,           \
                                                     const ModelConfig&, Mode, std::mt19937_64*);                  \
    template Matrix<Real> average_probabilities<Real>(const Matrix<Real>&, const Matrix<Real>&);                   \
    template Matrix<Real> forward_late_fusion<Real>(const Batch<Real>&, const ProbeParams<Real>&,                  \
                                                    const ProbeParams<Real>&, const ModelConfig&);                 \
    template GradientResult<FusionModelParams<Real>> backward<Real>(const Batch<Real>&,                            \
                                                                    const FusionModelParams<Real>&,                \
                                                                    const ModelConfig&, std::mt19937_64*);

CROSSFUSE_INSTANTIATE_NET(float)
CROSSFUSE_INSTANTIATE_NET(double)

#undef CROSSFUSE_INSTANTIATE_NET

}  // namespace crossfuse
