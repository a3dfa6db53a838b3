#pragma once

// Cross-attention fusion network and its ablation variants.
//
//   embed:    X = F W + b per modality, prepend a learnable CLS token, add
//             sinusoidal position encodings over T+1 positions
//   layer:    Z~_v = Block(Q=Z_v, K=V=Z_s), Z~_s = Block(Q=Z_s, K=V=Z_v)
//             (both from the previous layer's outputs), then a self-attention
//             Block on each stream
//   classify: concat(CLS_v, CLS_s) -> MLP -> logits
//
// A Block is two post-norm residual sub-layers: attention, then FFN.
// Softmax is applied only by the loss and at inference.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crossfuse/feature_io.hpp"
#include "crossfuse/layers.hpp"
#include "crossfuse/matrix.hpp"
#include "crossfuse/params.hpp"
#include "crossfuse/preprocess.hpp"

namespace crossfuse {

enum class Mode { Train, Eval };

enum class Variant { CrossAttention, EarlyFusion, LateFusion, VisualProbe, SkeletonProbe };

/// CLI spelling: cross | early | late | vprobe | sprobe
const char* to_string(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
    std::size_t d_v = kVisualDim;
    std::size_t d_s = kSkeletonDim;
    std::size_t d_model = 512;
    std::size_t n_layers = 4;
    std::size_t n_heads = 8;
    std::size_t ffn_dim = 2048;
    std::size_t head_hidden = 512;
    double dropout = 0.1;
    std::size_t num_classes = 14;
    std::size_t seq_len = 64;
    double layer_norm_eps = 1e-5;
    double cls_init_std = 0.02;

    std::size_t head_dim() const noexcept { return d_model / n_heads; }
    /// Throws std::invalid_argument on an inconsistent configuration.
    void validate() const;
};

/// B clips stacked row-wise: visual is [B*T, d_v], skeleton is [B*T, d_s].
template <typename Real>
struct Batch {
    std::size_t size = 0;
    std::size_t seq_len = 0;
    Matrix<Real> visual;
    Matrix<Real> skeleton;
    std::vector<int> labels;
};

template <typename Real>
Batch<Real> make_batch(std::span<const AlignedClip* const> clips);

template <typename Real>
Batch<Real> make_batch(std::span<const AlignedClip> clips);

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(pos / 10000^(2i/d)).
template <typename Real>
Matrix<Real> sinusoidal_pe(std::size_t length, std::size_t d_model);

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
template <typename Real>
std::pair<double, Matrix<Real>> softmax_cross_entropy(const Matrix<Real>& logits, std::span<const int> labels);

template <typename Real>
Matrix<Real> softmax(const Matrix<Real>& logits);

template <typename Real>
class CrossAttentionNet {
public:
    using Params = FusionModelParams<Real>;

    struct LayerCache {
        BlockCache<Real> cross_v, cross_s, self_v, self_s;
    };
    struct Cache {
        Matrix<Real> embed_mask_v, embed_mask_s;
        std::vector<LayerCache> layers;
        HeadCache<Real> head;
    };

    explicit CrossAttentionNet(ModelConfig cfg);

    const ModelConfig& config() const noexcept { return cfg_; }
    Params init(std::uint64_t seed) const;
    void check_shapes(const Params& p) const;

    /// Z_V0, Z_S0, each [B*(T+1), d_model].
    std::pair<Matrix<Real>, Matrix<Real>> embed(const Params& p, const Batch<Real>& batch, Dropout& dropout,
                                                Cache* cache) const;
    std::pair<Matrix<Real>, Matrix<Real>> layer_forward(const FusionLayerParams<Real>& layer, const Matrix<Real>& zv,
                                                        const Matrix<Real>& zs, std::size_t batch, Dropout& dropout,
                                                        LayerCache* cache, const std::string& name = "layer") const;
    Matrix<Real> classify(const HeadParams<Real>& head, const Matrix<Real>& zv, const Matrix<Real>& zs,
                          std::size_t batch, Dropout& dropout, HeadCache<Real>* cache) const;

    Matrix<Real> forward(const Params& p, const Batch<Real>& batch, Mode mode, std::mt19937_64* rng,
                         Cache* cache = nullptr) const;
    /// Accumulates into grads (which must be shaped like p).
    void backward(const Params& p, const Batch<Real>& batch, const Cache& cache, const Matrix<Real>& dlogits,
                  Params& grads) const;

private:
    BlockShape block_shape(std::size_t batch) const;

    ModelConfig cfg_;
    Matrix<Real> pe_;
};

template <typename Real>
class EarlyFusionNet {
public:
    using Params = EarlyFusionParams<Real>;

    struct Cache {
        Matrix<Real> xv, xs, merged_in;
        Matrix<Real> embed_mask;
        std::vector<BlockCache<Real>> layers;
        HeadCache<Real> head;
    };

    explicit EarlyFusionNet(ModelConfig cfg);

    const ModelConfig& config() const noexcept { return cfg_; }
    Params init(std::uint64_t seed) const;
    void check_shapes(const Params& p) const;

    Matrix<Real> forward(const Params& p, const Batch<Real>& batch, Mode mode, std::mt19937_64* rng,
                         Cache* cache = nullptr) const;
    void backward(const Params& p, const Batch<Real>& batch, const Cache& cache, const Matrix<Real>& dlogits,
                  Params& grads) const;

private:
    ModelConfig cfg_;
    Matrix<Real> pe_;
};

/// Attentive probe over a single modality (projection, CLS, PE, self-attention stack, head).
template <typename Real>
class ProbeNet {
public:
    using Params = ProbeParams<Real>;

    struct Cache {
        Matrix<Real> embed_mask;
        std::vector<BlockCache<Real>> layers;
        HeadCache<Real> head;
    };

    ProbeNet(ModelConfig cfg, Modality modality);

    const ModelConfig& config() const noexcept { return cfg_; }
    Modality modality() const noexcept { return modality_; }
    Params init(std::uint64_t seed) const;
    void check_shapes(const Params& p) const;

    Matrix<Real> forward(const Params& p, const Batch<Real>& batch, Mode mode, std::mt19937_64* rng,
                         Cache* cache = nullptr) const;
    void backward(const Params& p, const Batch<Real>& batch, const Cache& cache, const Matrix<Real>& dlogits,
                  Params& grads) const;

private:
    const Matrix<Real>& input(const Batch<Real>& batch) const;

    ModelConfig cfg_;
    Modality modality_;
    Matrix<Real> pe_;
};

// ---------------------------------------------------------------------------
// Functional entry points.

template <typename Real>
std::pair<Matrix<Real>, Matrix<Real>> embed_streams(const Batch<Real>& batch, const FusionModelParams<Real>& params,
                                                    const ModelConfig& cfg, Mode mode,
                                                    std::mt19937_64* rng = nullptr);

/// zv, zs are [B*(T+1), d_model]; returns the layer's two output streams.
template <typename Real>
std::pair<Matrix<Real>, Matrix<Real>> fusion_layer_forward(const Matrix<Real>& zv, const Matrix<Real>& zs,
                                                           const FusionLayerParams<Real>& layer,
                                                           const ModelConfig& cfg, std::size_t batch, Mode mode,
                                                           std::mt19937_64* rng = nullptr);

template <typename Real>
Matrix<Real> classify(const Matrix<Real>& zv_final, const Matrix<Real>& zs_final, const HeadParams<Real>& head,
                      const ModelConfig& cfg, std::size_t batch, Mode mode, std::mt19937_64* rng = nullptr);

template <typename Real>
Matrix<Real> forward(const Batch<Real>& batch, const FusionModelParams<Real>& params, const ModelConfig& cfg,
                     Mode mode, std::mt19937_64* rng = nullptr);

template <typename Real>
Matrix<Real> forward_early_fusion(const Batch<Real>& batch, const EarlyFusionParams<Real>& params,
                                  const ModelConfig& cfg, Mode mode, std::mt19937_64* rng = nullptr);

/// Elementwise mean of the two probes' softmax outputs.
template <typename Real>
Matrix<Real> forward_late_fusion(const Batch<Real>& batch, const ProbeParams<Real>& visual_probe,
                                 const ProbeParams<Real>& skeleton_probe, const ModelConfig& cfg);

template <typename Real>
Matrix<Real> average_probabilities(const Matrix<Real>& a, const Matrix<Real>& b);

template <typename Params>
struct GradientResult {
    Params grads;
    double loss = 0.0;
};

/// Mean cross-entropy loss and gradients for the cross-attention model.
/// Dropout masks are drawn from rng when given.
template <typename Real>
GradientResult<FusionModelParams<Real>> backward(const Batch<Real>& batch, const FusionModelParams<Real>& params,
                                                 const ModelConfig& cfg, std::mt19937_64* rng = nullptr);

/// Same for any network type (CrossAttentionNet, EarlyFusionNet, ProbeNet).
template <class Net, typename Real>
GradientResult<typename Net::Params> loss_and_gradients(const Net& net, const typename Net::Params& params,
                                                        const Batch<Real>& batch, std::mt19937_64* rng) {
    typename Net::Cache cache;
    const Matrix<Real> logits = net.forward(params, batch, Mode::Train, rng, &cache);
    auto [loss, dlogits] = softmax_cross_entropy(logits, std::span<const int>(batch.labels));
    if (!std::isfinite(loss)) throw NumericalError("loss: non-finite value");
    GradientResult<typename Net::Params> out{zeros_like(params), loss};
    net.backward(params, batch, cache, dlogits, out.grads);
    return out;
}

}  // namespace crossfuse
