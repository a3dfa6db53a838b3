#pragma once

// Optimisation and the training driver: warmup + cosine schedule, global-norm
// clipping, AdamW, shuffled mini-batches, validation-mAP checkpoint selection.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crossfuse/dataset.hpp"
#include "crossfuse/fusion_net.hpp"
#include "crossfuse/metrics.hpp"
#include "crossfuse/params.hpp"
#include "crossfuse/preprocess.hpp"

namespace crossfuse {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    double base_lr = 3e-4;
    double weight_decay = 0.05;
    double warmup_fraction = 0.05;
    double clip_max_norm = 1.0;
    double dropout = 0.1;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    TsnPlan tsn{};
    /// Score only the classes present in the evaluated split.
    bool restrict_classes = true;
    /// Also evaluate the Train split (Deterministic TSN) after every epoch.
    bool eval_train = false;

    void validate() const;
};

/// Thrown when the loss or an activation turns non-finite during training.
class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Linear warmup over w = round(warmup_fraction * total_steps) steps, then
/// cosine decay to 0 at step == total_steps.
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

/// Scales every gradient by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the pre-clip norm.
template <class Params>
double clip_gradients(Params& grads, double max_norm) {
    double sq = 0.0;
    for_each_tensor(grads, [&](const std::string&, const auto& t, TensorRole) {
        for (std::size_t i = 0; i < t.size(); ++i) sq += static_cast<double>(t[i]) * static_cast<double>(t[i]);
    });
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingDiverged("gradient norm is not finite");
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for_each_tensor(grads, [&](const std::string&, auto& t, TensorRole) {
            using Real = std::remove_cvref_t<decltype(t[0])>;
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(static_cast<double>(t[i]) * scale);
        });
    }
    return norm;
}

template <class Params>
struct AdamState {
    Params m, v;
    std::size_t step = 0;

    static AdamState fresh(const Params& like) { return {zeros_like(like), zeros_like(like), 0}; }
};

/// One AdamW update. Decay (p *= 1 - lr*wd) touches weight matrices only and
/// is applied before, and independently of, the moment-based update.
template <class Params>
void adamw_step(Params& params, const Params& grads, AdamState<Params>& state, double lr, const TrainConfig& cfg) {
    auto p = flatten(params);
    auto g = flatten(grads);
    auto m = flatten(state.m);
    auto v = flatten(state.v);
    if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size())
        throw std::invalid_argument("adamw_step: parameter/gradient structure mismatch");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t k = 0; k < p.size(); ++k) {
        auto& pt = *p[k].tensor;
        const auto& gt = *g[k].tensor;
        auto& mt = *m[k].tensor;
        auto& vt = *v[k].tensor;
        if (!pt.same_shape(gt) || !pt.same_shape(mt) || !pt.same_shape(vt))
            throw std::invalid_argument("adamw_step: shape mismatch at " + p[k].name);
        using Real = std::remove_cvref_t<decltype(pt[0])>;
        const bool decayed = p[k].role == TensorRole::Weight;
        for (std::size_t i = 0; i < pt.size(); ++i) {
            double w = static_cast<double>(pt[i]);
            if (decayed) w *= decay;
            const double gi = static_cast<double>(gt[i]);
            const double mi = cfg.beta1 * static_cast<double>(mt[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(vt[i]) + (1.0 - cfg.beta2) * gi * gi;
            mt[i] = static_cast<Real>(mi);
            vt[i] = static_cast<Real>(vi);
            w -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            pt[i] = static_cast<Real>(w);
        }
    }
}

/// A trained model of any variant. Only the members used by `variant` are set.
struct TrainedModel {
    Variant variant = Variant::CrossAttention;
    ModelConfig config;
    FusionModelParams<float> cross;
    EarlyFusionParams<float> early;
    ProbeParams<float> visual_probe;
    ProbeParams<float> skeleton_probe;

    /// Eval-mode class probabilities [B, num_classes].
    Matrix<double> predict_proba(const Batch<float>& batch) const;
};

/// Deterministic-TSN predictions over the given clips.
PredictionSet predict(const TrainedModel& model, std::span<const RawClip* const> clips, const TsnPlan& plan,
                      std::size_t batch_size);

struct EvalOutcome {
    PredictionSet predictions;  // after optional class restriction
    std::vector<int> class_ids; // original id of each scored column
    MetricMap metrics;
};

EvalOutcome evaluate_model(const TrainedModel& model, std::span<const RawClip* const> clips, const TsnPlan& plan,
                           std::size_t batch_size, bool restrict);

struct EpochSummary {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    MetricMap val;
    double train_top1 = -1.0;  // set when TrainConfig::eval_train
    bool improved = false;
};

struct TrainResult {
    Variant variant = Variant::CrossAttention;
    std::uint64_t seed = 0;
    TrainedModel best;  // parameters at the best validation mAP
    double best_val_map = -1.0;
    std::size_t best_epoch = 0;
    MetricMap best_val_metrics;
    std::vector<double> step_losses;
    std::vector<EpochSummary> epochs;
};

struct TrainOptions {
    /// Where checkpoint.bin and train_log.jsonl go; empty keeps everything in memory.
    std::filesystem::path out_dir;
    /// Progress lines (one per epoch); may be empty.
    std::function<void(const std::string&)> progress;
};

/// Trains one variant for one seed. LateFusion trains a visual and a skeleton
/// probe independently and reports their score average.
TrainResult train(Variant variant, const ClipSet& data, const ModelConfig& model_cfg, const TrainConfig& cfg,
                  std::uint64_t seed, const TrainOptions& options = {});

}  // namespace crossfuse
