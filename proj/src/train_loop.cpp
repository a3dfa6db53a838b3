#include "crossfuse/train_loop.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "crossfuse/checkpoint.hpp"

namespace crossfuse {

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(base_lr > 0.0)) fail("base_lr must be > 0");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) fail("warmup_fraction must be in [0, 1)");
    if (!(clip_max_norm > 0.0)) fail("clip_max_norm must be > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
    if (seeds.empty()) fail("at least one seed is required");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
    if (!(eps > 0.0)) fail("eps must be > 0");
    tsn.validate();
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
    if (total_steps == 0) throw std::invalid_argument("lr_at: total_steps must be >= 1");
    if (step > total_steps) throw std::invalid_argument("lr_at: step beyond total_steps");
    const auto w = static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(total_steps)));
    if (step < w) return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(w);
    if (w == total_steps) return cfg.base_lr;
    const double progress = static_cast<double>(step - w) / static_cast<double>(total_steps - w);
    return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Matrix<double> TrainedModel::predict_proba(const Batch<float>& batch) const {
    switch (variant) {
        case Variant::CrossAttention:
            return matrix_cast<double>(softmax(CrossAttentionNet<float>(config).forward(cross, batch, Mode::Eval, nullptr)));
        case Variant::EarlyFusion:
            return matrix_cast<double>(softmax(EarlyFusionNet<float>(config).forward(early, batch, Mode::Eval, nullptr)));
        case Variant::VisualProbe:
            return matrix_cast<double>(
                softmax(ProbeNet<float>(config, Modality::Visual).forward(visual_probe, batch, Mode::Eval, nullptr)));
        case Variant::SkeletonProbe:
            return matrix_cast<double>(softmax(
                ProbeNet<float>(config, Modality::Skeleton).forward(skeleton_probe, batch, Mode::Eval, nullptr)));
        case Variant::LateFusion:
            return matrix_cast<double>(forward_late_fusion(batch, visual_probe, skeleton_probe, config));
    }
    throw std::logic_error("unknown variant");
}

PredictionSet predict(const TrainedModel& model, std::span<const RawClip* const> clips, const TsnPlan& plan,
                      std::size_t batch_size) {
    if (clips.empty()) throw std::invalid_argument("predict: no clips");
    TsnPlan det = plan;
    det.mode = TsnPlan::Mode::Deterministic;
    PredictionSet out;
    out.scores = Matrix<double>(clips.size(), model.config.num_classes);
    for (std::size_t start = 0; start < clips.size(); start += batch_size) {
        const std::size_t end = std::min(clips.size(), start + batch_size);
        std::vector<AlignedClip> aligned;
        for (std::size_t i = start; i < end; ++i) aligned.push_back(align_clip(*clips[i], det, 0));
        const auto batch = make_batch<float>(std::span<const AlignedClip>(aligned));
        const auto probs = model.predict_proba(batch);
        for (std::size_t i = 0; i < probs.rows(); ++i) std::ranges::copy(probs.row(i), out.scores.row(start + i).begin());
        out.labels.insert(out.labels.end(), batch.labels.begin(), batch.labels.end());
    }
    return out;
}

EvalOutcome evaluate_model(const TrainedModel& model, std::span<const RawClip* const> clips, const TsnPlan& plan,
                           std::size_t batch_size, bool restrict) {
    EvalOutcome out;
    out.predictions = predict(model, clips, plan, batch_size);
    if (restrict) {
        out.class_ids = present_classes(out.predictions.labels);
        out.predictions = restrict_classes(out.predictions, out.class_ids);
    } else {
        out.class_ids.resize(model.config.num_classes);
        std::iota(out.class_ids.begin(), out.class_ids.end(), 0);
    }
    out.metrics = evaluate(out.predictions);
    return out;
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finaliser over a combined key.
    std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix(seed, epoch));
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order[i - 1], order[pick(rng)]);
    }
    return order;
}

class LogWriter {
public:
    explicit LogWriter(const std::filesystem::path& dir) {
        if (dir.empty()) return;
        std::filesystem::create_directories(dir);
        out_.open(dir / "train_log.jsonl", std::ios::trunc);
        if (!out_) throw std::runtime_error("cannot create " + (dir / "train_log.jsonl").string());
    }
    void write(const nlohmann::json& j) {
        if (out_.is_open()) out_ << j.dump() << '\n' << std::flush;
    }

private:
    std::ofstream out_;
};

nlohmann::json metrics_json(const MetricMap& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : m) j[k] = v;
    return j;
}

template <class Net>
struct Component {
    Net net;
    Variant variant;
    std::string name;  // prefix in logs; empty for single-network variants
    std::function<void(TrainedModel&, const typename Net::Params&)> install;
};

struct Context {
    const ClipSet& data;
    const ModelConfig& model_cfg;
    const TrainConfig& cfg;
    std::uint64_t seed;
    const TrainOptions& options;
    LogWriter& log;
    bool write_checkpoints;
};

template <class Net>
TrainResult train_component(const Component<Net>& comp, const Context& ctx) {
    using Params = typename Net::Params;
    const auto train_clips = ctx.data.split(Split::Train);
    const auto val_clips = ctx.data.split(Split::Val);
    if (train_clips.empty()) throw std::invalid_argument("train: the Train split is empty");
    if (val_clips.empty()) throw std::invalid_argument("train: the Val split is empty");

    const TrainConfig& cfg = ctx.cfg;
    TsnPlan random_plan = cfg.tsn;
    random_plan.mode = TsnPlan::Mode::Random;
    const std::size_t eval_batch = std::max<std::size_t>(cfg.batch_size, 64);

    Params params = comp.net.init(ctx.seed);
    auto state = AdamState<Params>::fresh(params);
    std::mt19937_64 dropout_rng(mix(ctx.seed, 0xD50F));
    const std::size_t steps_per_epoch = (train_clips.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;

    TrainResult result;
    result.variant = comp.variant;
    result.seed = ctx.seed;
    TrainedModel current{comp.variant, ctx.model_cfg, {}, {}, {}, {}};

    auto tag = [&](nlohmann::json j) {
        if (!comp.name.empty()) j["component"] = comp.name;
        return j;
    };

    // The last checkpoint written stays in place; only the log records the failure.
    auto diverged = [&](std::size_t epoch, std::size_t at_step, const std::string& what) {
        ctx.log.write(tag({{"type", "diverged"}, {"epoch", epoch}, {"step", at_step}, {"error", what}}));
        throw TrainingDiverged("training diverged at step " + std::to_string(at_step) + ": " + what);
    };

    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto order = epoch_order(train_clips.size(), ctx.seed, epoch);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<AlignedClip> aligned;
            for (std::size_t i = start; i < end; ++i)
                aligned.push_back(align_clip(*train_clips[order[i]], random_plan, mix(mix(ctx.seed, epoch), order[i])));
            const auto batch = make_batch<float>(std::span<const AlignedClip>(aligned));

            GradientResult<Params> g;
            double norm = 0.0;
            try {
                g = loss_and_gradients(comp.net, params, batch, &dropout_rng);
                norm = clip_gradients(g.grads, cfg.clip_max_norm);
            } catch (const std::runtime_error& e) {
                if (!dynamic_cast<const NumericalError*>(&e) && !dynamic_cast<const TrainingDiverged*>(&e)) throw;
                diverged(epoch, step, e.what());
            }
            const double lr = lr_at(step, total_steps, cfg);
            adamw_step(params, g.grads, state, lr, cfg);
            loss_sum += g.loss * static_cast<double>(batch.size);
            result.step_losses.push_back(g.loss);
            ctx.log.write(tag({{"type", "step"}, {"epoch", epoch}, {"step", step}, {"lr", lr}, {"loss", g.loss},
                               {"grad_norm", norm}}));
        }

        EpochSummary summary;
        summary.epoch = epoch;
        summary.train_loss = loss_sum / static_cast<double>(train_clips.size());
        comp.install(current, params);
        try {
            summary.val = evaluate_model(current, val_clips, cfg.tsn, eval_batch, cfg.restrict_classes).metrics;
            if (cfg.eval_train)
                summary.train_top1 =
                    evaluate_model(current, train_clips, cfg.tsn, eval_batch, false).metrics.at("top1");
        } catch (const NumericalError& e) {
            diverged(epoch, step, e.what());
        }
        const double val_map = summary.val.at("macro_map");
        // Exact mAP ties (typically at 1.0) fall back to validation Top-1.
        const bool tie_better = val_map == result.best_val_map &&
                                summary.val.at("top1") > result.best_val_metrics.at("top1");
        if (val_map > result.best_val_map || tie_better) {
            summary.improved = true;
            result.best_val_map = val_map;
            result.best_epoch = epoch;
            result.best_val_metrics = summary.val;
            result.best = current;
            if (ctx.write_checkpoints) {
                std::ostringstream rng_state;
                rng_state << dropout_rng;
                nlohmann::json meta{{"seed", ctx.seed},
                                    {"epoch", epoch},
                                    {"step", step},
                                    {"adam_step", state.step},
                                    {"best_val_map", val_map},
                                    {"best_val_metrics", metrics_json(summary.val)},
                                    {"train_config", to_json(cfg)},
                                    {"rng_state", rng_state.str()},
                                    {"class_names", ctx.data.class_names}};
                Checkpoint ckpt = make_checkpoint(current, meta);
                store_tensors(ckpt, state.m, "adam.m.");
                store_tensors(ckpt, state.v, "adam.v.");
                write_checkpoint(ckpt, ctx.options.out_dir / "checkpoint.bin");
            }
        }
        nlohmann::json rec = tag({{"type", "epoch"},
                                  {"epoch", epoch},
                                  {"step", step},
                                  {"train_loss", summary.train_loss},
                                  {"val", metrics_json(summary.val)},
                                  {"best_val_map", result.best_val_map},
                                  {"improved", summary.improved}});
        if (cfg.eval_train) rec["train_top1"] = summary.train_top1;
        ctx.log.write(rec);
        if (ctx.options.progress) {
            std::ostringstream os;
            os << (comp.name.empty() ? to_string(comp.variant) : comp.name) << " seed " << ctx.seed << " epoch "
               << epoch << "/" << cfg.epochs << " loss " << summary.train_loss << " val top1 "
               << summary.val.at("top1") << " mAP " << val_map << (summary.improved ? " *" : "");
            if (cfg.eval_train) os << " train top1 " << summary.train_top1;
            ctx.options.progress(os.str());
        }
        result.epochs.push_back(std::move(summary));
    }
    return result;
}

}  // namespace

TrainResult train(Variant variant, const ClipSet& data, const ModelConfig& model_cfg_in, const TrainConfig& cfg,
                  std::uint64_t seed, const TrainOptions& options) {
    cfg.validate();
    ModelConfig model_cfg = model_cfg_in;
    model_cfg.dropout = cfg.dropout;
    model_cfg.seq_len = cfg.tsn.length();
    model_cfg.num_classes = static_cast<std::size_t>(data.num_classes);
    if (data.visual_dim() != 0) model_cfg.d_v = data.visual_dim();
    model_cfg.validate();

    LogWriter log(options.out_dir);
    const bool write = !options.out_dir.empty();
    Context ctx{data, model_cfg, cfg, seed, options, log, write};

    switch (variant) {
        case Variant::CrossAttention:
            return train_component(Component<CrossAttentionNet<float>>{CrossAttentionNet<float>(model_cfg), variant, "",
                                                                       [](TrainedModel& m, const auto& p) { m.cross = p; }},
                                   ctx);
        case Variant::EarlyFusion:
            return train_component(Component<EarlyFusionNet<float>>{EarlyFusionNet<float>(model_cfg), variant, "",
                                                                    [](TrainedModel& m, const auto& p) { m.early = p; }},
                                   ctx);
        case Variant::VisualProbe:
            return train_component(
                Component<ProbeNet<float>>{ProbeNet<float>(model_cfg, Modality::Visual), variant, "",
                                           [](TrainedModel& m, const auto& p) { m.visual_probe = p; }},
                ctx);
        case Variant::SkeletonProbe:
            return train_component(
                Component<ProbeNet<float>>{ProbeNet<float>(model_cfg, Modality::Skeleton), variant, "",
                                           [](TrainedModel& m, const auto& p) { m.skeleton_probe = p; }},
                ctx);
        case Variant::LateFusion: break;
    }

    // Late fusion: two independent probes, each selected by its own validation
    // mAP; the averaged model is then scored once.
    Context probe_ctx = ctx;
    probe_ctx.write_checkpoints = false;
    const TrainResult rv = train_component(
        Component<ProbeNet<float>>{ProbeNet<float>(model_cfg, Modality::Visual), Variant::VisualProbe, "visual_probe",
                                   [](TrainedModel& m, const auto& p) { m.visual_probe = p; }},
        probe_ctx);
    const TrainResult rs = train_component(
        Component<ProbeNet<float>>{ProbeNet<float>(model_cfg, Modality::Skeleton), Variant::SkeletonProbe,
                                   "skeleton_probe", [](TrainedModel& m, const auto& p) { m.skeleton_probe = p; }},
        probe_ctx);

    TrainResult result;
    result.variant = Variant::LateFusion;
    result.seed = seed;
    result.best = {Variant::LateFusion, model_cfg, {}, {}, rv.best.visual_probe, rs.best.skeleton_probe};
    result.best_val_metrics = evaluate_model(result.best, data.split(Split::Val), cfg.tsn,
                                             std::max<std::size_t>(cfg.batch_size, 64), cfg.restrict_classes)
                                  .metrics;
    result.best_val_map = result.best_val_metrics.at("macro_map");
    result.best_epoch = std::max(rv.best_epoch, rs.best_epoch);
    result.step_losses = rv.step_losses;
    result.step_losses.insert(result.step_losses.end(), rs.step_losses.begin(), rs.step_losses.end());
    result.epochs = rv.epochs;
    result.epochs.insert(result.epochs.end(), rs.epochs.begin(), rs.epochs.end());
    log.write({{"type", "late_fusion"},
               {"visual_probe_epoch", rv.best_epoch},
               {"skeleton_probe_epoch", rs.best_epoch},
               {"val", metrics_json(result.best_val_metrics)},
               {"best_val_map", result.best_val_map}});
    if (write) {
        nlohmann::json meta{{"seed", seed},
                            {"epoch", result.best_epoch},
                            {"best_val_map", result.best_val_map},
                            {"best_val_metrics", metrics_json(result.best_val_metrics)},
                            {"probe_epochs", {{"visual_probe", rv.best_epoch}, {"skeleton_probe", rs.best_epoch}}},
                            {"train_config", to_json(cfg)},
                            {"class_names", data.class_names}};
        write_checkpoint(make_checkpoint(result.best, meta), options.out_dir / "checkpoint.bin");
    }
    return result;
}

}  // namespace crossfuse
