#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "crossfuse/checkpoint.hpp"
#include "crossfuse/kernels.hpp"
#include "crossfuse/synth_fixtures.hpp"
#include "crossfuse/train_loop.hpp"
#include "support/fixtures.hpp"

using namespace crossfuse;
using testing_support::ScratchDir;

namespace {

ProbeParams<double> small_params(std::uint64_t seed) {
    auto cfg = testing_support::tiny_config();
    cfg.n_layers = 1;
    auto p = ProbeNet<double>(cfg, Modality::Visual).init(seed);
    testing_support::randomize(p, seed, 1.0);
    return p;
}

ClipSet small_task(std::uint64_t seed, Modality modality = Modality::Visual) {
    SynthOptions o;
    o.n_clips = 30;
    o.t_clip = 8;
    o.visual_dim = 12;
    o.seed = seed;
    return gen_unimodal_task(modality, o);
}

ModelConfig small_model() {
    ModelConfig m = testing_support::tiny_config();
    m.d_model = 8;
    m.n_layers = 1;
    m.ffn_dim = 16;
    m.head_hidden = 8;
    return m;
}

TrainConfig small_train(std::size_t epochs = 3) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = 7;
    c.base_lr = 1e-3;
    c.tsn.n_segments = 2;
    c.tsn.frames_per_segment = 2;
    c.seeds = {0};
    return c;
}

std::vector<nlohmann::json> read_log(const std::filesystem::path& p) {
    std::vector<nlohmann::json> out;
    std::ifstream in(p);
    std::string line;
    while (std::getline(in, line)) out.push_back(nlohmann::json::parse(line));
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Learning-rate schedule

TEST(Schedule, WarmupEndsAtBaseRate) {
    const TrainConfig cfg;
    const std::size_t total = 1000, w = 50;
    EXPECT_EQ(lr_at(w, total, cfg), 3e-4);
    EXPECT_EQ(lr_at(w - 1, total, cfg), 3e-4);
    EXPECT_NEAR(lr_at(0, total, cfg), 3e-4 / 50.0, 1e-18);
}

TEST(Schedule, FinalStepIsZero) {
    const TrainConfig cfg;
    EXPECT_LE(std::abs(lr_at(1000, 1000, cfg)), 1e-12 * cfg.base_lr);
}

TEST(Schedule, HalfwayThroughDecayIsHalfTheBaseRate) {
    const TrainConfig cfg;
    EXPECT_NEAR(lr_at(50 + 475, 1000, cfg), 1.5e-4, 1e-18);
}

TEST(Schedule, ZeroTotalStepsIsAnError) {
    EXPECT_THROW(lr_at(0, 0, TrainConfig{}), std::invalid_argument);
}

TEST(Schedule, ShapeHoldsForRandomLengths) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> total_dist(1, 3000);
    std::uniform_real_distribution<double> frac(0.0, 0.5);
    for (int trial = 0; trial < 200; ++trial) {
        TrainConfig cfg;
        cfg.warmup_fraction = frac(rng);
        const std::size_t total = total_dist(rng);
        const auto w = static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(total)));
        for (std::size_t s = 1; s < w; ++s) ASSERT_GE(lr_at(s, total, cfg), lr_at(s - 1, total, cfg));
        for (std::size_t s = w + 1; s <= total; ++s) ASSERT_LE(lr_at(s, total, cfg), lr_at(s - 1, total, cfg));
        if (w > 0 && w < total) ASSERT_NEAR(lr_at(w - 1, total, cfg), lr_at(w, total, cfg), 1e-12);
        for (std::size_t s = 0; s <= total; ++s) ASSERT_GE(lr_at(s, total, cfg), 0.0);
    }
}

// ---------------------------------------------------------------------------
// Clipping

TEST(Clip, ThreeFourFiveScalesToUnitNorm) {
    Linear<double> g{Matrix<double>(1, 2), Matrix<double>(1, 0)};
    g.w(0, 0) = 3.0;
    g.w(0, 1) = 4.0;
    EXPECT_EQ(clip_gradients(g, 1.0), 5.0);
    EXPECT_NEAR(g.w(0, 0), 0.6, 1e-15);
    EXPECT_NEAR(g.w(0, 1), 0.8, 1e-15);
}

TEST(Clip, SmallNormIsUnchanged) {
    Linear<double> g{Matrix<double>(1, 2), Matrix<double>(1, 1)};
    g.w(0, 0) = 0.3;
    g.w(0, 1) = 0.4;
    const auto before = g.w;
    EXPECT_NEAR(clip_gradients(g, 1.0), 0.5, 1e-15);
    EXPECT_EQ(g.w, before);
}

TEST(Clip, ZeroGradientsStayZero) {
    auto g = zeros_like(small_params(1));
    const auto before = g;
    EXPECT_EQ(clip_gradients(g, 1.0), 0.0);
    EXPECT_EQ(flatten(g).size(), flatten(before).size());
    EXPECT_EQ(g.proj.w, before.proj.w);
}

TEST(Clip, PostClipNormNeverExceedsTheBound) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> max_norm(0.01, 5.0), scale(1e-3, 1e3);
    for (int trial = 0; trial < 50; ++trial) {
        auto g = small_params(trial);
        const double s = scale(rng);
        for_each_tensor(g, [&](const std::string&, auto& t, TensorRole) {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] *= s;
        });
        const double bound = max_norm(rng);
        clip_gradients(g, bound);
        double sq = 0.0;
        for_each_tensor(g, [&](const std::string&, const auto& t, TensorRole) {
            for (std::size_t i = 0; i < t.size(); ++i) sq += t[i] * t[i];
        });
        ASSERT_LE(std::sqrt(sq), bound + 1e-6);
    }
}

TEST(Clip, NonFiniteNormIsAnError) {
    auto g = small_params(3);
    g.head.out.b(0, 0) = std::nan("");
    EXPECT_THROW(clip_gradients(g, 1.0), TrainingDiverged);
}

// ---------------------------------------------------------------------------
// AdamW

TEST(AdamW, ZeroGradientWithoutDecayLeavesParamsUnchanged) {
    auto p = small_params(4);
    const auto before = p;
    auto state = AdamState<ProbeParams<double>>::fresh(p);
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    adamw_step(p, zeros_like(p), state, 3e-4, cfg);
    const auto a = flatten(p);
    const auto b = flatten(before);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(*a[k].tensor, *b[k].tensor) << a[k].name;
}

TEST(AdamW, ZeroGradientGivesExactDecoupledDecayOnWeights) {
    auto p = small_params(5);
    const auto before = p;
    auto state = AdamState<ProbeParams<double>>::fresh(p);
    const TrainConfig cfg;  // weight_decay 0.05
    adamw_step(p, zeros_like(p), state, 3e-4, cfg);
    const double factor = 1.0 - 1.5e-5;
    const auto a = flatten(p);
    const auto b = flatten(before);
    for (std::size_t k = 0; k < a.size(); ++k)
        for (std::size_t i = 0; i < a[k].tensor->size(); ++i) {
            const double expected = a[k].role == TensorRole::Weight ? (*b[k].tensor)[i] * factor : (*b[k].tensor)[i];
            ASSERT_EQ((*a[k].tensor)[i], expected) << a[k].name;
        }
}

TEST(AdamW, DecayIsIndependentOfMomentState) {
    // With nonzero moments a zero gradient still moves the weights; the decay
    // is the exact difference between runs with and without weight decay.
    auto p = small_params(6);
    auto state = AdamState<ProbeParams<double>>::fresh(p);
    TrainConfig cfg;
    for (int i = 0; i < 3; ++i) adamw_step(p, small_params(100 + i), state, 1e-3, cfg);
    auto with_wd = p, without_wd = p;
    auto s1 = state, s2 = state;
    TrainConfig no_wd = cfg;
    no_wd.weight_decay = 0.0;
    adamw_step(with_wd, zeros_like(p), s1, 1e-3, cfg);
    adamw_step(without_wd, zeros_like(p), s2, 1e-3, no_wd);
    const auto a = flatten(with_wd), b = flatten(without_wd), orig = flatten(p);
    for (std::size_t k = 0; k < a.size(); ++k)
        for (std::size_t i = 0; i < a[k].tensor->size(); ++i) {
            const double decay = a[k].role == TensorRole::Weight ? 1e-3 * 0.05 * (*orig[k].tensor)[i] : 0.0;
            ASSERT_NEAR((*b[k].tensor)[i] - (*a[k].tensor)[i], decay, 1e-15) << a[k].name;
        }
    EXPECT_EQ(*s1.m.proj.w.data(), *s2.m.proj.w.data());
}

TEST(AdamW, FirstStepWithUnitGradientMovesByTheLearningRate) {
    auto p = small_params(7);
    const auto before = p;
    auto g = zeros_like(p);
    g.head.out.b(0, 0) = 1.0;
    auto state = AdamState<ProbeParams<double>>::fresh(p);
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    adamw_step(p, g, state, 1e-3, cfg);
    EXPECT_NEAR(p.head.out.b(0, 0) - before.head.out.b(0, 0), -1e-3, 1e-10);
    EXPECT_EQ(p.head.out.b(0, 1), before.head.out.b(0, 1));
    EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, HandComputedSecondStep) {
    auto p = small_params(8);
    p.proj.w(0, 0) = 0.5;
    auto g = zeros_like(p);
    auto state = AdamState<ProbeParams<double>>::fresh(p);
    TrainConfig cfg;
    double x = 0.5, m = 0.0, v = 0.0;
    const double grads[2] = {0.2, -0.4};
    for (int t = 1; t <= 2; ++t) {
        g.proj.w(0, 0) = grads[t - 1];
        adamw_step(p, g, state, 1e-2, cfg);
        x *= 1.0 - 1e-2 * 0.05;
        m = 0.9 * m + 0.1 * grads[t - 1];
        v = 0.999 * v + 0.001 * grads[t - 1] * grads[t - 1];
        x -= 1e-2 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    }
    EXPECT_NEAR(p.proj.w(0, 0), x, 1e-15);
}

// ---------------------------------------------------------------------------
// Training driver

TEST(Train, SameSeedGivesIdenticalLosses) {
    const auto data = small_task(1);
    const int saved = kernels::max_threads();
    kernels::set_num_threads(1);
    const auto a = train(Variant::CrossAttention, data, small_model(), small_train(), 5);
    const auto b = train(Variant::CrossAttention, data, small_model(), small_train(), 5);
    kernels::set_num_threads(3);
    const auto c = train(Variant::CrossAttention, data, small_model(), small_train(), 5);
    kernels::set_num_threads(saved);
    EXPECT_EQ(a.step_losses, b.step_losses);
    EXPECT_EQ(a.step_losses, c.step_losses);
    EXPECT_EQ(a.best_val_map, b.best_val_map);
    const auto d = train(Variant::CrossAttention, data, small_model(), small_train(), 6);
    EXPECT_NE(a.step_losses, d.step_losses);
}

TEST(Train, PartialFinalBatchIsKept) {
    const auto data = small_task(2);
    const auto train_n = data.split(Split::Train).size();
    const auto r = train(Variant::VisualProbe, data, small_model(), small_train(2), 0);
    EXPECT_EQ(r.step_losses.size(), 2 * ((train_n + 6) / 7));
    EXPECT_NE(train_n % 7, 0u);
}

TEST(Train, LogAndCheckpointTrackTheBestValidationMap) {
    ScratchDir dir("train");
    const auto data = small_task(3, Modality::Skeleton);
    auto cfg = small_train(6);
    cfg.eval_train = true;
    const auto r = train(Variant::CrossAttention, data, small_model(), cfg, 0, {dir.path(), {}});
    const auto log = read_log(dir / "train_log.jsonl");
    double max_map = -1.0, prev_best = -1.0;
    std::size_t steps = 0, epochs = 0;
    for (const auto& rec : log) {
        if (rec["type"] == "step") {
            ++steps;
            EXPECT_TRUE(rec.contains("lr") && rec.contains("loss") && rec.contains("grad_norm"));
        }
        if (rec["type"] != "epoch") continue;
        ++epochs;
        max_map = std::max(max_map, rec["val"]["macro_map"].get<double>());
        const double best = rec["best_val_map"].get<double>();
        EXPECT_GE(best, prev_best);
        prev_best = best;
        EXPECT_GE(rec["train_top1"].get<double>(), 0.0);
    }
    EXPECT_EQ(epochs, 6u);
    EXPECT_EQ(steps, r.step_losses.size());
    const auto ckpt = read_checkpoint(dir / "checkpoint.bin");
    EXPECT_EQ(ckpt.meta["best_val_map"].get<double>(), max_map);
    EXPECT_EQ(r.best_val_map, max_map);
    EXPECT_EQ(ckpt.meta["epoch"].get<std::size_t>(), r.best_epoch);
    EXPECT_NE(ckpt.find("adam.m.proj_v.w"), nullptr);
    EXPECT_NE(ckpt.find("adam.v.layers.0.cross_s.attn.q.w"), nullptr);
}

TEST(Train, BestModelReproducesItsValidationMetrics) {
    const auto data = small_task(4);
    const auto cfg = small_train(3);
    const auto r = train(Variant::EarlyFusion, data, small_model(), cfg, 1);
    const auto again = evaluate_model(r.best, data.split(Split::Val), cfg.tsn, 64, true);
    EXPECT_EQ(again.metrics, r.best_val_metrics);
}

TEST(Train, LateFusionTrainsTwoProbes) {
    ScratchDir dir("late");
    const auto data = small_task(5);
    const auto r = train(Variant::LateFusion, data, small_model(), small_train(2), 0, {dir.path(), {}});
    EXPECT_EQ(r.best.variant, Variant::LateFusion);
    EXPECT_FALSE(r.best.visual_probe.layers.empty());
    EXPECT_FALSE(r.best.skeleton_probe.layers.empty());
    std::size_t visual = 0, skeleton = 0;
    for (const auto& rec : read_log(dir / "train_log.jsonl")) {
        visual += rec.value("component", "") == "visual_probe";
        skeleton += rec.value("component", "") == "skeleton_probe";
    }
    EXPECT_GT(visual, 0u);
    EXPECT_GT(skeleton, 0u);
    const auto model = load_model(read_checkpoint(dir / "checkpoint.bin"));
    EXPECT_EQ(evaluate_model(model, data.split(Split::Val), small_train().tsn, 64, true).metrics, r.best_val_metrics);
}

TEST(Train, EmptySplitIsAnError) {
    auto data = small_task(6);
    for (auto& c : data.clips) c.split = Split::Train;
    EXPECT_THROW(train(Variant::CrossAttention, data, small_model(), small_train(1), 0), std::invalid_argument);
}

TEST(Train, NonFiniteActivationsAbortAndKeepTheLastCheckpoint) {
    ScratchDir dir("diverge");
    auto data = small_task(7);
    train(Variant::CrossAttention, data, small_model(), small_train(1), 0, {dir.path(), {}});
    const auto saved = testing_support::read_bytes(dir / "checkpoint.bin");
    for (auto& c : data.clips)
        if (c.split == Split::Train) c.visual.fill(std::numeric_limits<float>::infinity());
    EXPECT_THROW(train(Variant::CrossAttention, data, small_model(), small_train(1), 0, {dir.path(), {}}),
                 TrainingDiverged);
    EXPECT_EQ(testing_support::read_bytes(dir / "checkpoint.bin"), saved);
    bool logged = false;
    for (const auto& rec : read_log(dir / "train_log.jsonl")) logged = logged || rec["type"] == "diverged";
    EXPECT_TRUE(logged);
}

TEST(TrainConfigValidation, RejectsOutOfRangeFields) {
    TrainConfig c;
    c.warmup_fraction = 1.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.clip_max_norm = 0.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_NO_THROW(TrainConfig{}.validate());
}
