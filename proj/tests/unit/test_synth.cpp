#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "crossfuse/dataset.hpp"
#include "crossfuse/preprocess.hpp"
#include "crossfuse/synth_fixtures.hpp"
#include "support/fixtures.hpp"

using namespace crossfuse;
using testing_support::ScratchDir;

namespace {

SynthOptions small(std::uint64_t seed, std::size_t n = 40, std::size_t classes = 2) {
    SynthOptions o;
    o.seed = seed;
    o.n_clips = n;
    o.num_classes = classes;
    o.t_clip = 32;
    return o;
}

bool same(const ClipSet& a, const ClipSet& b) {
    if (a.clips.size() != b.clips.size() || a.class_names != b.class_names) return false;
    for (std::size_t i = 0; i < a.clips.size(); ++i) {
        const auto& x = a.clips[i];
        const auto& y = b.clips[i];
        if (x.clip_id != y.clip_id || x.label_id != y.label_id || x.split != y.split || x.visual != y.visual ||
            x.skeleton != y.skeleton)
            return false;
    }
    return true;
}

/// Frequency bin (1..t/2) with the largest DFT magnitude of the mean-removed signal.
std::size_t spectral_peak(const std::vector<double>& x) {
    const std::size_t n = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    std::size_t best = 1;
    double best_mag = -1.0;
    for (std::size_t k = 1; k <= n / 2; ++k) {
        std::complex<double> acc;
        for (std::size_t t = 0; t < n; ++t)
            acc += (x[t] - mean) * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * t) / static_cast<double>(n));
        if (std::abs(acc) > best_mag) best_mag = std::abs(acc), best = k;
    }
    return best;
}

std::vector<double> signal_joint_y(const RawClip& c) {
    std::vector<double> y;
    for (std::size_t t = 0; t < c.skeleton.rows(); ++t) y.push_back(c.skeleton(t, 3 * kSignalJoint + 1));
    return y;
}

}  // namespace

TEST(Synth, SameSeedGivesIdenticalData) {
    EXPECT_TRUE(same(gen_unimodal_task(Modality::Visual, small(3)), gen_unimodal_task(Modality::Visual, small(3))));
    EXPECT_FALSE(same(gen_unimodal_task(Modality::Visual, small(3)), gen_unimodal_task(Modality::Visual, small(4))));
    EXPECT_TRUE(same(gen_xor_task(small(5)).data, gen_xor_task(small(5)).data));
}

TEST(Synth, WrittenFilesAreByteIdenticalAcrossRuns) {
    ScratchDir a("synth"), b("synth");
    write_clip_set(gen_unimodal_task(Modality::Skeleton, small(6, 10)), a.path());
    write_clip_set(gen_unimodal_task(Modality::Skeleton, small(6, 10)), b.path());
    for (const auto& e : std::filesystem::recursive_directory_iterator(a.path())) {
        if (!e.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(e.path(), a.path());
        EXPECT_EQ(testing_support::read_bytes(e.path()), testing_support::read_bytes(b.path() / rel)) << rel;
    }
}

TEST(Synth, OutputPassesFeatureFileValidation) {
    ScratchDir dir("synth");
    const auto set = gen_xor_task(small(7, 12)).data;
    write_clip_set(set, dir.path());
    const auto m = load_manifest(dir / "manifest.jsonl", true);
    EXPECT_EQ(m.records.size(), 12u);
    EXPECT_TRUE(same(load_clip_set(m), set));
}

TEST(Synth, LabelsAreBalancedAndSplitIsStratified) {
    for (std::size_t classes : {2u, 3u, 5u}) {
        const auto set = gen_unimodal_task(Modality::Visual, small(8, 53, classes));
        std::vector<int> count(classes), val(classes);
        for (const auto& c : set.clips) {
            ++count[static_cast<std::size_t>(c.label_id)];
            val[static_cast<std::size_t>(c.label_id)] += c.split == Split::Val;
        }
        const auto [lo, hi] = std::minmax_element(count.begin(), count.end());
        EXPECT_LE(*hi - *lo, 1);
        for (std::size_t c = 0; c < classes; ++c)
            EXPECT_EQ(val[c], static_cast<int>(std::llround(0.2 * count[c])));
    }
}

TEST(Synth, SkeletonClassesOscillateWithPeriodsEightAndSixteen) {
    auto o = small(9, 20);
    o.joint_noise = 0.0;
    const auto set = gen_unimodal_task(Modality::Skeleton, o);
    for (const auto& c : set.clips) {
        const std::size_t period = skeleton_period(static_cast<std::size_t>(c.label_id));
        EXPECT_EQ(period, c.label_id == 0 ? 8u : 16u);
        EXPECT_EQ(spectral_peak(signal_joint_y(c)), o.t_clip / period) << c.clip_id;
    }
}

TEST(Synth, VisualTaskSkeletonCarriesNoOscillation) {
    auto o = small(10, 10);
    o.joint_noise = 0.0;
    const auto set = gen_unimodal_task(Modality::Visual, o);
    for (const auto& c : set.clips)
        for (std::size_t t = 1; t < c.skeleton.rows(); ++t) EXPECT_EQ(c.skeleton.row(t)[3 * kSignalJoint + 1], c.skeleton(0, 3 * kSignalJoint + 1));
}

TEST(Synth, ClipTranslationDisappearsAfterNormalisation) {
    auto o = small(11, 6);
    o.joint_noise = 0.0;
    o.translation_range = 0.0;
    const auto still = gen_unimodal_task(Modality::Visual, o);
    o.translation_range = 3.0;
    const auto moved = gen_unimodal_task(Modality::Visual, o);
    for (std::size_t i = 0; i < still.clips.size(); ++i) {
        EXPECT_NE(still.clips[i].skeleton, moved.clips[i].skeleton);
        const auto a = normalize_skeleton(still.clips[i].skeleton);
        const auto b = normalize_skeleton(moved.clips[i].skeleton);
        for (std::size_t k = 0; k < a.size(); ++k) ASSERT_NEAR(a[k], b[k], 1e-5);
    }
}

TEST(Xor, LabelIsTheXorOfTheBits) {
    const auto task = gen_xor_task(small(12, 200));
    ASSERT_EQ(task.bit_v.size(), 200u);
    for (std::size_t i = 0; i < 200; ++i) EXPECT_EQ(task.data.clips[i].label_id, task.bit_v[i] ^ task.bit_s[i]);
}

TEST(Xor, BitCombinationsAreBalancedAndCarryNoLabelInformation) {
    const std::size_t n = 2000;
    const auto task = gen_xor_task(small(13, n));
    double joint_v[2][2] = {}, joint_s[2][2] = {};
    std::size_t combos[4] = {};
    for (std::size_t i = 0; i < n; ++i) {
        const int y = task.data.clips[i].label_id;
        ++joint_v[task.bit_v[i]][y];
        ++joint_s[task.bit_s[i]][y];
        ++combos[2 * task.bit_v[i] + task.bit_s[i]];
    }
    // Each combination ~ Binomial(n, 1/4): allow 5 standard deviations.
    const double sd = std::sqrt(n * 0.25 * 0.75);
    for (auto c : combos) EXPECT_NEAR(static_cast<double>(c), n / 4.0, 5 * sd);

    auto mutual_information = [&](double table[2][2]) {
        double mi = 0.0;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
                const double pab = table[a][b] / n;
                const double pa = (table[a][0] + table[a][1]) / n;
                const double pb = (table[0][b] + table[1][b]) / n;
                if (pab > 0) mi += pab * std::log(pab / (pa * pb));
            }
        return mi;
    };
    // Under independence 2n*MI ~ chi^2(1); 0.01 nats is far beyond its 99.9% quantile (10.8 / 4000).
    EXPECT_LT(mutual_information(joint_v), 0.01);
    EXPECT_LT(mutual_information(joint_s), 0.01);
}

TEST(Xor, BitsAreVisibleInTheirOwnModality) {
    auto o = small(14, 40);
    o.visual_noise = 0.0;
    o.joint_noise = 0.0;
    const auto task = gen_xor_task(o);
    // Visual rows are +-direction; the first two clips with different bit_v are negatives of each other.
    std::size_t i = 0, j = 1;
    while (task.bit_v[j] == task.bit_v[i]) ++j;
    for (std::size_t d = 0; d < 20; ++d) EXPECT_FLOAT_EQ(task.data.clips[i].visual(0, d), -task.data.clips[j].visual(0, d));
    // Phase 0 starts rising from the neutral pose; phase pi starts falling.
    for (std::size_t k = 0; k < 40; ++k) {
        const auto y = signal_joint_y(task.data.clips[k]);
        EXPECT_EQ(y[1] > y[0], task.bit_s[k] == 0) << k;
    }
}

TEST(Occlusion, ZeroRateReturnsTheInputUnchanged) {
    const auto set = gen_unimodal_task(Modality::Visual, small(15, 10));
    EXPECT_TRUE(same(gen_occlusion_variant(set, 0.0, 1), set));
}

TEST(Occlusion, NearOneRateZeroesNearlyAllSkeletonRows) {
    const auto set = gen_unimodal_task(Modality::Skeleton, small(16, 20));
    const auto occ = gen_occlusion_variant(set, 0.999, 2, OcclusionTarget::Skeleton);
    std::size_t zero = 0, total = 0;
    for (const auto& c : occ.clips)
        for (std::size_t t = 0; t < c.skeleton.rows(); ++t, ++total)
            zero += std::ranges::all_of(c.skeleton.row(t), [](float v) { return v == 0.0f; });
    EXPECT_GE(static_cast<double>(zero) / total, 0.99);
    EXPECT_EQ(occ.class_names, set.class_names);
    for (std::size_t i = 0; i < set.clips.size(); ++i) {
        EXPECT_EQ(occ.clips[i].label_id, set.clips[i].label_id);
        EXPECT_EQ(occ.clips[i].visual, set.clips[i].visual);
    }
}

TEST(Occlusion, DroppedVisualRowsBecomeTheDatasetMean) {
    const auto set = gen_unimodal_task(Modality::Visual, small(17, 10));
    const auto occ = gen_occlusion_variant(set, 0.5, 3, OcclusionTarget::Visual);
    std::vector<double> mean(set.visual_dim(), 0.0);
    std::size_t rows = 0;
    for (const auto& c : set.clips) {
        for (std::size_t t = 0; t < c.visual.rows(); ++t)
            for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += c.visual(t, d);
        rows += c.visual.rows();
    }
    std::size_t replaced = 0;
    for (std::size_t i = 0; i < set.clips.size(); ++i) {
        EXPECT_EQ(occ.clips[i].skeleton, set.clips[i].skeleton);
        for (std::size_t t = 0; t < set.clips[i].visual.rows(); ++t) {
            if (std::ranges::equal(occ.clips[i].visual.row(t), set.clips[i].visual.row(t))) continue;
            ++replaced;
            for (std::size_t d = 0; d < mean.size(); d += 97)
                EXPECT_FLOAT_EQ(occ.clips[i].visual(t, d), static_cast<float>(mean[d] / rows));
        }
    }
    EXPECT_GT(replaced, rows / 4);
    EXPECT_LT(replaced, 3 * rows / 4);
}

TEST(Occlusion, DeterministicInTheSeed) {
    const auto set = gen_unimodal_task(Modality::Skeleton, small(18, 10));
    EXPECT_TRUE(same(gen_occlusion_variant(set, 0.3, 9), gen_occlusion_variant(set, 0.3, 9)));
    EXPECT_FALSE(same(gen_occlusion_variant(set, 0.3, 9), gen_occlusion_variant(set, 0.3, 10)));
}

TEST(Occlusion, FileLevelVariantWritesAValidDataset) {
    ScratchDir in("occ_in"), out("occ_out");
    const auto set = gen_unimodal_task(Modality::Skeleton, small(19, 8));
    const auto m = write_clip_set(set, in.path());
    gen_occlusion_variant(load_manifest(in / "manifest.jsonl"), out.path(), 0.0, 1);
    const auto back = load_clip_set(load_manifest(out / "manifest.jsonl", true));
    EXPECT_TRUE(same(back, set));
    EXPECT_EQ(m.records.size(), 8u);
}

TEST(Synth, RejectsDegenerateOptions) {
    auto o = small(1);
    o.n_clips = 0;
    EXPECT_THROW(gen_unimodal_task(Modality::Visual, o), std::invalid_argument);
    EXPECT_THROW(gen_occlusion_variant(ClipSet{}, 1.0, 0), std::invalid_argument);
}
