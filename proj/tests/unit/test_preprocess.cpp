#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "crossfuse/preprocess.hpp"
#include "support/fixtures.hpp"

using namespace crossfuse;

namespace {

TsnPlan plan(std::size_t n, std::size_t k, TsnPlan::Mode mode = TsnPlan::Mode::Deterministic) {
    TsnPlan p;
    p.n_segments = n;
    p.frames_per_segment = k;
    p.mode = mode;
    return p;
}

Matrix<float> random_joints(std::size_t t, std::mt19937_64& rng) {
    return testing_support::random_matrix<float>(t, kSkeletonDim, rng);
}

}  // namespace

TEST(Tsn, SixtyFourFramesGiveTheIdentity) {
    const auto idx = tsn_sample(64, plan(8, 8), 0);
    std::vector<std::size_t> expected(64);
    for (std::size_t i = 0; i < 64; ++i) expected[i] = i;
    EXPECT_EQ(idx, expected);
}

TEST(Tsn, EightFramesAreEachRepeatedEightTimes) {
    const auto idx = tsn_sample(8, plan(8, 8), 0);
    ASSERT_EQ(idx.size(), 64u);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(idx[i], i / 8);
}

TEST(Tsn, LongClipUsesOddOffsetsInEachSegment) {
    const auto idx = tsn_sample(128, plan(8, 8), 0);
    ASSERT_EQ(idx.size(), 64u);
    for (std::size_t s = 0; s < 8; ++s)
        for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(idx[8 * s + j], 16 * s + 2 * j + 1);
}

TEST(Tsn, ZeroLengthClipIsAnError) {
    EXPECT_THROW(tsn_sample(0, plan(8, 8), 0), std::invalid_argument);
}

TEST(Tsn, ShortClipsFallBackToSegmentStart) {
    // t=3, N=8: segment s covers [floor(3s/8), floor(3(s+1)/8)).
    const auto idx = tsn_sample(3, plan(8, 2), 0);
    ASSERT_EQ(idx.size(), 16u);
    for (std::size_t s = 0; s < 8; ++s)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(idx[2 * s + j], 3 * s / 8) << s;
}

TEST(Tsn, PropertiesHoldOverRandomPlans) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> len(1, 300), seg(1, 10), per(1, 10);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t t = len(rng);
        const auto mode = trial % 2 ? TsnPlan::Mode::Random : TsnPlan::Mode::Deterministic;
        const auto p = plan(seg(rng), per(rng), mode);
        const auto seed = rng();
        const auto idx = tsn_sample(t, p, seed);
        ASSERT_EQ(idx.size(), p.length());
        ASSERT_TRUE(std::is_sorted(idx.begin(), idx.end()));
        ASSERT_LT(idx.back(), t);
        ASSERT_EQ(idx, tsn_sample(t, p, seed));
        // Coverage: the k picks of segment s stay inside its range (or its fallback frame).
        for (std::size_t s = 0; s < p.n_segments; ++s) {
            const std::size_t lo = s * t / p.n_segments;
            const std::size_t hi = std::max((s + 1) * t / p.n_segments, lo + 1);
            for (std::size_t j = 0; j < p.frames_per_segment; ++j) {
                const auto v = idx[s * p.frames_per_segment + j];
                ASSERT_GE(v, lo);
                ASSERT_LT(v, hi);
            }
        }
    }
}

TEST(Tsn, RandomModeDrawsDistinctFramesWhenTheSegmentIsLongEnough) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto idx = tsn_sample(40, plan(4, 4, TsnPlan::Mode::Random), seed);
        EXPECT_EQ(std::adjacent_find(idx.begin(), idx.end()), idx.end());
    }
}

TEST(Tsn, RandomModeVariesWithTheSeed) {
    const auto p = plan(4, 4, TsnPlan::Mode::Random);
    bool differs = false;
    for (std::uint64_t seed = 1; seed < 10 && !differs; ++seed) differs = tsn_sample(64, p, 0) != tsn_sample(64, p, seed);
    EXPECT_TRUE(differs);
}

TEST(Skeleton, CoincidentJointsGiveAZeroRow) {
    Matrix<float> j(1, kSkeletonDim);
    for (std::size_t i = 0; i < kNumJoints; ++i) {
        j(0, 3 * i) = 0.5f;
        j(0, 3 * i + 1) = -1.25f;
        j(0, 3 * i + 2) = 2.0f;
    }
    const auto out = normalize_skeleton(j);
    for (float v : out.row(0)) EXPECT_EQ(v, 0.0f);
}

TEST(Skeleton, SingleOffsetJoint) {
    Matrix<float> j(1, kSkeletonDim);
    for (std::size_t i = 0; i < kNumJoints; ++i) {
        j(0, 3 * i) = 1.0f;
        j(0, 3 * i + 1) = 2.0f;
        j(0, 3 * i + 2) = 3.0f;
    }
    j(0, 5) = 4.0f;
    const auto out = normalize_skeleton(j);
    for (std::size_t c = 0; c < kSkeletonDim; ++c) EXPECT_EQ(out(0, c), c == 5 ? 1.0f : 0.0f) << c;
}

TEST(Skeleton, RootColumnsAreZeroOnRandomInput) {
    std::mt19937_64 rng(2);
    const auto out = normalize_skeleton(random_joints(20, rng));
    for (std::size_t t = 0; t < out.rows(); ++t)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out(t, c), 0.0f);
}

TEST(Skeleton, NonFiniteInputIsRejected) {
    Matrix<float> j(2, kSkeletonDim);
    j(1, 40) = std::numeric_limits<float>::infinity();
    EXPECT_THROW(normalize_skeleton(j), std::invalid_argument);
}

TEST(AlignClip, IdentityPlanKeepsVisualRowsInOrder) {
    std::mt19937_64 rng(3);
    const auto visual = testing_support::random_matrix<float>(64, 7, rng);
    const auto clip = align_clip(visual, random_joints(64, rng), 2, plan(8, 8), 0);
    EXPECT_EQ(clip.visual, visual);
    EXPECT_EQ(clip.label_id, 2);
    EXPECT_EQ(clip.indices.front(), 0u);
    EXPECT_EQ(clip.indices.back(), 63u);
}

TEST(AlignClip, LengthMismatchNamesBothLengths) {
    std::mt19937_64 rng(3);
    try {
        align_clip(Matrix<float>(100, 4), random_joints(90, rng), 0, plan(8, 8), 0);
        FAIL();
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("100"), std::string::npos);
        EXPECT_NE(msg.find("90"), std::string::npos);
    }
}

TEST(AlignClip, BothModalitiesShareOneIndexVector) {
    // Encode the original frame number into both streams and read it back.
    std::mt19937_64 rng(9);
    const std::size_t t = 37;
    Matrix<float> visual(t, 2), joints(t, kSkeletonDim);
    for (std::size_t f = 0; f < t; ++f) {
        visual(f, 0) = static_cast<float>(f);
        joints(f, 3) = static_cast<float>(f);  // joint 1, x; root stays at 0
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto clip = align_clip(visual, joints, 0, plan(4, 3, TsnPlan::Mode::Random), seed);
        for (std::size_t i = 0; i < clip.indices.size(); ++i) {
            EXPECT_EQ(clip.visual(i, 0), static_cast<float>(clip.indices[i]));
            EXPECT_EQ(clip.skeleton_flat(i, 3), static_cast<float>(clip.indices[i]));
        }
    }
}

TEST(AlignClip, RandomModeIsDeterministicInTheSeed) {
    std::mt19937_64 rng(4);
    const auto visual = testing_support::random_matrix<float>(50, 5, rng);
    const auto joints = random_joints(50, rng);
    const auto a = align_clip(visual, joints, 1, plan(8, 8, TsnPlan::Mode::Random), 77);
    const auto b = align_clip(visual, joints, 1, plan(8, 8, TsnPlan::Mode::Random), 77);
    EXPECT_EQ(a.indices, b.indices);
    EXPECT_EQ(a.visual, b.visual);
    EXPECT_EQ(a.skeleton_flat, b.skeleton_flat);
}
