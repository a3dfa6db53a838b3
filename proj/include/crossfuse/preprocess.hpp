#pragma once

#include <cstdint>
#include <vector>

#include "crossfuse/feature_io.hpp"
#include "crossfuse/matrix.hpp"

namespace crossfuse {

/// Temporal segment sampling plan: n_segments equal-duration segments,
/// frames_per_segment indices from each.
struct TsnPlan {
    enum class Mode { Deterministic, Random };

    std::size_t n_segments = 8;
    std::size_t frames_per_segment = 8;
    Mode mode = Mode::Deterministic;

    std::size_t length() const noexcept { return n_segments * frames_per_segment; }
    void validate() const;
};

/// Frame indices (length plan.length(), non-decreasing, each in [0, t_clip)).
///
/// Segment s covers [floor(s*t/N), floor((s+1)*t/N)); an empty segment falls
/// back to its start frame. Deterministic mode takes floor((j+0.5)*len/k)
/// within each segment. Random mode draws a uniform k-subset of the segment
/// (sorted); segments shorter than k are sampled with replacement.
std::vector<std::size_t> tsn_sample(std::size_t t_clip, const TsnPlan& plan, std::uint64_t rng_seed);

/// Root-relative joints: [T, 72] (24 joints x xyz) -> [T, 72] with joint 0 at the origin.
Matrix<float> normalize_skeleton(const Matrix<float>& joints);

struct AlignedClip {
    Matrix<float> visual;         // [T, d_v]
    Matrix<float> skeleton_flat;  // [T, 72]
    int label_id = 0;
    std::vector<std::size_t> indices;
};

/// Samples one index vector and applies it to both modalities, then
/// normalises the sampled skeleton frames.
AlignedClip align_clip(const Matrix<float>& visual, const Matrix<float>& skeleton, int label_id,
                       const TsnPlan& plan, std::uint64_t rng_seed);

AlignedClip align_clip(const DatasetManifest& manifest, const ClipRecord& record, const TsnPlan& plan,
                       std::uint64_t rng_seed);

}  // namespace crossfuse
