#include "crossfuse/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace crossfuse {

void TsnPlan::validate() const {
    if (n_segments < 1 || frames_per_segment < 1)
        throw std::invalid_argument("TSN plan needs n_segments >= 1 and frames_per_segment >= 1");
}

std::vector<std::size_t> tsn_sample(std::size_t t_clip, const TsnPlan& plan, std::uint64_t rng_seed) {
    plan.validate();
    if (t_clip < 1) throw std::invalid_argument("tsn_sample: t_clip must be >= 1");
    const std::size_t n = plan.n_segments;
    const std::size_t k = plan.frames_per_segment;
    std::mt19937_64 rng(rng_seed);
    std::vector<std::size_t> out;
    out.reserve(n * k);
    for (std::size_t s = 0; s < n; ++s) {
        const std::size_t start = std::min(s * t_clip / n, t_clip - 1);
        const std::size_t end = std::max((s + 1) * t_clip / n, start + 1);
        const std::size_t len = end - start;
        if (plan.mode == TsnPlan::Mode::Deterministic) {
            for (std::size_t j = 0; j < k; ++j) out.push_back(start + std::min((2 * j + 1) * len / (2 * k), len - 1));
        } else {
            std::vector<std::size_t> draws;
            if (len >= k) {
                // Uniform k-subset of the segment (selection sampling).
                std::size_t needed = k;
                for (std::size_t f = start; f < end && needed > 0; ++f) {
                    std::uniform_int_distribution<std::size_t> pick(0, end - f - 1);
                    if (pick(rng) < needed) {
                        draws.push_back(f);
                        --needed;
                    }
                }
            } else {
                std::uniform_int_distribution<std::size_t> pick(start, end - 1);
                for (std::size_t j = 0; j < k; ++j) draws.push_back(pick(rng));
                std::sort(draws.begin(), draws.end());
            }
            out.insert(out.end(), draws.begin(), draws.end());
        }
    }
    return out;
}

Matrix<float> normalize_skeleton(const Matrix<float>& joints) {
    if (joints.cols() != kSkeletonDim)
        throw std::invalid_argument("normalize_skeleton: expected " + std::to_string(kSkeletonDim) +
                                    " columns, got " + std::to_string(joints.cols()));
    Matrix<float> out(joints.rows(), joints.cols());
    for (std::size_t t = 0; t < joints.rows(); ++t) {
        const auto in = joints.row(t);
        for (float v : in)
            if (!std::isfinite(v))
                throw std::invalid_argument("normalize_skeleton: non-finite joint at frame " + std::to_string(t));
        auto row = out.row(t);
        for (std::size_t j = 0; j < kNumJoints; ++j)
            for (std::size_t c = 0; c < 3; ++c) row[3 * j + c] = in[3 * j + c] - in[c];
    }
    return out;
}

AlignedClip align_clip(const Matrix<float>& visual, const Matrix<float>& skeleton, int label_id,
                       const TsnPlan& plan, std::uint64_t rng_seed) {
    if (visual.rows() != skeleton.rows())
        throw std::invalid_argument("align_clip: modality length mismatch (visual " + std::to_string(visual.rows()) +
                                    " frames, skeleton " + std::to_string(skeleton.rows()) + " frames)");
    AlignedClip clip;
    clip.label_id = label_id;
    clip.indices = tsn_sample(visual.rows(), plan, rng_seed);
    const std::size_t t = clip.indices.size();
    clip.visual = Matrix<float>(t, visual.cols());
    Matrix<float> sampled(t, skeleton.cols());
    for (std::size_t i = 0; i < t; ++i) {
        std::ranges::copy(visual.row(clip.indices[i]), clip.visual.row(i).begin());
        std::ranges::copy(skeleton.row(clip.indices[i]), sampled.row(i).begin());
    }
    clip.skeleton_flat = normalize_skeleton(sampled);
    return clip;
}

AlignedClip align_clip(const DatasetManifest& manifest, const ClipRecord& record, const TsnPlan& plan,
                       std::uint64_t rng_seed) {
    const auto visual = read_sequence(manifest.resolve(record.visual_path));
    const auto skeleton = read_sequence(manifest.resolve(record.skeleton_path));
    if (visual.modality != Modality::Visual || skeleton.modality != Modality::Skeleton)
        throw FeatureIoError(FeatureIoError::Kind::BadModality,
                             "clip '" + record.clip_id + "': visual/skeleton files have swapped modalities");
    return align_clip(visual.data, skeleton.data, record.label_id, plan, rng_seed);
}

}  // namespace crossfuse
