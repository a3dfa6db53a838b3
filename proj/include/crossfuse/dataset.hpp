#pragma once

// In-memory clip collection: raw (unsampled) visual and skeleton frames per
// clip, as read from or written to a manifest directory.

#include <filesystem>
#include <string>
#include <vector>

#include "crossfuse/feature_io.hpp"
#include "crossfuse/matrix.hpp"
#include "crossfuse/preprocess.hpp"

namespace crossfuse {

struct RawClip {
    std::string clip_id;
    int label_id = 0;
    Split split = Split::Train;
    Matrix<float> visual;    // [t_clip, d_v]
    Matrix<float> skeleton;  // [t_clip, 72], raw joints
};

struct ClipSet {
    int num_classes = 0;
    std::vector<std::string> class_names;
    std::vector<RawClip> clips;

    std::vector<const RawClip*> split(Split s) const;
    /// Visual feature width (0 when empty).
    std::size_t visual_dim() const noexcept { return clips.empty() ? 0 : clips.front().visual.cols(); }
};

/// Reads every referenced feature file.
ClipSet load_clip_set(const DatasetManifest& manifest);

/// Writes one visual and one skeleton file per clip under dir/features and the
/// manifest at dir/manifest.jsonl (paths stored relative to dir). Returns the
/// manifest as written.
DatasetManifest write_clip_set(const ClipSet& set, const std::filesystem::path& dir);

AlignedClip align_clip(const RawClip& clip, const TsnPlan& plan, std::uint64_t rng_seed);

}  // namespace crossfuse
