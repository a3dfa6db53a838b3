#pragma once

// Synthetic datasets with a known source of label information.
//
// Visual signal: a class-dependent direction in a random low-dimensional
// subspace, added to every frame, plus i.i.d. Gaussian noise.
// Skeleton signal: one limb joint oscillates around a neutral pose; the class
// (or bit) sets the period (or phase). Each clip also gets a random global
// translation, which root-relative normalisation removes.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "crossfuse/dataset.hpp"
#include "crossfuse/feature_io.hpp"

namespace crossfuse {

struct SynthOptions {
    std::size_t n_clips = 64;
    std::size_t t_clip = 32;
    std::size_t num_classes = 2;
    std::uint64_t seed = 0;
    /// Visual row width. Only kVisualDim can be written to feature files.
    std::size_t visual_dim = kVisualDim;
    double val_fraction = 0.2;

    std::size_t subspace_dim = 8;
    double visual_signal = 2.0;     // norm of the class direction
    double visual_noise = 1.0;      // per-coordinate noise std
    double joint_amplitude = 0.30;  // metres
    double joint_noise = 0.01;      // metres, per coordinate
    double translation_range = 1.0; // metres, per axis

    void validate() const;
};

/// Joint that carries the skeleton signal (a wrist in the SMPL ordering).
inline constexpr std::size_t kSignalJoint = 21;

/// Oscillation period, in frames, of class c in the skeleton task: 8 (c + 1).
inline constexpr std::size_t skeleton_period(std::size_t c) { return 8 * (c + 1); }

/// Label information only in `modality`; the other stream is noise. Labels
/// are assigned round-robin, the 80/20 Train/Val split is stratified.
ClipSet gen_unimodal_task(Modality modality, const SynthOptions& opt);

struct XorTask {
    ClipSet data;
    std::vector<int> bit_v;
    std::vector<int> bit_s;
};

/// Two classes. bit_v sets the sign of the visual direction, bit_s the phase
/// (0 or pi) of a joint oscillation whose period equals t_clip; the label is
/// bit_v XOR bit_s. num_classes in `opt` is ignored.
XorTask gen_xor_task(const SynthOptions& opt);

enum class OcclusionTarget { Visual, Skeleton, Both };

/// Each frame of the targeted stream is dropped independently with
/// probability drop_rate: skeleton frames become all-zero joints, visual rows
/// become the dataset-wide mean visual row. Labels and splits are unchanged.
ClipSet gen_occlusion_variant(const ClipSet& data, double drop_rate, std::uint64_t seed,
                              OcclusionTarget target = OcclusionTarget::Both);

/// File-level variant: reads the manifest's clips, writes the occluded set to out_dir.
DatasetManifest gen_occlusion_variant(const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                                      double drop_rate, std::uint64_t seed,
                                      OcclusionTarget target = OcclusionTarget::Both);

}  // namespace crossfuse
