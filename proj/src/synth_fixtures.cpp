#include "crossfuse/synth_fixtures.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace crossfuse {

void SynthOptions::validate() const {
    if (n_clips < 1 || t_clip < 1 || num_classes < 1 || visual_dim < 1 || subspace_dim < 1)
        throw std::invalid_argument("synth: n_clips, t_clip, num_classes, visual_dim and subspace_dim must be >= 1");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("synth: val_fraction must be in [0, 1)");
}

namespace {

using Rng = std::mt19937_64;

std::string clip_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "clip_%05zu", i);
    return buf;
}

Matrix<double> random_unit_rows(std::size_t rows, std::size_t dim, Rng& rng) {
    std::normal_distribution<double> n01;
    Matrix<double> m(rows, dim);
    for (std::size_t r = 0; r < rows; ++r) {
        double norm = 0.0;
        for (auto& v : m.row(r)) {
            v = n01(rng);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : m.row(r)) v /= norm;
    }
    return m;
}

/// direction[d] = sum_k coef[k] * basis[k][d], with coef a random unit vector.
std::vector<double> subspace_direction(const Matrix<double>& basis, Rng& rng) {
    const auto coef = random_unit_rows(1, basis.rows(), rng);
    std::vector<double> dir(basis.cols(), 0.0);
    for (std::size_t k = 0; k < basis.rows(); ++k)
        for (std::size_t d = 0; d < basis.cols(); ++d) dir[d] += coef[k] * basis(k, d);
    double norm = 0.0;
    for (double v : dir) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : dir) v /= norm;
    return dir;
}

/// Rows: mean + amplitude * direction + noise.
Matrix<float> visual_clip(std::size_t t, const std::vector<double>* direction, double amplitude, double noise,
                          std::size_t dim, Rng& rng) {
    std::normal_distribution<double> n01;
    Matrix<float> m(t, dim);
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t d = 0; d < dim; ++d) {
            const double signal = direction ? amplitude * (*direction)[d] : 0.0;
            m(r, d) = static_cast<float>(signal + noise * n01(rng));
        }
    return m;
}

/// Neutral pose, optional oscillation of kSignalJoint along y, joint noise and
/// one random translation for the whole clip.
Matrix<float> skeleton_clip(std::size_t t, const Matrix<double>& pose, double period, double phase, bool oscillate,
                            const SynthOptions& opt, Rng& rng) {
    std::normal_distribution<double> n01;
    std::uniform_real_distribution<double> shift(-opt.translation_range, opt.translation_range);
    const double offset[3] = {shift(rng), shift(rng), shift(rng)};
    Matrix<float> m(t, kSkeletonDim);
    for (std::size_t f = 0; f < t; ++f) {
        const double swing =
            oscillate ? opt.joint_amplitude *
                            std::sin(2.0 * std::numbers::pi * static_cast<double>(f) / period + phase)
                      : 0.0;
        for (std::size_t j = 0; j < kNumJoints; ++j)
            for (std::size_t c = 0; c < 3; ++c) {
                double v = pose(j, c) + offset[c] + opt.joint_noise * n01(rng);
                if (j == kSignalJoint && c == 1) v += swing;
                m(f, 3 * j + c) = static_cast<float>(v);
            }
    }
    return m;
}

Matrix<double> neutral_pose(Rng& rng) {
    std::normal_distribution<double> n(0.0, 0.3);
    Matrix<double> pose(kNumJoints, 3);
    for (std::size_t i = 0; i < pose.size(); ++i) pose[i] = n(rng);
    return pose;
}

/// Stratified by label: within each class a seeded shuffle picks round(val_fraction * n_c) Val clips.
void assign_splits(ClipSet& set, double val_fraction, Rng& rng) {
    for (int c = 0; c < set.num_classes; ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < set.clips.size(); ++i)
            if (set.clips[i].label_id == c) idx.push_back(i);
        for (std::size_t i = idx.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(idx[i - 1], idx[pick(rng)]);
        }
        const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
        for (std::size_t k = 0; k < idx.size(); ++k) set.clips[idx[k]].split = k < n_val ? Split::Val : Split::Train;
    }
}

}  // namespace

ClipSet gen_unimodal_task(Modality modality, const SynthOptions& opt) {
    opt.validate();
    Rng rng(opt.seed);
    ClipSet set;
    set.num_classes = static_cast<int>(opt.num_classes);
    for (std::size_t c = 0; c < opt.num_classes; ++c) set.class_names.push_back("class_" + std::to_string(c));

    const auto basis = random_unit_rows(opt.subspace_dim, opt.visual_dim, rng);
    std::vector<std::vector<double>> directions;
    for (std::size_t c = 0; c < opt.num_classes; ++c) directions.push_back(subspace_direction(basis, rng));
    const auto pose = neutral_pose(rng);

    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < opt.n_clips; ++i) {
        const auto label = i % opt.num_classes;
        RawClip clip;
        clip.clip_id = clip_name(i);
        clip.label_id = static_cast<int>(label);
        const bool visual_signal = modality == Modality::Visual;
        clip.visual = visual_clip(opt.t_clip, visual_signal ? &directions[label] : nullptr, opt.visual_signal,
                                  opt.visual_noise, opt.visual_dim, rng);
        const double period = static_cast<double>(skeleton_period(label));
        clip.skeleton = skeleton_clip(opt.t_clip, pose, period, phase(rng), !visual_signal, opt, rng);
        set.clips.push_back(std::move(clip));
    }
    assign_splits(set, opt.val_fraction, rng);
    return set;
}

XorTask gen_xor_task(const SynthOptions& opt_in) {
    SynthOptions opt = opt_in;
    opt.num_classes = 2;
    opt.validate();
    Rng rng(opt.seed);
    XorTask task;
    task.data.num_classes = 2;
    task.data.class_names = {"xor_0", "xor_1"};

    const auto basis = random_unit_rows(opt.subspace_dim, opt.visual_dim, rng);
    const auto direction = subspace_direction(basis, rng);
    std::vector<double> negated(direction);
    for (double& v : negated) v = -v;
    const auto pose = neutral_pose(rng);

    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < opt.n_clips; ++i) {
        const int bv = coin(rng) ? 1 : 0;
        const int bs = coin(rng) ? 1 : 0;
        RawClip clip;
        clip.clip_id = clip_name(i);
        clip.label_id = bv ^ bs;
        clip.visual = visual_clip(opt.t_clip, bv ? &direction : &negated, opt.visual_signal, opt.visual_noise,
                                  opt.visual_dim, rng);
        clip.skeleton = skeleton_clip(opt.t_clip, pose, static_cast<double>(opt.t_clip), bs ? std::numbers::pi : 0.0,
                                      true, opt, rng);
        task.bit_v.push_back(bv);
        task.bit_s.push_back(bs);
        task.data.clips.push_back(std::move(clip));
    }
    assign_splits(task.data, opt.val_fraction, rng);
    return task;
}

ClipSet gen_occlusion_variant(const ClipSet& data, double drop_rate, std::uint64_t seed, OcclusionTarget target) {
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw std::invalid_argument("occlusion: drop_rate must be in [0, 1)");
    ClipSet out = data;
    const bool visual = target != OcclusionTarget::Skeleton;
    const bool skeleton = target != OcclusionTarget::Visual;

    std::vector<double> mean_row(data.visual_dim(), 0.0);
    std::size_t rows = 0;
    if (visual) {
        for (const auto& c : data.clips) {
            for (std::size_t r = 0; r < c.visual.rows(); ++r)
                for (std::size_t d = 0; d < mean_row.size(); ++d) mean_row[d] += c.visual(r, d);
            rows += c.visual.rows();
        }
        for (double& v : mean_row) v /= static_cast<double>(std::max<std::size_t>(rows, 1));
    }

    Rng rng(seed);
    std::bernoulli_distribution drop(drop_rate);
    for (auto& c : out.clips) {
        if (visual)
            for (std::size_t r = 0; r < c.visual.rows(); ++r)
                if (drop(rng))
                    for (std::size_t d = 0; d < mean_row.size(); ++d) c.visual(r, d) = static_cast<float>(mean_row[d]);
        if (skeleton)
            for (std::size_t r = 0; r < c.skeleton.rows(); ++r)
                if (drop(rng)) std::ranges::fill(c.skeleton.row(r), 0.0f);
    }
    return out;
}

DatasetManifest gen_occlusion_variant(const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                                      double drop_rate, std::uint64_t seed, OcclusionTarget target) {
    return write_clip_set(gen_occlusion_variant(load_clip_set(manifest), drop_rate, seed, target), out_dir);
}

}  // namespace crossfuse
