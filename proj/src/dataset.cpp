#include "crossfuse/dataset.hpp"

namespace crossfuse {

std::vector<const RawClip*> ClipSet::split(Split s) const {
    std::vector<const RawClip*> out;
    for (const auto& c : clips)
        if (c.split == s) out.push_back(&c);
    return out;
}

ClipSet load_clip_set(const DatasetManifest& manifest) {
    ClipSet set;
    set.num_classes = manifest.num_classes;
    set.class_names = manifest.class_names;
    set.clips.reserve(manifest.records.size());
    for (const auto& r : manifest.records) {
        auto visual = read_sequence(manifest.resolve(r.visual_path));
        auto skeleton = read_sequence(manifest.resolve(r.skeleton_path));
        if (visual.modality != Modality::Visual || skeleton.modality != Modality::Skeleton)
            throw FeatureIoError(FeatureIoError::Kind::BadModality,
                                 "clip '" + r.clip_id + "': visual/skeleton files have the wrong modality");
        if (visual.frames() != r.t_clip || skeleton.frames() != r.t_clip)
            throw FeatureIoError(FeatureIoError::Kind::DimMismatch,
                                 "clip '" + r.clip_id + "': manifest t_clip " + std::to_string(r.t_clip) +
                                     ", visual " + std::to_string(visual.frames()) + ", skeleton " +
                                     std::to_string(skeleton.frames()));
        set.clips.push_back({r.clip_id, r.label_id, r.split, std::move(visual.data), std::move(skeleton.data)});
    }
    return set;
}

DatasetManifest write_clip_set(const ClipSet& set, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "features");
    DatasetManifest m;
    m.num_classes = set.num_classes;
    m.class_names = set.class_names;
    m.base_dir = dir;
    for (const auto& c : set.clips) {
        ClipRecord r;
        r.clip_id = c.clip_id;
        r.label_id = c.label_id;
        r.label_name = set.class_names.at(static_cast<std::size_t>(c.label_id));
        r.split = c.split;
        r.t_clip = c.visual.rows();
        r.visual_path = "features/" + c.clip_id + ".visual.fseq";
        r.skeleton_path = "features/" + c.clip_id + ".skeleton.fseq";
        write_sequence({c.clip_id, Modality::Visual, c.visual}, m.resolve(r.visual_path));
        write_sequence({c.clip_id, Modality::Skeleton, c.skeleton}, m.resolve(r.skeleton_path));
        m.records.push_back(std::move(r));
    }
    write_manifest(m, dir / "manifest.jsonl");
    return m;
}

AlignedClip align_clip(const RawClip& clip, const TsnPlan& plan, std::uint64_t rng_seed) {
    return align_clip(clip.visual, clip.skeleton, clip.label_id, plan, rng_seed);
}

}  // namespace crossfuse
