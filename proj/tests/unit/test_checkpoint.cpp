#include <gtest/gtest.h>

#include <cstring>

#include "crossfuse/checkpoint.hpp"
#include "support/fixtures.hpp"

using namespace crossfuse;
using testing_support::ScratchDir;

namespace {

ModelConfig cfg_for_tests() {
    auto c = testing_support::tiny_config();
    c.n_layers = 1;
    return c;
}

TrainedModel model_of(Variant v) {
    const auto cfg = cfg_for_tests();
    TrainedModel m{v, cfg, {}, {}, {}, {}};
    switch (v) {
        case Variant::CrossAttention: m.cross = CrossAttentionNet<float>(cfg).init(1); break;
        case Variant::EarlyFusion: m.early = EarlyFusionNet<float>(cfg).init(2); break;
        case Variant::VisualProbe: m.visual_probe = ProbeNet<float>(cfg, Modality::Visual).init(3); break;
        case Variant::SkeletonProbe: m.skeleton_probe = ProbeNet<float>(cfg, Modality::Skeleton).init(4); break;
        case Variant::LateFusion:
            m.visual_probe = ProbeNet<float>(cfg, Modality::Visual).init(5);
            m.skeleton_probe = ProbeNet<float>(cfg, Modality::Skeleton).init(6);
            break;
    }
    return m;
}

}  // namespace

TEST(Checkpoint, ContainerRoundTripsMetaAndTensors) {
    ScratchDir dir("ckpt");
    Checkpoint c;
    c.meta = {{"seed", 7}, {"best_val_map", 0.8125}, {"rng_state", "1 2 3"}};
    c.tensors.push_back({"a", {2, 3}, {1.f, -2.f, 3.5f, 0.f, -0.f, 1e-30f}});
    c.tensors.push_back({"b.c", {1, 1}, {42.f}});
    write_checkpoint(c, dir / "c.bin");
    const auto back = read_checkpoint(dir / "c.bin");
    EXPECT_EQ(back.meta, c.meta);
    ASSERT_EQ(back.tensors.size(), 2u);
    EXPECT_EQ(back.tensors[0].dims, c.tensors[0].dims);
    EXPECT_EQ(std::memcmp(back.tensors[0].data.data(), c.tensors[0].data.data(), 6 * sizeof(float)), 0);
    EXPECT_EQ(back.find("b.c")->data[0], 42.f);
    EXPECT_EQ(back.find("missing"), nullptr);
    EXPECT_EQ(testing_support::read_bytes(dir / "c.bin").substr(0, 4), "FCKP");
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    ScratchDir dir("ckpt");
    write_checkpoint(make_checkpoint(model_of(Variant::VisualProbe)), dir / "c.bin");
    const auto good = testing_support::read_bytes(dir / "c.bin");

    testing_support::write_bytes(dir / "t.bin", good.substr(0, good.size() - 3));
    EXPECT_THROW(read_checkpoint(dir / "t.bin"), CheckpointError);
    testing_support::write_bytes(dir / "x.bin", good + "x");
    EXPECT_THROW(read_checkpoint(dir / "x.bin"), CheckpointError);
    auto bad = good;
    bad[1] = 'Z';
    testing_support::write_bytes(dir / "m.bin", bad);
    EXPECT_THROW(read_checkpoint(dir / "m.bin"), CheckpointError);
    EXPECT_THROW(read_checkpoint(dir / "absent.bin"), CheckpointError);
}

TEST(Checkpoint, EveryVariantReloadsToIdenticalPredictions) {
    ScratchDir dir("ckpt");
    const auto cfg = cfg_for_tests();
    const auto batch64 = testing_support::random_batch<double>(cfg, 3, 9);
    Batch<float> batch{3, cfg.seq_len, matrix_cast<float>(batch64.visual), matrix_cast<float>(batch64.skeleton),
                       batch64.labels};
    for (const auto v : {Variant::CrossAttention, Variant::EarlyFusion, Variant::LateFusion, Variant::VisualProbe,
                         Variant::SkeletonProbe}) {
        const auto model = model_of(v);
        write_checkpoint(make_checkpoint(model, {{"note", "x"}}), dir / "m.bin");
        const auto ckpt = read_checkpoint(dir / "m.bin");
        EXPECT_EQ(ckpt.meta["variant"], to_string(v));
        const auto back = load_model(ckpt);
        EXPECT_EQ(back.variant, v);
        EXPECT_EQ(back.predict_proba(batch), model.predict_proba(batch)) << to_string(v);
    }
}

TEST(Checkpoint, MissingTensorIsReported) {
    auto ckpt = make_checkpoint(model_of(Variant::CrossAttention));
    ckpt.tensors.pop_back();
    EXPECT_THROW(load_model(ckpt), CheckpointError);
}

TEST(Checkpoint, ReplacingAnExistingFileIsAtomic) {
    ScratchDir dir("ckpt");
    write_checkpoint(make_checkpoint(model_of(Variant::VisualProbe)), dir / "c.bin");
    write_checkpoint(make_checkpoint(model_of(Variant::SkeletonProbe)), dir / "c.bin");
    EXPECT_EQ(read_checkpoint(dir / "c.bin").meta["variant"], "sprobe");
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path())) files += e.is_regular_file();
    EXPECT_EQ(files, 1u);
}

TEST(ConfigJson, RoundTripsBothConfigs) {
    ModelConfig m = cfg_for_tests();
    m.cls_init_std = 0.05;
    EXPECT_EQ(to_json(model_config_from_json(to_json(m))), to_json(m));
    TrainConfig t;
    t.seeds = {4, 5};
    t.tsn.n_segments = 3;
    t.restrict_classes = false;
    const auto back = train_config_from_json(to_json(t));
    EXPECT_EQ(back.seeds, t.seeds);
    EXPECT_EQ(back.tsn.n_segments, 3u);
    EXPECT_FALSE(back.restrict_classes);
    EXPECT_EQ(to_json(back), to_json(t));
}

TEST(ConfigJson, IsStrictAboutKeysTypesAndRanges) {
    EXPECT_THROW(model_config_from_json({{"d_modle", 8}}), std::invalid_argument);
    EXPECT_THROW(model_config_from_json({{"d_model", "big"}}), std::invalid_argument);
    EXPECT_THROW(model_config_from_json({{"d_model", 10}, {"n_heads", 4}}), std::invalid_argument);
    EXPECT_THROW(train_config_from_json({{"epochs", 0}}), std::invalid_argument);
    EXPECT_THROW(train_config_from_json({{"lr", 0.1}}), std::invalid_argument);
    EXPECT_EQ(train_config_from_json({{"base_lr", 0.01}}).base_lr, 0.01);
    EXPECT_EQ(train_config_from_json(nlohmann::json::object()).epochs, 30u);
}
