#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <regex>
#include <string>
#include <sys/wait.h>

#include "support/fixtures.hpp"

using testing_support::ScratchDir;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(CROSSFUSE_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf;
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

void write_config(const fs::path& file, const std::string& manifest, std::size_t seeds = 1) {
    std::ofstream out(file);
    out << R"({"model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "ffn_dim": 16, "head_hidden": 8},
  "train": {"epochs": 2, "batch_size": 8, "tsn_segments": 2, "tsn_frames_per_segment": 2, "seeds": [)";
    for (std::size_t s = 0; s < seeds; ++s) out << (s ? ", " : "") << s;
    out << R"(]},
  "data": {"manifest": ")" << manifest << R"("},
  "synth": {"n_clips": 20, "t_clip": 8}})";
}

double number_after(const std::string& text, const std::string& key) {
    const auto pos = text.rfind(key);
    if (pos == std::string::npos) return std::nan("");
    return std::stod(text.substr(pos + key.size()));
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        write_config(dir / "config.json", "data/manifest.jsonl");
        ASSERT_EQ(run("synth --task xor --seed 3 --config " + q(dir / "config.json") + " --out " + q(dir / "data")).code, 0);
    }
    ScratchDir dir{"cli"};
};

}  // namespace

TEST(Cli, NoSubcommandIsAUsageError) { EXPECT_EQ(run("").code, 2); }

TEST(Cli, UnknownFlagIsAUsageError) { EXPECT_EQ(run("synth --out x --frobnicate").code, 2); }

TEST(Cli, HelpExitsCleanly) {
    const auto r = run("--help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("ablate"), std::string::npos);
}

TEST_F(CliTest, SynthIsByteReproducible) {
    ASSERT_EQ(run("synth --task xor --seed 3 --config " + q(dir / "config.json") + " --out " + q(dir / "again")).code, 0);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "data")) {
        if (!e.is_regular_file()) continue;
        ++files;
        const auto rel = fs::relative(e.path(), dir / "data");
        EXPECT_EQ(testing_support::read_bytes(e.path()), testing_support::read_bytes(dir / "again" / rel)) << rel;
    }
    EXPECT_EQ(files, 41u);
}

TEST_F(CliTest, InspectSummarisesEachFileKind) {
    const auto m = run("inspect " + q(dir / "data" / "manifest.jsonl"));
    EXPECT_EQ(m.code, 0);
    EXPECT_NE(m.out.find("xor_1"), std::string::npos);
    fs::path feature;
    for (const auto& e : fs::recursive_directory_iterator(dir / "data"))
        if (e.path().extension() != ".jsonl" && e.is_regular_file()) feature = e.path();
    EXPECT_EQ(run("inspect " + q(feature)).code, 0);
}

TEST_F(CliTest, EvalReproducesTheCheckpointScore) {
    const auto t = run("train --config " + q(dir / "config.json") + " --out " + q(dir / "run"));
    ASSERT_EQ(t.code, 0) << t.out;
    for (const char* f : {"checkpoint.bin", "train_log.jsonl", "eval_report.txt", "config.json"})
        EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
    EXPECT_EQ(run("inspect " + q(dir / "run" / "checkpoint.bin")).code, 0);

    const auto e = run("eval --checkpoint " + q(dir / "run" / "checkpoint.bin") + " --manifest " +
                       q(dir / "data" / "manifest.jsonl") + " --out " + q(dir / "eval"));
    ASSERT_EQ(e.code, 0) << e.out;
    const double got = number_after(e.out, "\nmacro_map ");
    const double stored = number_after(e.out, "checkpoint best_val_map ");
    ASSERT_FALSE(std::isnan(got));
    EXPECT_NEAR(got, stored, 1e-6);
    EXPECT_TRUE(fs::exists(dir / "eval" / "eval_report.txt"));
}

TEST_F(CliTest, AblateTabulatesThreeVariantsWithSpread) {
    write_config(dir / "two.json", "data/manifest.jsonl", 2);
    const auto r = run("ablate --config " + q(dir / "two.json") + " --out " + q(dir / "abl"));
    ASSERT_EQ(r.code, 0) << r.out;
    const std::regex row(R"((Cross-attention fusion|Early fusion|Late fusion) +\d+\.\d\d ± \d+\.\d\d +\d+\.\d\d ± \d+\.\d\d +\d+\.\d\d ± \d+\.\d\d)");
    const auto begin = std::sregex_iterator(r.out.begin(), r.out.end(), row);
    EXPECT_EQ(std::distance(begin, std::sregex_iterator()), 3) << r.out;
    for (const char* v : {"cross", "early", "late"}) EXPECT_TRUE(fs::exists(dir / "abl" / v / "checkpoint.bin")) << v;
}

TEST_F(CliTest, MissingManifestExitsWithThree) {
    EXPECT_EQ(run("train --config " + q(dir / "config.json") + " --manifest " + q(dir / "nope.jsonl") + " --out " +
                  q(dir / "run"))
                  .code,
              3);
    EXPECT_EQ(run("eval --checkpoint " + q(dir / "nope.bin") + " --manifest " + q(dir / "data" / "manifest.jsonl")).code, 3);
}

TEST_F(CliTest, BadConfigExitsWithFour) {
    std::ofstream(dir / "bad.json") << R"({"train": {"lr": 0.1}})";
    EXPECT_EQ(run("train --config " + q(dir / "bad.json") + " --out " + q(dir / "run")).code, 4);
    std::ofstream(dir / "broken.json") << "{ not json";
    EXPECT_EQ(run("train --config " + q(dir / "broken.json") + " --out " + q(dir / "run")).code, 4);
}

TEST_F(CliTest, CorruptFeatureFileExitsWithFive) {
    fs::path victim;
    for (const auto& e : fs::recursive_directory_iterator(dir / "data"))
        if (e.path().extension() != ".jsonl" && e.is_regular_file()) victim = e.path();
    auto bytes = testing_support::read_bytes(victim);
    bytes[0] = 'X';
    testing_support::write_bytes(victim, bytes);
    EXPECT_EQ(run("train --verify --config " + q(dir / "config.json") + " --out " + q(dir / "run")).code, 5);
}

TEST_F(CliTest, CorruptCheckpointExitsWithFive) {
    testing_support::write_bytes(dir / "junk.bin", "FCKPgarbage");
    EXPECT_EQ(run("eval --checkpoint " + q(dir / "junk.bin") + " --manifest " + q(dir / "data" / "manifest.jsonl")).code, 5);
}
