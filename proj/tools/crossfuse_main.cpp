// crossfuse: synthesise datasets, inspect files, train, evaluate and run the
// fusion ablation.
//
// Exit codes: 0 ok, 1 other failure, 2 usage, 3 missing file,
// 4 config/schema error, 5 data/format error, 6 training diverged.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "crossfuse/checkpoint.hpp"
#include "crossfuse/dataset.hpp"
#include "crossfuse/feature_io.hpp"
#include "crossfuse/fusion_net.hpp"
#include "crossfuse/kernels.hpp"
#include "crossfuse/metrics.hpp"
#include "crossfuse/synth_fixtures.hpp"
#include "crossfuse/train_loop.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace crossfuse;

namespace {

enum Exit { kOk = 0, kOther = 1, kUsage = 2, kMissingFile = 3, kConfig = 4, kData = 5, kDiverged = 6 };

struct MissingFile : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p) {
    if (!fs::exists(p)) throw MissingFile("no such file: " + p.string());
}

json read_json_file(const fs::path& p) {
    require_file(p);
    std::ifstream in(p);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(p.string() + ": " + e.what());
    }
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << s;
}

// ---------------------------------------------------------------------------
// Experiment config: {"model": {...}, "train": {...}, "data": {"manifest": ...}, "synth": {...}}

struct Experiment {
    ModelConfig model;
    TrainConfig train;
    fs::path manifest;
    json synth = json::object();
    json echo;
};

SynthOptions synth_options(const json& j, SynthOptions o) {
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "n_clips") o.n_clips = value.get<std::size_t>();
            else if (key == "t_clip") o.t_clip = value.get<std::size_t>();
            else if (key == "num_classes") o.num_classes = value.get<std::size_t>();
            else if (key == "visual_dim") o.visual_dim = value.get<std::size_t>();
            else if (key == "val_fraction") o.val_fraction = value.get<double>();
            else if (key == "subspace_dim") o.subspace_dim = value.get<std::size_t>();
            else if (key == "visual_signal") o.visual_signal = value.get<double>();
            else if (key == "visual_noise") o.visual_noise = value.get<double>();
            else if (key == "joint_amplitude") o.joint_amplitude = value.get<double>();
            else if (key == "joint_noise") o.joint_noise = value.get<double>();
            else if (key == "translation_range") o.translation_range = value.get<double>();
            else throw ConfigError("unknown synth config key '" + key + "'");
        } catch (const json::exception&) {
            throw ConfigError("synth config key '" + key + "' has the wrong type");
        }
    }
    return o;
}

Experiment load_experiment(const std::optional<fs::path>& path) {
    Experiment e;
    json j = path ? read_json_file(*path) : json::object();
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (key != "model" && key != "train" && key != "data" && key != "synth")
            throw ConfigError("unknown config section '" + key + "'");
    try {
        e.model = model_config_from_json(j.value("model", json::object()));
        e.train = train_config_from_json(j.value("train", json::object()));
    } catch (const std::invalid_argument& err) {
        throw ConfigError(err.what());
    }
    const json data = j.value("data", json::object());
    for (const auto& [key, value] : data.items())
        if (key != "manifest") throw ConfigError("unknown data config key '" + key + "'");
    if (data.contains("manifest")) {
        fs::path m = data.at("manifest").get<std::string>();
        e.manifest = m.is_absolute() || !path ? m : path->parent_path() / m;
    }
    e.synth = j.value("synth", json::object());
    return e;
}

json echo_config(const Experiment& e, Variant variant) {
    return {{"model", to_json(e.model)},
            {"train", to_json(e.train)},
            {"data", {{"manifest", e.manifest.string()}}},
            {"variant", to_string(variant)}};
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& task, const fs::path& out, std::uint64_t seed, const std::optional<fs::path>& config,
              const std::optional<fs::path>& manifest, double drop_rate, const std::string& target) {
    const Experiment e = load_experiment(config);
    SynthOptions o = synth_options(e.synth, {});
    o.seed = seed;
    DatasetManifest written;
    if (task == "occlusion") {
        if (!manifest) throw CLI::ValidationError("--manifest", "the occlusion task needs --manifest");
        require_file(*manifest);
        const OcclusionTarget t = target == "visual"     ? OcclusionTarget::Visual
                                  : target == "skeleton" ? OcclusionTarget::Skeleton
                                                         : OcclusionTarget::Both;
        written = gen_occlusion_variant(load_manifest(*manifest, true), out, drop_rate, seed, t);
    } else if (task == "xor") {
        written = write_clip_set(gen_xor_task(o).data, out);
    } else {
        written = write_clip_set(gen_unimodal_task(task == "visual" ? Modality::Visual : Modality::Skeleton, o), out);
    }
    std::cout << "wrote " << written.records.size() << " clips and " << (out / "manifest.jsonl").string() << "\n";
    return kOk;
}

void print_stats(const Matrix<float>& m) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        lo = std::min<double>(lo, m[i]);
        hi = std::max<double>(hi, m[i]);
        sum += m[i];
    }
    std::printf("min %.6g  max %.6g  mean %.6g\n", lo, hi, sum / static_cast<double>(std::max<std::size_t>(m.size(), 1)));
}

int cmd_inspect(const fs::path& path) {
    require_file(path);
    std::ifstream probe(path, std::ios::binary);
    char magic[4] = {};
    probe.read(magic, 4);
    if (std::string(magic, 4) == "FSEQ") {
        const auto h = read_header(path);
        const auto seq = read_sequence(path);
        std::printf("feature file %s\nmodality %s  version %u  dims [", path.string().c_str(), to_string(h.modality),
                    kFeatureFormatVersion);
        for (std::size_t i = 0; i < h.dims.size(); ++i) std::printf("%s%u", i ? ", " : "", h.dims[i]);
        std::printf("]  trailer %ju bytes\n", h.trailer_bytes);
        print_stats(seq.data);
    } else if (std::string(magic, 4) == "FCKP") {
        const auto ckpt = read_checkpoint(path);
        std::size_t n = 0;
        for (const auto& t : ckpt.tensors) n += t.data.size();
        std::cout << "checkpoint " << path.string() << "\n" << ckpt.meta.dump(2) << "\n"
                  << ckpt.tensors.size() << " tensors, " << n << " values\n";
    } else {
        const auto m = load_manifest(path, false);
        std::printf("manifest %s\nclasses %d  records %zu (train %zu, val %zu, test %zu)\n", path.string().c_str(),
                    m.num_classes, m.records.size(), m.split(Split::Train).size(), m.split(Split::Val).size(),
                    m.split(Split::Test).size());
        std::vector<std::size_t> per_class(static_cast<std::size_t>(m.num_classes));
        std::size_t t_min = std::numeric_limits<std::size_t>::max(), t_max = 0;
        for (const auto& r : m.records) {
            ++per_class[static_cast<std::size_t>(r.label_id)];
            t_min = std::min(t_min, r.t_clip);
            t_max = std::max(t_max, r.t_clip);
        }
        if (!m.records.empty()) std::printf("t_clip %zu..%zu\n", t_min, t_max);
        for (std::size_t c = 0; c < per_class.size(); ++c)
            std::printf("  %3zu %-24s %zu\n", c, m.class_names[c].c_str(), per_class[c]);
    }
    return kOk;
}

ClipSet load_data(const fs::path& manifest, bool verify) {
    if (manifest.empty()) throw ConfigError("no manifest given (use --manifest or data.manifest in the config)");
    require_file(manifest);
    return load_clip_set(load_manifest(manifest, verify));
}

struct SeedRun {
    TrainResult result;
    fs::path dir;
};

/// Trains every configured seed into out/seed_<n>/ and aggregates.
std::vector<SeedRun> train_seeds(Variant variant, const ClipSet& data, const Experiment& e, const fs::path& out) {
    std::vector<SeedRun> runs;
    for (const auto seed : e.train.seeds) {
        TrainOptions opt;
        opt.out_dir = out / ("seed_" + std::to_string(seed));
        opt.progress = [](const std::string& s) { std::cerr << s << "\n"; };
        runs.push_back({train(variant, data, e.model, e.train, seed, opt), opt.out_dir});
    }
    return runs;
}

EvalReport seed_report(const std::vector<SeedRun>& runs, const std::string& title) {
    std::vector<MetricMap> maps;
    for (const auto& r : runs) maps.push_back(r.result.best_val_metrics);
    EvalReport report = aggregate_seeds(maps);
    report.title = title;
    return report;
}

const SeedRun& best_run(const std::vector<SeedRun>& runs) {
    return *std::max_element(runs.begin(), runs.end(), [](const SeedRun& a, const SeedRun& b) {
        return a.result.best_val_map < b.result.best_val_map;
    });
}

void merge_logs(const std::vector<SeedRun>& runs, const fs::path& dest) {
    std::ofstream out(dest, std::ios::trunc);
    for (const auto& r : runs) {
        std::ifstream in(r.dir / "train_log.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            json j = json::parse(line);
            j["seed"] = r.result.seed;
            out << j.dump() << '\n';
        }
    }
}

void add_per_class(EvalReport& report, const TrainedModel& model, const ClipSet& data, const TrainConfig& cfg) {
    const auto outcome = evaluate_model(model, data.split(Split::Val), cfg.tsn, 64, cfg.restrict_classes);
    report.per_class = per_class_rows(outcome.predictions, data.class_names, outcome.class_ids);
    for (std::size_t c = 0; c < static_cast<std::size_t>(data.num_classes); ++c)
        if (std::find(outcome.class_ids.begin(), outcome.class_ids.end(), static_cast<int>(c)) ==
            outcome.class_ids.end())
            report.excluded_classes.push_back(static_cast<int>(c));
}

int cmd_train(const Experiment& e, Variant variant, const fs::path& out, bool verify) {
    const ClipSet data = load_data(e.manifest, verify);
    fs::create_directories(out);
    write_text(out / "config.json", echo_config(e, variant).dump(2) + "\n");
    const auto runs = train_seeds(variant, data, e, out);
    const SeedRun& best = best_run(runs);
    fs::copy_file(best.dir / "checkpoint.bin", out / "checkpoint.bin", fs::copy_options::overwrite_existing);
    merge_logs(runs, out / "train_log.jsonl");
    EvalReport report = seed_report(runs, std::string("variant ") + to_string(variant) + ", validation split");
    add_per_class(report, best.result.best, data, e.train);
    std::ostringstream text;
    char best_line[128];
    std::snprintf(best_line, sizeof best_line, "\nbest seed %ju (val mAP %.2f%%, epoch %zu)\n",
                  static_cast<std::uintmax_t>(best.result.seed), 100.0 * best.result.best_val_map, best.result.best_epoch);
    text << report.to_text() << best_line
         << "\nconfig\n" << echo_config(e, variant).dump(2) << "\n";
    write_text(out / "eval_report.txt", text.str());
    std::cout << text.str();
    return kOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& manifest, const std::string& split_name,
             std::optional<bool> restrict, bool verify, const std::optional<fs::path>& out) {
    require_file(checkpoint);
    const Checkpoint ckpt = read_checkpoint(checkpoint);
    const TrainedModel model = load_model(ckpt);
    TrainConfig cfg;
    if (ckpt.meta.contains("train_config")) cfg = train_config_from_json(ckpt.meta.at("train_config"));
    if (restrict) cfg.restrict_classes = *restrict;
    const ClipSet data = load_data(manifest, verify);
    const Split split = parse_split(split_name);
    const auto clips = data.split(split);
    if (clips.empty()) throw std::invalid_argument("the " + split_name + " split is empty");
    const auto outcome = evaluate_model(model, clips, cfg.tsn, 64, cfg.restrict_classes);
    EvalReport report = aggregate_seeds(std::vector<MetricMap>{outcome.metrics});
    report.title = std::string("variant ") + to_string(model.variant) + ", " + split_name + " split, " +
                   (cfg.restrict_classes ? "restricted to present classes" : "all classes");
    report.per_class = per_class_rows(outcome.predictions, data.class_names, outcome.class_ids);
    std::ostringstream text;
    text << report.to_text();
    char buf[128];
    std::snprintf(buf, sizeof buf, "\nmacro_map %.12f\n", outcome.metrics.at("macro_map"));
    text << buf;
    if (ckpt.meta.contains("best_val_map")) {
        std::snprintf(buf, sizeof buf, "checkpoint best_val_map %.12f\n", ckpt.meta.at("best_val_map").get<double>());
        text << buf;
    }
    if (out) {
        fs::create_directories(*out);
        write_text(*out / "eval_report.txt", text.str());
    }
    std::cout << text.str();
    return kOk;
}

int cmd_ablate(const Experiment& e, const fs::path& out, bool verify) {
    const ClipSet data = load_data(e.manifest, verify);
    fs::create_directories(out);
    const std::vector<std::pair<Variant, const char*>> rows{{Variant::CrossAttention, "Cross-attention fusion"},
                                                            {Variant::EarlyFusion, "Early fusion"},
                                                            {Variant::LateFusion, "Late fusion"}};
    std::ostringstream table;
    table << "Fusion method              Top-1 Acc. (%)   Macro mAP (%)    Macro F1 (%)\n";
    for (const auto& [variant, label] : rows) {
        const fs::path dir = out / to_string(variant);
        fs::create_directories(dir);
        write_text(dir / "config.json", echo_config(e, variant).dump(2) + "\n");
        const auto runs = train_seeds(variant, data, e, dir);
        fs::copy_file(best_run(runs).dir / "checkpoint.bin", dir / "checkpoint.bin",
                      fs::copy_options::overwrite_existing);
        merge_logs(runs, dir / "train_log.jsonl");
        const EvalReport r = seed_report(runs, label);
        write_text(dir / "eval_report.txt", r.to_text());
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-26s %-16s %-16s %s\n", label, format_percent(r.metrics.at("top1")).c_str(),
                      format_percent(r.metrics.at("macro_map")).c_str(),
                      format_percent(r.metrics.at("macro_f1")).c_str());
        table << buf;
    }
    table << "\nmean ± sample std over " << e.train.seeds.size() << " seed(s), validation split\n";
    json echo = echo_config(e, Variant::CrossAttention);
    echo.erase("variant");
    table << "\nconfig\n" << echo.dump(2) << "\n";
    write_text(out / "eval_report.txt", table.str());
    std::cout << table.str();
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-attention fusion of visual and skeleton feature sequences"};
    app.require_subcommand(1);

    std::optional<fs::path> config;
    std::optional<std::uint64_t> seed;
    fs::path out = "out";
    std::string variant_name = "cross";
    std::optional<fs::path> manifest;
    bool verify = false;
    int threads = 0;
    std::optional<bool> restrict;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "Seed (replaces the configured seed list)");
        sub->add_option("--device-threads", threads, "Worker threads for the numeric kernels")->check(CLI::NonNegativeNumber);
    };

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    std::string task = "xor";
    double drop_rate = 0.5;
    std::string target = "both";
    synth->add_option("--task", task, "visual | skeleton | xor | occlusion")
        ->check(CLI::IsMember({"visual", "skeleton", "xor", "occlusion"}));
    synth->add_option("--out", out, "Output directory")->required();
    synth->add_option("--manifest", manifest, "Input manifest (occlusion task)");
    synth->add_option("--drop-rate", drop_rate, "Frame drop probability (occlusion task)");
    synth->add_option("--target", target, "visual | skeleton | both")->check(CLI::IsMember({"visual", "skeleton", "both"}));
    add_common(synth);

    auto* inspect = app.add_subcommand("inspect", "Summarise a feature file, manifest or checkpoint");
    fs::path inspect_path;
    inspect->add_option("path", inspect_path, "File to inspect")->required();

    auto add_restrict = [&](CLI::App* sub) {
        sub->add_flag_callback("--restrict-classes", [&] { restrict = true; },
                               "Score only classes present in the evaluated split (default)");
        sub->add_flag_callback("--no-restrict-classes", [&] { restrict = false; }, "Score all classes");
    };

    auto* train_cmd = app.add_subcommand("train", "Train one variant over the configured seeds");
    train_cmd->add_option("--out", out, "Output directory");
    train_cmd->add_option("--variant", variant_name, "cross | early | late | vprobe | sprobe")
        ->check(CLI::IsMember({"cross", "early", "late", "vprobe", "sprobe"}));
    train_cmd->add_option("--manifest", manifest, "Dataset manifest (overrides data.manifest)");
    train_cmd->add_flag("--verify", verify, "Check every referenced feature file before training");
    add_restrict(train_cmd);
    add_common(train_cmd);

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    fs::path checkpoint;
    std::string split = "val";
    std::optional<fs::path> eval_out;
    eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
    eval_cmd->add_option("--split", split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--out", eval_out, "Directory for eval_report.txt");
    eval_cmd->add_flag("--verify", verify, "Check every referenced feature file first");
    add_restrict(eval_cmd);
    eval_cmd->add_option("--device-threads", threads, "Worker threads for the numeric kernels");

    auto* ablate = app.add_subcommand("ablate", "Train cross-attention, early and late fusion and tabulate");
    ablate->add_option("--out", out, "Output directory");
    ablate->add_option("--manifest", manifest, "Dataset manifest (overrides data.manifest)");
    ablate->add_flag("--verify", verify, "Check every referenced feature file before training");
    add_restrict(ablate);
    add_common(ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (threads > 0) kernels::set_num_threads(threads);
        if (*synth) return cmd_synth(task, out, seed.value_or(0), config, manifest, drop_rate, target);
        if (*inspect) return cmd_inspect(inspect_path);
        if (*eval_cmd) return cmd_eval(checkpoint, *manifest, split, restrict, verify, eval_out);

        Experiment e = load_experiment(config);
        if (manifest) e.manifest = *manifest;
        if (seed) e.train.seeds = {*seed};
        if (restrict) e.train.restrict_classes = *restrict;
        if (*train_cmd) return cmd_train(e, parse_variant(variant_name), out, verify);
        if (*ablate) return cmd_ablate(e, out, verify);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const MissingFile& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kMissingFile;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const FeatureIoError& e) {
        std::cerr << "data error (" << to_string(e.kind()) << "): " << e.what() << "\n";
        const std::string msg = e.what();
        const bool missing = msg.find("missing file") != std::string::npos || msg.find("cannot open") != std::string::npos;
        return e.kind() == FeatureIoError::Kind::Io && missing ? kMissingFile : kData;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kData;
    } catch (const TrainingDiverged& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kDiverged;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kOther;
    }
    return kOther;
}
