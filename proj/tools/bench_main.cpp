#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "osdbench/common.hpp"
#include "osdbench/runner.hpp"

namespace fs = std::filesystem;
using namespace osd;

namespace {

struct CommonOverrides {
    std::string config_path;
    std::string out_dir;
    int workers = 0;
    std::int64_t seed = -1;
    bool empty_refs = false;
    int k_shots = 0;
};

ExperimentConfig load_config(const CommonOverrides& ov, const CLI::App* sub) {
    ExperimentConfig cfg = experiment_config_from_toml(toml::parse_file(ov.config_path));
    if (!ov.out_dir.empty()) cfg.out_dir = ov.out_dir;
    if (sub->count("--workers")) cfg.workers = ov.workers;
    if (sub->count("--seed")) cfg.seed = static_cast<std::uint64_t>(ov.seed);
    if (sub->count("--empty-refs")) cfg.empty_refs = ov.empty_refs;
    if (sub->count("--k-shots")) {
        cfg.k_shots = ov.k_shots;
        cfg.eval.k_shots = ov.k_shots;
    }
    return cfg;
}

void add_common(CLI::App* sub, CommonOverrides& ov, bool config_required = true) {
    auto* opt = sub->add_option("--config", ov.config_path, "experiment config (TOML)");
    if (config_required) opt->required();
    sub->add_option("--out", ov.out_dir, "output directory (overrides config)");
    sub->add_option("--workers", ov.workers, "parallel workers");
    sub->add_option("--seed", ov.seed, "global seed (overrides config)");
    sub->add_flag("--empty-refs", ov.empty_refs, "evaluate with all-black references");
    sub->add_option("--k-shots", ov.k_shots, "references per query")
        ->check(CLI::IsMember({1, 5}));
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    out << text;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

int cmd_split(const std::string& dataset_path, int n_splits, const std::string& out_path,
              const std::string& correspondence_path, const std::string& external_path,
              int external_index) {
    Dataset ds = load_dataset(dataset_path, {});
    if (correspondence_path.empty()) {
        SplitSpec spec;
        spec.n_splits = n_splits;
        std::vector<CategorySplit> splits = make_splits(ds.categories, spec);
        save_splits(out_path, splits);
        std::printf("wrote %zu splits over %zu categories to %s\n", splits.size(),
                    ds.categories.size(), out_path.c_str());
        return 0;
    }
    auto correspondence = load_correspondence_csv(correspondence_path);
    std::vector<CategorySplit> external = load_splits(external_path);
    if (external_index < 0 || external_index >= static_cast<int>(external.size()))
        throw ConfigError("external split index out of range");
    CategorySplit split = make_exclusion_split(
        ds, correspondence, external[static_cast<std::size_t>(external_index)]);
    save_splits(out_path, {split});
    std::printf("wrote exclusion split (%zu train, %zu held out) to %s\n",
                split.train_category_ids.size(), split.heldout_category_ids.size(),
                out_path.c_str());
    return 0;
}

int cmd_subsample(const std::string& dataset_path, const std::string& splits_path,
                  int split_index, const std::string& mode_name, double fraction,
                  std::int64_t seed, bool per_category_quota, const std::string& out_dir) {
    Dataset ds = load_dataset(dataset_path, {});
    std::vector<CategorySplit> splits = load_splits(splits_path);
    if (split_index < 0 || split_index >= static_cast<int>(splits.size()))
        throw ConfigError("split index out of range");
    const CategorySplit& split = splits[static_cast<std::size_t>(split_index)];
    Dataset train_ds = apply_split(ds, split, Phase::train);
    SubsampleSpec spec;
    spec.mode = subsample_mode_from_string(mode_name);
    spec.fraction = fraction;
    spec.seed = static_cast<std::uint64_t>(seed);
    spec.per_category_quota = per_category_quota;
    SubsampleResult res = subsample_training_set(train_ds, split.train_category_ids, spec);
    fs::create_directories(out_dir);
    save_dataset((fs::path(out_dir) / "annotations.json").string(), res.dataset);
    write_file((fs::path(out_dir) / "subsample.json").string(),
               subsample_manifest_json(split, spec, res));
    std::printf("kept %zu categories, %lld instances -> %s\n", res.kept_categories.size(),
                static_cast<long long>(res.instance_budget), out_dir.c_str());
    return 0;
}

int cmd_synth(const std::string& preset, int categories, std::int64_t images, std::int64_t seed,
              const std::string& out_dir) {
    synth::SceneConfig scene;
    if (preset == "low_clutter")
        scene = synth::low_clutter_preset(categories);
    else if (preset == "high_clutter")
        scene = synth::high_clutter_preset(categories);
    else
        throw ConfigError("unknown preset: " + preset);
    scene.seed = static_cast<std::uint64_t>(seed);
    synth::GeneratorStats stats;
    Dataset ds = synth::generate_dataset(scene, images, &stats);
    synth::export_dataset(ds, scene, out_dir);
    std::printf("%lld images, %lld instances (%.2f per image, %.2f classes per image) -> %s\n",
                static_cast<long long>(stats.n_images),
                static_cast<long long>(stats.n_instances), stats.instances_per_image,
                stats.classes_per_image, out_dir.c_str());
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, int split_index, const std::string& out_dir) {
    Dataset train_base, eval_ds;
    load_experiment_datasets(cfg, train_base, eval_ds);
    std::vector<CategorySplit> splits = make_splits(train_base.categories, cfg.split_spec);
    if (split_index < 0 || split_index >= static_cast<int>(splits.size()))
        throw ConfigError("split index out of range");
    const CategorySplit& split = splits[static_cast<std::size_t>(split_index)];
    Dataset labeled = apply_split(train_base, split, Phase::train);
    EpisodeSampler sampler(labeled, mix(cfg.seed, 0xE5150, 0, static_cast<std::uint64_t>(split_index)),
                           cfg.crop);
    TrainConfig tc = cfg.train;
    tc.seed = mix(cfg.seed, 0x7124, 0, static_cast<std::uint64_t>(split_index));
    TrainResult result = train_detector(labeled, sampler, tc);
    fs::create_directories(out_dir);
    save_model((fs::path(out_dir) / "model.bin").string(), result.model);
    save_loss_trace((fs::path(out_dir) / "loss_trace.csv").string(), result.epoch_losses);
    double final_loss = result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back();
    std::printf("trained %d epochs on split %d (final mean loss %.4f) -> %s\n", tc.epochs,
                split_index, final_loss, out_dir.c_str());
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, int split_index, const std::string& model_path,
             const std::string& detections_path, const std::string& out_dir) {
    Dataset train_base, eval_ds;
    load_experiment_datasets(cfg, train_base, eval_ds);
    std::vector<CategorySplit> splits = make_splits(train_base.categories, cfg.split_spec);
    if (split_index < 0 || split_index >= static_cast<int>(splits.size()))
        throw ConfigError("split index out of range");
    const CategorySplit& split = splits[static_cast<std::size_t>(split_index)];

    EvalQueryOptions opts;
    opts.k = cfg.k_shots;
    opts.empty_refs = cfg.empty_refs;
    opts.crop = cfg.crop;
    std::uint64_t query_seed = mix(cfg.seed, 0xE7A1, 0, static_cast<std::uint64_t>(split_index));
    std::vector<EvalQuery> queries = build_eval_queries(eval_ds, split, opts, query_seed);

    fs::create_directories(out_dir);
    save_query_manifest((fs::path(out_dir) / "queries.jsonl").string(), queries);
    std::vector<Detection> detections;
    if (!detections_path.empty()) {
        detections = load_detections_jsonl(detections_path);
    } else {
        DetectorModel model = load_model(model_path);
        DetectorRunner runner(eval_ds, model);
        detections = runner.run_queries(queries);
        save_detections_jsonl((fs::path(out_dir) / "detections.jsonl").string(), detections);
    }
    EvalResult result = evaluate_run(detections, queries, eval_ds, split, cfg.eval);
    write_file((fs::path(out_dir) / "result.json").string(),
               eval_result_json(result, split_index, 0));
    std::printf("split %d: train AP50 %.2f%% (%d categories), held-out AP50 %.2f%% (%d)\n",
                split_index, 100.0 * result.train_ap, result.n_train_categories,
                100.0 * result.heldout_ap, result.n_heldout_categories);
    return 0;
}

int cmd_report(const std::string& cells_dir, const std::string& out_dir) {
    std::vector<RunCell> cells;
    std::vector<fs::path> paths;
    for (const auto& entry : fs::recursive_directory_iterator(cells_dir))
        if (entry.is_regular_file() && entry.path().filename() == "result.json")
            paths.push_back(entry.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) cells.push_back(eval_result_from_json(read_file(p.string())));
    if (cells.empty()) throw ConfigError("no result.json files under " + cells_dir);
    GapReport report = gap_report(cells);
    fs::create_directories(out_dir);
    write_file((fs::path(out_dir) / "gap_report.json").string(), gap_report_json(report));
    write_file((fs::path(out_dir) / "cells.csv").string(), cells_csv(cells, report));
    std::printf(
        "%zu cells: train %.2f%%, held-out %.2f%%, gap %.2f points, relative %s -> %s\n",
        cells.size(), report.train_ap, report.heldout_ap, report.delta,
        report.relative_defined ? (std::to_string(100.0 * report.relative) + "%").c_str() : "n/a",
        out_dir.c_str());
    return 0;
}

int cmd_run(const ExperimentConfig& cfg) {
    ReportBundle bundle = run_experiment(cfg);
    for (const auto& [name, report] : bundle.per_condition)
        std::printf("%s: train %.2f%%, held-out %.2f%%, gap %.2f points\n", name.c_str(),
                    report.train_ap, report.heldout_ap, report.delta);
    std::printf("reports under %s\n", cfg.out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"one-shot object detection benchmark toolkit"};
    app.require_subcommand(1);

    auto* split_cmd = app.add_subcommand("split", "build category hold-out splits");
    std::string split_dataset, split_out = "splits.json";
    std::string split_correspondence, split_external;
    int split_n = 4, split_external_index = 0;
    split_cmd->add_option("--dataset", split_dataset, "annotations JSON")->required();
    split_cmd->add_option("--n-splits", split_n, "number of splits");
    split_cmd->add_option("--out", split_out, "output splits JSON");
    split_cmd->add_option("--correspondence", split_correspondence,
                          "category correspondence CSV for an exclusion split");
    split_cmd->add_option("--external", split_external, "external splits JSON");
    split_cmd->add_option("--external-index", split_external_index, "split index in --external");

    auto* sub_cmd = app.add_subcommand("subsample", "subsample a training set");
    std::string sub_dataset, sub_splits, sub_mode = "category_fraction", sub_out = "subsampled";
    int sub_split_index = 0;
    double sub_fraction = 1.0;
    std::int64_t sub_seed = 1;
    bool sub_quota = false;
    sub_cmd->add_option("--dataset", sub_dataset, "annotations JSON")->required();
    sub_cmd->add_option("--splits", sub_splits, "splits JSON")->required();
    sub_cmd->add_option("--split-index", sub_split_index, "split to apply");
    sub_cmd->add_option("--mode", sub_mode,
                        "category_fraction | instance_matched_subset | instance_matched_all");
    sub_cmd->add_option("--fraction", sub_fraction, "category fraction in (0, 1]");
    sub_cmd->add_option("--seed", sub_seed, "subsample seed");
    sub_cmd->add_flag("--per-category-quota", sub_quota,
                      "equal per-category quotas for instance_matched_all");
    sub_cmd->add_option("--out-dir", sub_out, "output directory");

    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic benchmark dataset");
    std::string synth_preset = "low_clutter", synth_out = "synth_data";
    int synth_categories = 8;
    std::int64_t synth_images = 100, synth_seed = 1;
    synth_cmd->add_option("--preset", synth_preset, "low_clutter | high_clutter");
    synth_cmd->add_option("--categories", synth_categories, "number of glyph categories");
    synth_cmd->add_option("--images", synth_images, "number of images");
    synth_cmd->add_option("--seed", synth_seed, "scene seed");
    synth_cmd->add_option("--out-dir", synth_out, "output directory");

    CommonOverrides train_ov, eval_ov, run_ov;
    auto* train_cmd = app.add_subcommand("train", "train a detector for one split");
    int train_split_index = 0;
    std::string train_out = "trained";
    add_common(train_cmd, train_ov);
    train_cmd->add_option("--split-index", train_split_index, "split to train");
    train_cmd->add_option("--model-out", train_out, "output directory");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a model or stored detections");
    int eval_split_index = 0;
    std::string eval_model, eval_detections, eval_out = "evaluated";
    add_common(eval_cmd, eval_ov);
    eval_cmd->add_option("--split-index", eval_split_index, "split to evaluate");
    eval_cmd->add_option("--model", eval_model, "model file from `bench train`");
    eval_cmd->add_option("--detections", eval_detections,
                         "pre-computed detections JSONL (skips the detector)");
    eval_cmd->add_option("--result-out", eval_out, "output directory");

    auto* report_cmd = app.add_subcommand("report", "re-aggregate stored per-cell results");
    std::string report_cells, report_out = "report";
    report_cmd->add_option("--cells", report_cells, "directory holding result.json cells")
        ->required();
    report_cmd->add_option("--out", report_out, "output directory");

    auto* run_cmd = app.add_subcommand("run", "full benchmark pipeline from a config");
    add_common(run_cmd, run_ov);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(split_cmd))
            return cmd_split(split_dataset, split_n, split_out, split_correspondence,
                             split_external, split_external_index);
        if (app.got_subcommand(sub_cmd))
            return cmd_subsample(sub_dataset, sub_splits, sub_split_index, sub_mode, sub_fraction,
                                 sub_seed, sub_quota, sub_out);
        if (app.got_subcommand(synth_cmd))
            return cmd_synth(synth_preset, synth_categories, synth_images, synth_seed, synth_out);
        if (app.got_subcommand(train_cmd))
            return cmd_train(load_config(train_ov, train_cmd), train_split_index, train_out);
        if (app.got_subcommand(eval_cmd)) {
            if (eval_model.empty() && eval_detections.empty())
                throw ConfigError("eval: need --model or --detections");
            return cmd_eval(load_config(eval_ov, eval_cmd), eval_split_index, eval_model,
                            eval_detections, eval_out);
        }
        if (app.got_subcommand(report_cmd)) return cmd_report(report_cells, report_out);
        if (app.got_subcommand(run_cmd)) return cmd_run(load_config(run_ov, run_cmd));
        throw ConfigError("no subcommand");
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ProtocolError& e) {
        std::fprintf(stderr, "protocol violation: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    }
}
