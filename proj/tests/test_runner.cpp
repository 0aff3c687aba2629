#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "osdbench/common.hpp"
#include "osdbench/episodes.hpp"
#include "osdbench/matcheval.hpp"
#include "osdbench/runner.hpp"
#include "osdbench/siamdet.hpp"
#include "osdbench/synthworld.hpp"
#include "osdbench/tomlmini.hpp"

using namespace osd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "osdbench_test_runner" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Small and fast: untrained model (epochs 0), six categories, one split.
ExperimentConfig tiny_config(const fs::path& out_dir) {
    ExperimentConfig cfg;
    cfg.seed = 5;
    cfg.out_dir = out_dir.string();
    cfg.data.scene = synth::low_clutter_preset(6);
    cfg.data.scene.seed = 77;
    cfg.data.n_train_images = 10;
    cfg.data.n_eval_images = 6;
    cfg.split_indices = {0};
    cfg.conditions = {{"none", 1.0}};
    cfg.train.epochs = 0;
    cfg.eval.n_repetitions = 2;
    return cfg;
}

}  // namespace

TEST_CASE("experiment config parses sections, overrides and conditions") {
    toml::Table t = toml::parse(R"(seed = 9
out_dir = "runs/demo"

[dataset]
preset = "high_clutter"
n_categories = 16
n_train_images = 30
n_eval_images = 12
noise = 0.1
scene_seed = 4

[split]
n_splits = 4
indices = [0, 2]

[conditions]
modes = ["none", "category_fraction"]
fractions = [0.1, 0.3]

[train]
epochs = 3
extractor_mode = "trained"

[eval]
n_repetitions = 4
k_shots = 5
)");
    ExperimentConfig cfg = experiment_config_from_toml(t);
    CHECK(cfg.seed == 9);
    CHECK(cfg.out_dir == "runs/demo");
    CHECK(cfg.data.scene.n_categories == 16);
    // Preset fields carried over, explicit keys override.
    CHECK(cfg.data.scene.canvas == synth::high_clutter_preset(16).canvas);
    CHECK(cfg.data.scene.noise == 0.1);
    CHECK(cfg.data.scene.seed == 4);
    CHECK(cfg.data.n_train_images == 30);
    CHECK(cfg.split_indices == std::vector<int>{0, 2});
    REQUIRE(cfg.conditions.size() == 3);  // none collapses the fraction axis
    CHECK(cfg.conditions[0].mode == "none");
    CHECK(cfg.conditions[1].mode == "category_fraction");
    CHECK(cfg.conditions[1].fraction == 0.1);
    CHECK(cfg.conditions[2].fraction == 0.3);
    CHECK(cfg.train.epochs == 3);
    CHECK(cfg.train.extractor_mode == "trained");
    CHECK(cfg.eval.n_repetitions == 4);
    CHECK(cfg.k_shots == 5);
    CHECK(cfg.eval.k_shots == 5);

    CHECK_THROWS_AS(experiment_config_from_toml(toml::parse("schema_version = 2\n")),
                    ConfigError);
    CHECK_THROWS_AS(
        experiment_config_from_toml(toml::parse("[dataset]\npreset = \"bogus\"\n")),
        ConfigError);
    CHECK_THROWS_AS(
        experiment_config_from_toml(toml::parse("[dataset]\nsource = \"http\"\n")),
        ConfigError);
    CHECK_THROWS_AS(
        experiment_config_from_toml(toml::parse("[conditions]\nmodes = [\"sideways\"]\n")),
        ConfigError);
}

TEST_CASE("experiment config survives a toml round trip") {
    ExperimentConfig cfg = tiny_config("runs/x");
    cfg.conditions = {{"none", 1.0}, {"category_fraction", 0.25}, {"category_fraction", 0.5}};
    std::string text = toml::emit(experiment_config_to_toml(cfg));
    ExperimentConfig back = experiment_config_from_toml(toml::parse(text));
    CHECK(toml::emit(experiment_config_to_toml(back)) == text);
    CHECK(back.seed == cfg.seed);
    CHECK(back.data.scene == cfg.data.scene);
    CHECK(back.split_indices == cfg.split_indices);
    REQUIRE(back.conditions.size() == cfg.conditions.size());
    for (std::size_t i = 0; i < cfg.conditions.size(); ++i) {
        CHECK(back.conditions[i].mode == cfg.conditions[i].mode);
        CHECK(back.conditions[i].fraction == cfg.conditions[i].fraction);
    }
}

TEST_CASE("experiment config validation flags bad values") {
    ExperimentConfig cfg = tiny_config("runs/x");
    CHECK_NOTHROW(validate_experiment_config(cfg));
    ExperimentConfig bad = cfg;
    bad.out_dir.clear();
    CHECK_THROWS_AS(validate_experiment_config(bad), ConfigError);
    bad = cfg;
    bad.conditions.clear();
    CHECK_THROWS_AS(validate_experiment_config(bad), ConfigError);
    bad = cfg;
    bad.conditions = {{"category_fraction", 0.0}};
    CHECK_THROWS_AS(validate_experiment_config(bad), ConfigError);
    bad = cfg;
    bad.eval.n_repetitions = 0;
    CHECK_THROWS_AS(validate_experiment_config(bad), ConfigError);
    bad = cfg;
    bad.data.n_eval_images = 0;
    CHECK_THROWS_AS(validate_experiment_config(bad), ConfigError);
}

TEST_CASE("fnv1a matches the published test vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("condition directories name the mode and fraction") {
    CHECK(condition_dir_name({"none", 1.0}) == "full");
    CHECK(condition_dir_name({"category_fraction", 0.3}) == "category_fraction_f0.30");
    CHECK(condition_dir_name({"instance_matched_all", 0.25}) == "instance_matched_all_f0.25");
}

TEST_CASE("cell results round trip through json") {
    EvalResult r;
    r.train_ap = 0.625;
    r.heldout_ap = 0.1875;
    r.n_train_categories = 3;
    r.n_heldout_categories = 2;
    r.per_category_ap = {{3, 0.25}, {17, 1.0}};
    r.categories_without_gt = {9};
    r.n_non_exhaustive_pairs = 2;
    r.n_dropped_non_exhaustive = 1;

    RunCell cell = eval_result_from_json(eval_result_json(r, 1, 4));
    CHECK(cell.split_index == 1);
    CHECK(cell.repetition == 4);
    CHECK(cell.result.train_ap == r.train_ap);
    CHECK(cell.result.heldout_ap == r.heldout_ap);
    CHECK(cell.result.per_category_ap == r.per_category_ap);
    CHECK(cell.result.categories_without_gt == r.categories_without_gt);
    CHECK(cell.result.n_non_exhaustive_pairs == 2);
    CHECK(cell.result.n_dropped_non_exhaustive == 1);

    CHECK_THROWS_AS(eval_result_from_json("{\"split_index\": 0}"), ParseError);
}

TEST_CASE("curves csv lists one row per condition and group") {
    std::vector<CurvePoint> curves{{"none", 1.0, "train", 42.5, 1.25},
                                   {"none", 1.0, "heldout", 30.0, 2.0}};
    std::string csv = curves_csv(curves);
    CHECK(csv.rfind("mode,fraction,group,ap50,ci95\n", 0) == 0);
    CHECK(csv.find("none,1.00,train,42.5,1.25\n") != std::string::npos);
    CHECK(csv.find("none,1.00,heldout,30,2\n") != std::string::npos);
}

TEST_CASE("detector runner caching matches direct detection") {
    synth::SceneConfig scfg = synth::low_clutter_preset(6);
    scfg.seed = 3;
    Dataset ds = synth::generate_dataset(scfg, 8);
    auto splits = make_splits(ds.categories, {});
    DetectorModel model;
    {
        TrainConfig tc;
        tc.seed = 2;
        model = init_model(tc);
    }
    EvalQueryOptions opts;
    auto queries = build_eval_queries(ds, splits[0], opts, 11);

    DetectorRunner runner(ds, model);
    std::vector<Detection> cached = runner.run_queries(queries);

    std::vector<Detection> direct;
    DatasetIndex index(ds);
    for (const auto& q : queries) {
        auto dets = detect(*index.image(q.image_id)->pixels, q.references, model, q.image_id,
                           q.category_id);
        direct.insert(direct.end(), dets.begin(), dets.end());
    }
    CHECK(cached == direct);
}

TEST_CASE("experiments run, resume and re-aggregate byte-identically") {
    fs::path dir_a = fresh_dir("exp_a");
    ExperimentConfig cfg = tiny_config(dir_a);
    ReportBundle first = run_experiment(cfg);

    REQUIRE(first.per_condition.size() == 1);
    CHECK(first.per_condition[0].first == "full");
    CHECK(fs::exists(dir_a / "resolved_config.toml"));
    CHECK(fs::exists(dir_a / "splits.json"));
    CHECK(fs::exists(dir_a / "provenance.json"));
    CHECK(fs::exists(dir_a / "gap_report.json"));
    fs::path cell_dir = dir_a / "cells" / "full" / "split_0";
    CHECK(fs::exists(cell_dir / "model.bin"));
    for (int rep = 0; rep < 2; ++rep) {
        fs::path rep_dir = cell_dir / ("rep_" + std::to_string(rep));
        CHECK(fs::exists(rep_dir / "result.json"));
        CHECK(fs::exists(rep_dir / "queries.jsonl"));
        CHECK(fs::exists(rep_dir / "detections.jsonl"));
    }
    std::string curves_a = slurp(dir_a / "curves.csv");
    std::string report_a = slurp(dir_a / "gap_report.json");

    // Fresh directory, same config: identical bytes.
    fs::path dir_b = fresh_dir("exp_b");
    ExperimentConfig cfg_b = tiny_config(dir_b);
    run_experiment(cfg_b);
    CHECK(slurp(dir_b / "curves.csv") == curves_a);
    CHECK(slurp(dir_b / "gap_report.json") == report_a);

    // Resume: drop one repetition result and the summary, keep the model.
    fs::remove(cell_dir / "rep_1" / "result.json");
    fs::remove(dir_a / "curves.csv");
    ReportBundle resumed = run_experiment(cfg);
    CHECK(slurp(dir_a / "curves.csv") == curves_a);
    CHECK(slurp(dir_a / "gap_report.json") == report_a);
    CHECK(resumed.per_condition[0].second.train_ap ==
          first.per_condition[0].second.train_ap);

    // Independent re-aggregation from the stored cells reproduces the report.
    std::vector<RunCell> cells;
    for (int rep = 0; rep < 2; ++rep)
        cells.push_back(eval_result_from_json(
            slurp(cell_dir / ("rep_" + std::to_string(rep)) / "result.json")));
    GapReport rebuilt = gap_report(cells);
    CHECK(gap_report_json(rebuilt) == slurp(dir_a / "cells" / "full" / "gap_report.json"));
}

TEST_CASE("an output directory refuses a different config") {
    fs::path dir = fresh_dir("exp_conflict");
    ExperimentConfig cfg = tiny_config(dir);
    run_experiment(cfg);
    ExperimentConfig other = cfg;
    other.seed = 6;
    CHECK_THROWS_WITH_AS(run_experiment(other), doctest::Contains("different config"),
                         ConfigError);
}

TEST_CASE("worker pools produce the same bytes as serial runs") {
    ExperimentConfig serial = tiny_config(fresh_dir("exp_serial"));
    serial.split_indices = {0, 1};
    run_experiment(serial);

    ExperimentConfig pooled = tiny_config(fresh_dir("exp_pooled"));
    pooled.split_indices = {0, 1};
    pooled.workers = 2;
    run_experiment(pooled);

    // workers and out_dir differ in the resolved config, but results must not.
    CHECK(slurp(fs::path(pooled.out_dir) / "curves.csv") ==
          slurp(fs::path(serial.out_dir) / "curves.csv"));
    CHECK(slurp(fs::path(pooled.out_dir) / "gap_report.json") ==
          slurp(fs::path(serial.out_dir) / "gap_report.json"));
}
