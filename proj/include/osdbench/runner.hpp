#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "osdbench/annotations.hpp"
#include "osdbench/episodes.hpp"
#include "osdbench/matcheval.hpp"
#include "osdbench/protocol.hpp"
#include "osdbench/siamdet.hpp"
#include "osdbench/synthworld.hpp"
#include "osdbench/tomlmini.hpp"

namespace osd {

inline constexpr char kToolkitVersion[] = "0.1.0";

struct DatasetSource {
    std::string source = "synth";  // "synth" or "file"
    synth::SceneConfig scene;      // synth mode
    std::int64_t n_train_images = 120;
    std::int64_t n_eval_images = 80;
    std::string train_path, eval_path, raster_dir;  // file mode
};

// One benchmark condition: a training-set construction rule.
struct ExperimentCondition {
    std::string mode = "none";  // none | category_fraction | instance_matched_subset |
                                // instance_matched_all
    double fraction = 1.0;
};

struct ExperimentConfig {
    int schema_version = 1;
    std::uint64_t seed = 1;
    int workers = 1;
    std::string out_dir;
    DatasetSource data;
    SplitSpec split_spec;
    std::vector<int> split_indices;  // empty = all splits
    std::vector<ExperimentCondition> conditions;
    TrainConfig train;
    EvalConfig eval;
    EpisodeConfig crop;
    int k_shots = 1;
    bool empty_refs = false;
};

ExperimentConfig experiment_config_from_toml(const toml::Table& table);
toml::Table experiment_config_to_toml(const ExperimentConfig& cfg);
void validate_experiment_config(const ExperimentConfig& cfg);

std::uint64_t fnv1a64(const std::string& bytes);
std::string condition_dir_name(const ExperimentCondition& cond);

struct CurvePoint {
    std::string mode;
    double fraction = 1.0;
    std::string group;  // "train" or "heldout"
    double ap50 = 0.0;  // percent
    double ci95 = 0.0;
};

struct ReportBundle {
    std::vector<std::pair<std::string, GapReport>> per_condition;  // (dir name, report)
    std::vector<CurvePoint> curves;
    std::string provenance_json;
};

std::string curves_csv(const std::vector<CurvePoint>& curves);

// Per-cell result serialization (stored beside the reports so every aggregate
// number can be recomputed independently).
std::string eval_result_json(const EvalResult& result, int split_index, int repetition);
RunCell eval_result_from_json(const std::string& text);

// Runs all queries against one model, caching per-image features and
// per-reference embeddings (valid because the model is fixed here).
class DetectorRunner {
public:
    DetectorRunner(const Dataset& eval_ds, const DetectorModel& model);
    std::vector<Detection> run_queries(const std::vector<EvalQuery>& queries);

private:
    const Dataset* ds_;
    const DetectorModel* model_;
    DatasetIndex index_;
    std::map<std::int64_t, FeatureMap> features_;
    std::map<std::string, std::vector<double>> embeddings_;
};

// Materializes the train-scene pool and the eval set for a config (synth
// generation or file loading).
void load_experiment_datasets(const ExperimentConfig& cfg, Dataset& train_base,
                              Dataset& eval_ds);

// Full pipeline: per (condition, split) build the training set, train (or load
// a cached model), evaluate n_repetitions query draws, then aggregate gap
// reports and curves. Existing per-cell results under out_dir are reused, and
// reruns produce byte-identical reports.
ReportBundle run_experiment(const ExperimentConfig& cfg);

}  // namespace osd
