#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "osdbench/annotations.hpp"
#include "osdbench/episodes.hpp"
#include "osdbench/protocol.hpp"

namespace osd {

// A scored box attributed to the query category of the (image, category) pair
// it answers.
struct Detection {
    std::int64_t image_id = 0;
    std::int64_t category_id = 0;
    BoundingBox box;
    double score = 0.0;

    bool operator==(const Detection&) const = default;
};

struct EvalConfig {
    double iou_threshold = 0.5;
    int n_repetitions = 5;
    int k_shots = 1;
    int recall_points = 101;
    // Area-under-PR with the precision envelope instead of fixed recall levels.
    bool all_point_interpolation = false;
    // Drop (image, category) query pairs flagged non-exhaustive in the dataset.
    bool drop_non_exhaustive = false;
};

struct EvalResult {
    std::map<std::int64_t, double> per_category_ap;  // defined APs only, in [0, 1]
    std::vector<std::int64_t> categories_without_gt; // excluded from group means
    double train_ap = 0.0;    // unweighted mean over contributing train categories
    double heldout_ap = 0.0;  // same for held-out categories
    int n_train_categories = 0;
    int n_heldout_categories = 0;
    std::int64_t n_non_exhaustive_pairs = 0;   // query pairs flagged non-exhaustive
    std::int64_t n_dropped_non_exhaustive = 0; // of those, dropped (when configured)
};

// %AP50 figures aggregated over splits and repetitions.
struct GapReport {
    double train_ap = 0.0;
    double heldout_ap = 0.0;
    double delta = 0.0;            // train_ap - heldout_ap
    double relative = 0.0;         // heldout_ap / train_ap, valid iff relative_defined
    bool relative_defined = false;
    double ci95_train = 0.0;       // +- half-width over repetition means
    double ci95_heldout = 0.0;
    int n_splits = 0;
    int n_repetitions = 0;
};

// One evaluated (split, repetition) cell.
struct RunCell {
    int split_index = 0;
    int repetition = 0;
    EvalResult result;
};

double iou(const BoundingBox& a, const BoundingBox& b);

// Greedy best-IoU matching in descending score order (ties keep input order),
// each ground truth matched at most once. Crowd boxes are ignore regions:
// unmatched detections overlapping a crowd region are neither TP nor FP.
// Returns nullopt when there is no (non-crowd) ground truth.
std::optional<double> average_precision(const std::vector<Detection>& detections,
                                        const std::vector<InstanceAnnotation>& ground_truth,
                                        const EvalConfig& cfg);

// Per-category AP over queried images only; group means over the split's
// train / held-out categories. Detections for never-issued queries throw.
EvalResult evaluate_run(const std::vector<Detection>& detector_outputs,
                        const std::vector<EvalQuery>& queries, const Dataset& ds,
                        const CategorySplit& split, const EvalConfig& cfg);

// Mean over splits of per-split repetition means; CI95 via Student-t over
// per-repetition means (n-1 dof, width 0 when n_repetitions == 1).
GapReport gap_report(const std::vector<RunCell>& cells);

// JSONL {image_id, category_id, bbox:[x,y,w,h], score}.
void save_detections_jsonl(const std::string& path, const std::vector<Detection>& detections);
std::vector<Detection> load_detections_jsonl(const std::string& path);

std::string gap_report_json(const GapReport& report);
// One row per split x repetition x group plus an aggregate row per group.
std::string cells_csv(const std::vector<RunCell>& cells, const GapReport& aggregate);

}  // namespace osd
