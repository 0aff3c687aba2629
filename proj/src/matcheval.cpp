#include "osdbench/matcheval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"
#include "osdbench/common.hpp"

namespace osd {

double iou(const BoundingBox& a, const BoundingBox& b) {
    if (!a.valid() || !b.valid())
        throw ConfigError("iou: degenerate box");
    double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
    double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
    double inter = ix * iy;
    double uni = a.area() + b.area() - inter;
    return inter / uni;
}

namespace {

// Crowd regions use intersection over detection area (COCO ignore semantics).
double crowd_overlap(const BoundingBox& det, const BoundingBox& crowd) {
    double ix = std::max(0.0, std::min(det.x2(), crowd.x2()) - std::max(det.x, crowd.x));
    double iy = std::max(0.0, std::min(det.y2(), crowd.y2()) - std::max(det.y, crowd.y));
    return ix * iy / det.area();
}

std::vector<std::size_t> sort_by_score_desc(const std::vector<Detection>& dets) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;
    });
    return order;
}

// Cumulative (tp, fp) flags in descending score order.
struct MatchOutcome {
    std::vector<int> tp;      // per kept detection, score-sorted
    std::vector<int> fp;
    std::int64_t n_positive;  // non-crowd ground truth count
};

MatchOutcome greedy_match(const std::vector<Detection>& detections,
                          const std::vector<InstanceAnnotation>& ground_truth,
                          double iou_threshold) {
    MatchOutcome out;
    out.n_positive = 0;
    for (const auto& gt : ground_truth)
        if (!gt.is_crowd) ++out.n_positive;

    std::vector<bool> matched(ground_truth.size(), false);
    for (std::size_t idx : sort_by_score_desc(detections)) {
        const Detection& det = detections[idx];
        double best = 0.0;
        std::ptrdiff_t best_gt = -1;
        for (std::size_t g = 0; g < ground_truth.size(); ++g) {
            const auto& gt = ground_truth[g];
            if (gt.is_crowd || matched[g] || gt.image_id != det.image_id) continue;
            double v = iou(det.box, gt.bbox);
            if (v > best) {
                best = v;
                best_gt = static_cast<std::ptrdiff_t>(g);
            }
        }
        if (best_gt >= 0 && best >= iou_threshold) {
            matched[static_cast<std::size_t>(best_gt)] = true;
            out.tp.push_back(1);
            out.fp.push_back(0);
            continue;
        }
        bool ignored = false;
        for (const auto& gt : ground_truth) {
            if (!gt.is_crowd || gt.image_id != det.image_id) continue;
            if (crowd_overlap(det.box, gt.bbox) >= iou_threshold) {
                ignored = true;
                break;
            }
        }
        if (!ignored) {
            out.tp.push_back(0);
            out.fp.push_back(1);
        }
    }
    return out;
}

double ap_from_curve(const MatchOutcome& m, const EvalConfig& cfg) {
    std::vector<double> recall, precision;
    std::int64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < m.tp.size(); ++i) {
        tp += m.tp[i];
        fp += m.fp[i];
        recall.push_back(static_cast<double>(tp) / static_cast<double>(m.n_positive));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    // Precision envelope: max precision at recall >= r.
    std::vector<double> envelope = precision;
    for (std::size_t i = envelope.size(); i-- > 1;)
        envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);

    if (cfg.all_point_interpolation) {
        double ap = 0.0;
        double prev_recall = 0.0;
        for (std::size_t i = 0; i < recall.size(); ++i) {
            ap += (recall[i] - prev_recall) * envelope[i];
            prev_recall = recall[i];
        }
        return ap;
    }
    double sum = 0.0;
    const int n = cfg.recall_points;
    for (int j = 0; j < n; ++j) {
        double r = static_cast<double>(j) / static_cast<double>(n - 1);
        // First curve point with recall >= r carries the envelope value.
        double p = 0.0;
        for (std::size_t i = 0; i < recall.size(); ++i) {
            if (recall[i] >= r - 1e-12) {
                p = envelope[i];
                break;
            }
        }
        sum += p;
    }
    return sum / static_cast<double>(n);
}

}  // namespace

std::optional<double> average_precision(const std::vector<Detection>& detections,
                                        const std::vector<InstanceAnnotation>& ground_truth,
                                        const EvalConfig& cfg) {
    if (cfg.iou_threshold <= 0.0 || cfg.iou_threshold >= 1.0)
        throw ConfigError("average_precision: iou_threshold must be in (0, 1)");
    if (cfg.recall_points < 2)
        throw ConfigError("average_precision: recall_points must be >= 2");
    MatchOutcome m = greedy_match(detections, ground_truth, cfg.iou_threshold);
    if (m.n_positive == 0) return std::nullopt;
    if (m.tp.empty()) return 0.0;
    return ap_from_curve(m, cfg);
}

EvalResult evaluate_run(const std::vector<Detection>& detector_outputs,
                        const std::vector<EvalQuery>& queries, const Dataset& ds,
                        const CategorySplit& split, const EvalConfig& cfg) {
    // Queried (category -> images) map; also the protocol-violation check set.
    std::map<std::int64_t, std::set<std::int64_t>> queried_images;
    EvalResult result;
    auto flagged_non_exhaustive = [&](std::int64_t image_id, std::int64_t cat) {
        if (!ds.not_exhaustive_map) return false;
        auto it = ds.not_exhaustive_map->find(image_id);
        return it != ds.not_exhaustive_map->end() && it->second.count(cat) > 0;
    };
    std::set<std::pair<std::int64_t, std::int64_t>> dropped_pairs;
    for (const auto& q : queries) {
        if (flagged_non_exhaustive(q.image_id, q.category_id)) {
            ++result.n_non_exhaustive_pairs;
            if (cfg.drop_non_exhaustive) {
                ++result.n_dropped_non_exhaustive;
                dropped_pairs.insert({q.image_id, q.category_id});
                continue;
            }
        }
        queried_images[q.category_id].insert(q.image_id);
    }

    for (const auto& det : detector_outputs) {
        if (dropped_pairs.count({det.image_id, det.category_id})) continue;
        auto it = queried_images.find(det.category_id);
        if (it == queried_images.end() || !it->second.count(det.image_id))
            throw ProtocolError("detection for never-queried pair (image " +
                                std::to_string(det.image_id) + ", category " +
                                std::to_string(det.category_id) + ")");
    }

    std::map<std::int64_t, std::vector<InstanceAnnotation>> gt_by_category;
    for (const auto& ann : ds.annotations) {
        auto it = queried_images.find(ann.category_id);
        if (it != queried_images.end() && it->second.count(ann.image_id))
            gt_by_category[ann.category_id].push_back(ann);
    }
    std::map<std::int64_t, std::vector<Detection>> dets_by_category;
    for (const auto& det : detector_outputs) {
        if (dropped_pairs.count({det.image_id, det.category_id})) continue;
        dets_by_category[det.category_id].push_back(det);
    }

    double train_sum = 0.0, heldout_sum = 0.0;
    for (const auto& [cat, images] : queried_images) {
        std::optional<double> ap =
            average_precision(dets_by_category[cat], gt_by_category[cat], cfg);
        if (!ap) {
            result.categories_without_gt.push_back(cat);
            continue;
        }
        result.per_category_ap[cat] = *ap;
        if (split.train_category_ids.count(cat)) {
            train_sum += *ap;
            ++result.n_train_categories;
        } else if (split.heldout_category_ids.count(cat)) {
            heldout_sum += *ap;
            ++result.n_heldout_categories;
        }
    }
    result.train_ap = result.n_train_categories ? train_sum / result.n_train_categories : 0.0;
    result.heldout_ap =
        result.n_heldout_categories ? heldout_sum / result.n_heldout_categories : 0.0;
    return result;
}

namespace {

struct MeanCi {
    double mean = 0.0;
    double ci95 = 0.0;
};

MeanCi t_interval(const std::vector<double>& values) {
    MeanCi out;
    const auto n = values.size();
    if (n == 0) return out;
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
    if (n == 1) return out;  // width degenerate to 0
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    double sd = std::sqrt(ss / static_cast<double>(n - 1));
    boost::math::students_t_distribution<double> dist(static_cast<double>(n - 1));
    double t = boost::math::quantile(dist, 0.975);
    out.ci95 = t * sd / std::sqrt(static_cast<double>(n));
    return out;
}

}  // namespace

GapReport gap_report(const std::vector<RunCell>& cells) {
    if (cells.empty()) throw ConfigError("gap_report: no cells");

    // split -> repetition -> result (sorted keys make the aggregation
    // independent of cell order).
    std::map<int, std::map<int, const EvalResult*>> grid;
    for (const auto& cell : cells) {
        auto& slot = grid[cell.split_index][cell.repetition];
        if (slot) throw ConfigError("gap_report: duplicate cell");
        slot = &cell.result;
    }

    // Mean over splits of per-split repetition means.
    double train_total = 0.0, heldout_total = 0.0;
    for (const auto& [split_idx, reps] : grid) {
        double t = 0.0, h = 0.0;
        for (const auto& [rep, res] : reps) {
            t += res->train_ap;
            h += res->heldout_ap;
        }
        train_total += t / static_cast<double>(reps.size());
        heldout_total += h / static_cast<double>(reps.size());
    }
    const auto n_splits = grid.size();

    // CI over per-repetition means (each averaged over splits).
    std::map<int, std::vector<double>> train_by_rep, heldout_by_rep;
    for (const auto& [split_idx, reps] : grid) {
        for (const auto& [rep, res] : reps) {
            train_by_rep[rep].push_back(res->train_ap);
            heldout_by_rep[rep].push_back(res->heldout_ap);
        }
    }
    std::vector<double> rep_train_means, rep_heldout_means;
    for (const auto& [rep, values] : train_by_rep)
        rep_train_means.push_back(
            std::accumulate(values.begin(), values.end(), 0.0) / values.size());
    for (const auto& [rep, values] : heldout_by_rep)
        rep_heldout_means.push_back(
            std::accumulate(values.begin(), values.end(), 0.0) / values.size());

    GapReport report;
    report.n_splits = static_cast<int>(n_splits);
    report.n_repetitions = static_cast<int>(rep_train_means.size());
    report.train_ap = 100.0 * train_total / static_cast<double>(n_splits);
    report.heldout_ap = 100.0 * heldout_total / static_cast<double>(n_splits);
    report.delta = report.train_ap - report.heldout_ap;
    if (report.train_ap != 0.0) {
        report.relative = report.heldout_ap / report.train_ap;
        report.relative_defined = true;
    }
    report.ci95_train = 100.0 * t_interval(rep_train_means).ci95;
    report.ci95_heldout = 100.0 * t_interval(rep_heldout_means).ci95;
    return report;
}

void save_detections_jsonl(const std::string& path, const std::vector<Detection>& detections) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    for (const auto& det : detections) {
        nlohmann::ordered_json j;
        j["image_id"] = det.image_id;
        j["category_id"] = det.category_id;
        j["bbox"] = {det.box.x, det.box.y, det.box.w, det.box.h};
        j["score"] = det.score;
        out << j.dump() << "\n";
    }
}

std::vector<Detection> load_detections_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open: " + path);
    std::vector<Detection> dets;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            Detection det;
            det.image_id = j.at("image_id").get<std::int64_t>();
            det.category_id = j.at("category_id").get<std::int64_t>();
            const auto& bb = j.at("bbox");
            det.box = {bb.at(0).get<double>(), bb.at(1).get<double>(), bb.at(2).get<double>(),
                       bb.at(3).get<double>()};
            det.score = j.at("score").get<double>();
            dets.push_back(det);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return dets;
}

std::string gap_report_json(const GapReport& report) {
    nlohmann::ordered_json j;
    j["train_ap"] = report.train_ap;
    j["heldout_ap"] = report.heldout_ap;
    j["delta"] = report.delta;
    if (report.relative_defined)
        j["relative"] = report.relative;
    else
        j["relative"] = nullptr;
    j["ci95_train"] = report.ci95_train;
    j["ci95_heldout"] = report.ci95_heldout;
    j["n_splits"] = report.n_splits;
    j["n_repetitions"] = report.n_repetitions;
    return j.dump(2) + "\n";
}

std::string cells_csv(const std::vector<RunCell>& cells, const GapReport& aggregate) {
    std::vector<const RunCell*> sorted;
    for (const auto& cell : cells) sorted.push_back(&cell);
    std::sort(sorted.begin(), sorted.end(), [](const RunCell* a, const RunCell* b) {
        return std::tie(a->split_index, a->repetition) < std::tie(b->split_index, b->repetition);
    });
    std::ostringstream out;
    out << "split,repetition,group,ap50\n";
    out.precision(17);
    for (const RunCell* cell : sorted) {
        out << cell->split_index << "," << cell->repetition << ",train,"
            << 100.0 * cell->result.train_ap << "\n";
        out << cell->split_index << "," << cell->repetition << ",heldout,"
            << 100.0 * cell->result.heldout_ap << "\n";
    }
    out << "aggregate,,train," << aggregate.train_ap << "\n";
    out << "aggregate,,heldout," << aggregate.heldout_ap << "\n";
    return out.str();
}

}  // namespace osd
