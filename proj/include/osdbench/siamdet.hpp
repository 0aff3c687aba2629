#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "osdbench/annotations.hpp"
#include "osdbench/episodes.hpp"
#include "osdbench/matcheval.hpp"
#include "osdbench/raster.hpp"

namespace osd {

// H x W cell grid with C channels, HWC layout, stride pixels per cell.
struct FeatureMap {
    int h = 0, w = 0, c = 0;
    int stride = 1;
    std::vector<double> data;

    double& at(int y, int x, int ch) {
        return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }
    double at(int y, int x, int ch) const {
        return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }
};

// Two bias-free conv layers (5x5/2 then 3x3/2, ReLU after each, stride 4
// total). No biases means a zero raster maps to exactly zero features, so all
// empty references share one embedding. The head is affine over
// [pooled image features | pooled |image - ref| | window-size one-hot].
struct DetectorModel {
    int c1 = 8;
    int c2 = 16;
    int reference_resolution = 64;
    std::vector<double> conv1;   // [c1][1][5][5]
    std::vector<double> conv2;   // [c2][c1][3][3]
    std::vector<double> head_w;  // [2*c2 + window_set.size()]
    double head_b = 0.0;
    double score_threshold = 0.25;
    double nms_iou = 0.5;
    std::vector<int> window_set = {3, 5, 7};  // square side in cells
    int max_detections = 40;
    std::string extractor_mode = "fixed_random";
};

struct TrainConfig {
    double learning_rate = 0.2;
    int epochs = 10;
    int batch_episodes = 8;
    int negative_ratio = 3;  // max negatives per positive window
    std::uint64_t seed = 1;
    std::string extractor_mode = "fixed_random";  // or "trained"
    int episodes_per_epoch = 0;                   // 0 = one per eligible image
};

struct TrainResult {
    DetectorModel model;
    std::vector<double> epoch_losses;
};

struct WindowBox {
    int y0 = 0, x0 = 0;  // top-left cell
    int size_index = 0;  // into window_set
    BoundingBox box;     // pixel coordinates
};

void validate_model(const DetectorModel& model);
DetectorModel init_model(const TrainConfig& cfg);

FeatureMap extract_features(const Raster& pixels, const DetectorModel& model);

// Global average pool of the crop's feature map; k-shot embeddings are the
// mean of per-crop embeddings.
std::vector<double> embed_reference(const ReferenceCrop& crop, const DetectorModel& model);
std::vector<double> embed_references(const std::vector<ReferenceCrop>& crops,
                                     const DetectorModel& model);

// [image features (C) | elementwise |image - ref| (C)] at every cell.
FeatureMap match_features(const FeatureMap& img, const std::vector<double>& ref);

std::vector<WindowBox> enumerate_windows(int h, int w, int stride,
                                         const std::vector<int>& window_set);

// Greedy suppression: keep by descending score, drop overlap > iou_threshold.
// Ties break on (y, x, w) so output is deterministic.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

std::vector<Detection> detect_from_features(const FeatureMap& features,
                                            const std::vector<double>& ref_embedding,
                                            const DetectorModel& model, std::int64_t image_id,
                                            std::int64_t category_id);
std::vector<Detection> detect(const Raster& pixels, const std::vector<ReferenceCrop>& references,
                              const DetectorModel& model, std::int64_t image_id,
                              std::int64_t category_id);

// Flat parameter gradients in the same layout as the model tensors.
struct ModelGrads {
    std::vector<double> conv1, conv2, head_w;
    double head_b = 0.0;
};

// Mean per-window logistic loss over a batch of episodes, with analytic
// gradients. Window selection (positives plus subsampled negatives) is a pure
// function of (selection_seed, episode), so repeated calls see identical
// batches; that makes finite-difference checks exact. Pass train_extractor to
// also fill conv gradients.
double episode_batch_loss(const DetectorModel& model, const std::vector<TrainingEpisode>& batch,
                          int negative_ratio, std::uint64_t selection_seed,
                          bool train_extractor, ModelGrads* grads);

TrainResult train_detector(const Dataset& ds, EpisodeSampler& sampler, const TrainConfig& cfg);

// Training-free probe head: score = sigmoid(-sharpness * sum of pooled L1
// difference channels), so the best-matching window ranks first.
DetectorModel make_matching_head_model(DetectorModel base, double sharpness);

void save_model(const std::string& path, const DetectorModel& model);
DetectorModel load_model(const std::string& path);
void save_loss_trace(const std::string& path, const std::vector<double>& losses);

}  // namespace osd
