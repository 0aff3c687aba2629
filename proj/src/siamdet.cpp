#include "osdbench/siamdet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "osdbench/common.hpp"

namespace osd {

namespace {

constexpr int kConv1K = 5, kConv1Stride = 2, kConv1Pad = 2;
constexpr int kConv2K = 3, kConv2Stride = 2, kConv2Pad = 1;
constexpr int kMinRaster = 16;

int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

// out[oy][ox][oc] = relu(sum_ic/ky/kx in * w); no bias terms anywhere.
FeatureMap conv_forward(const FeatureMap& in, const std::vector<double>& weights, int cout,
                        int k, int stride, int pad) {
    FeatureMap out;
    out.h = conv_out_dim(in.h, k, stride, pad);
    out.w = conv_out_dim(in.w, k, stride, pad);
    out.c = cout;
    out.stride = in.stride * stride;
    out.data.assign(static_cast<std::size_t>(out.h) * out.w * cout, 0.0);
    for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox) {
            for (int oc = 0; oc < cout; ++oc) {
                double acc = 0.0;
                for (int ic = 0; ic < in.c; ++ic) {
                    for (int ky = 0; ky < k; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= in.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= in.w) continue;
                            acc += in.at(iy, ix, ic) *
                                   weights[((static_cast<std::size_t>(oc) * in.c + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out.at(oy, ox, oc) = acc > 0.0 ? acc : 0.0;
            }
        }
    }
    return out;
}

// Backward through conv+relu. d_out is modified in place by the relu mask.
// d_in may be null when the input gradient is not needed (first layer).
void conv_backward(const FeatureMap& in, const FeatureMap& out, const std::vector<double>& weights,
                   int k, int stride, int pad, FeatureMap& d_out, std::vector<double>& d_weights,
                   FeatureMap* d_in) {
    for (std::size_t i = 0; i < d_out.data.size(); ++i)
        if (out.data[i] <= 0.0) d_out.data[i] = 0.0;
    for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox) {
            for (int oc = 0; oc < out.c; ++oc) {
                double g = d_out.at(oy, ox, oc);
                if (g == 0.0) continue;
                for (int ic = 0; ic < in.c; ++ic) {
                    for (int ky = 0; ky < k; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= in.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= in.w) continue;
                            std::size_t wi =
                                ((static_cast<std::size_t>(oc) * in.c + ic) * k + ky) * k + kx;
                            d_weights[wi] += g * in.at(iy, ix, ic);
                            if (d_in) d_in->at(iy, ix, ic) += g * weights[wi];
                        }
                    }
                }
            }
        }
    }
}

FeatureMap raster_to_map(const Raster& pixels) {
    FeatureMap m;
    m.h = pixels.height;
    m.w = pixels.width;
    m.c = 1;
    m.stride = 1;
    m.data.resize(pixels.data.size());
    for (std::size_t i = 0; i < pixels.data.size(); ++i)
        m.data[i] = static_cast<double>(pixels.data[i]);
    return m;
}

struct Forward {
    FeatureMap in, a1, a2;
};

Forward run_forward(const Raster& pixels, const DetectorModel& model) {
    if (pixels.width < kMinRaster || pixels.height < kMinRaster)
        throw ConfigError("extract_features: raster smaller than " + std::to_string(kMinRaster) +
                          " px");
    Forward f;
    f.in = raster_to_map(pixels);
    f.a1 = conv_forward(f.in, model.conv1, model.c1, kConv1K, kConv1Stride, kConv1Pad);
    f.a2 = conv_forward(f.a1, model.conv2, model.c2, kConv2K, kConv2Stride, kConv2Pad);
    return f;
}

FeatureMap zero_like(const FeatureMap& m) {
    FeatureMap z = m;
    std::fill(z.data.begin(), z.data.end(), 0.0);
    return z;
}

// Summed-area table per channel for O(1) window sums.
struct Sat {
    int h = 0, w = 0, c = 0;
    std::vector<double> s;  // (h+1) x (w+1) x c

    explicit Sat(const FeatureMap& m) : h(m.h), w(m.w), c(m.c) {
        s.assign(static_cast<std::size_t>(h + 1) * (w + 1) * c, 0.0);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int ch = 0; ch < c; ++ch) {
                    at(y + 1, x + 1, ch) = m.at(y, x, ch) + at(y, x + 1, ch) + at(y + 1, x, ch) -
                                           at(y, x, ch);
                }
            }
        }
    }
    double& at(int y, int x, int ch) {
        return s[(static_cast<std::size_t>(y) * (w + 1) + x) * c + ch];
    }
    double at(int y, int x, int ch) const {
        return s[(static_cast<std::size_t>(y) * (w + 1) + x) * c + ch];
    }
    // Sum over cells [y0, y0+n) x [x0, x0+n).
    double window_sum(int y0, int x0, int n, int ch) const {
        return at(y0 + n, x0 + n, ch) - at(y0, x0 + n, ch) - at(y0 + n, x0, ch) + at(y0, x0, ch);
    }
};

double head_score_z(const DetectorModel& model, const Sat& match_sat, const WindowBox& win,
                    int size) {
    double inv_n = 1.0 / (static_cast<double>(size) * size);
    double z = model.head_b;
    for (int ch = 0; ch < 2 * model.c2; ++ch)
        z += model.head_w[static_cast<std::size_t>(ch)] * inv_n *
             match_sat.window_sum(win.y0, win.x0, size, ch);
    z += model.head_w[static_cast<std::size_t>(2 * model.c2 + win.size_index)];
    return z;
}

}  // namespace

void validate_model(const DetectorModel& model) {
    if (model.c1 < 1 || model.c2 < 1) throw ConfigError("model: channel counts must be >= 1");
    if (model.conv1.size() != static_cast<std::size_t>(model.c1) * kConv1K * kConv1K)
        throw ConfigError("model: conv1 weight count mismatch");
    if (model.conv2.size() != static_cast<std::size_t>(model.c2) * model.c1 * kConv2K * kConv2K)
        throw ConfigError("model: conv2 weight count mismatch");
    if (model.window_set.empty()) throw ConfigError("model: empty window set");
    for (std::size_t i = 0; i < model.window_set.size(); ++i) {
        if (model.window_set[i] < 1) throw ConfigError("model: window sizes must be >= 1");
        if (i > 0 && model.window_set[i] <= model.window_set[i - 1])
            throw ConfigError("model: window set must be strictly ascending");
    }
    if (model.head_w.size() != static_cast<std::size_t>(2 * model.c2) + model.window_set.size())
        throw ConfigError("model: head dimension inconsistent with 2C + window channels");
    if (!(model.score_threshold > 0.0 && model.score_threshold < 1.0))
        throw ConfigError("model: score_threshold must be in (0, 1)");
    if (!(model.nms_iou > 0.0 && model.nms_iou < 1.0))
        throw ConfigError("model: nms_iou must be in (0, 1)");
    if (model.reference_resolution < kMinRaster)
        throw ConfigError("model: reference_resolution too small");
    if (model.max_detections < 1) throw ConfigError("model: max_detections must be >= 1");
    if (model.extractor_mode != "fixed_random" && model.extractor_mode != "trained")
        throw ConfigError("model: unknown extractor_mode " + model.extractor_mode);
}

DetectorModel init_model(const TrainConfig& cfg) {
    DetectorModel m;
    m.extractor_mode = cfg.extractor_mode;
    Rng rng(mix(cfg.seed, 0xD37));
    double s1 = std::sqrt(2.0 / (kConv1K * kConv1K));
    m.conv1.resize(static_cast<std::size_t>(m.c1) * kConv1K * kConv1K);
    for (double& w : m.conv1) w = rng.normal() * s1;
    double s2 = std::sqrt(2.0 / (m.c1 * kConv2K * kConv2K));
    m.conv2.resize(static_cast<std::size_t>(m.c2) * m.c1 * kConv2K * kConv2K);
    for (double& w : m.conv2) w = rng.normal() * s2;
    m.head_w.resize(static_cast<std::size_t>(2 * m.c2) + m.window_set.size());
    for (double& w : m.head_w) w = rng.normal() * 0.01;
    m.head_b = -2.0;
    validate_model(m);
    return m;
}

FeatureMap extract_features(const Raster& pixels, const DetectorModel& model) {
    return run_forward(pixels, model).a2;
}

std::vector<double> embed_reference(const ReferenceCrop& crop, const DetectorModel& model) {
    if (crop.pixels.width != model.reference_resolution ||
        crop.pixels.height != model.reference_resolution)
        throw ConfigError("embed_reference: crop is " + std::to_string(crop.pixels.width) + "x" +
                          std::to_string(crop.pixels.height) + ", expected " +
                          std::to_string(model.reference_resolution));
    FeatureMap f = extract_features(crop.pixels, model);
    std::vector<double> emb(static_cast<std::size_t>(f.c), 0.0);
    for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x)
            for (int ch = 0; ch < f.c; ++ch) emb[static_cast<std::size_t>(ch)] += f.at(y, x, ch);
    double inv = 1.0 / (static_cast<double>(f.h) * f.w);
    for (double& v : emb) v *= inv;
    return emb;
}

std::vector<double> embed_references(const std::vector<ReferenceCrop>& crops,
                                     const DetectorModel& model) {
    if (crops.empty()) throw ConfigError("embed_references: no crops");
    std::vector<double> emb(static_cast<std::size_t>(model.c2), 0.0);
    for (const auto& crop : crops) {
        std::vector<double> e = embed_reference(crop, model);
        for (std::size_t i = 0; i < emb.size(); ++i) emb[i] += e[i];
    }
    for (double& v : emb) v /= static_cast<double>(crops.size());
    return emb;
}

FeatureMap match_features(const FeatureMap& img, const std::vector<double>& ref) {
    if (static_cast<std::size_t>(img.c) != ref.size())
        throw ConfigError("match_features: image has " + std::to_string(img.c) +
                          " channels, reference " + std::to_string(ref.size()));
    FeatureMap out;
    out.h = img.h;
    out.w = img.w;
    out.c = 2 * img.c;
    out.stride = img.stride;
    out.data.resize(static_cast<std::size_t>(out.h) * out.w * out.c);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            for (int ch = 0; ch < img.c; ++ch) {
                double v = img.at(y, x, ch);
                out.at(y, x, ch) = v;
                out.at(y, x, img.c + ch) = std::abs(v - ref[static_cast<std::size_t>(ch)]);
            }
        }
    }
    return out;
}

std::vector<WindowBox> enumerate_windows(int h, int w, int stride,
                                         const std::vector<int>& window_set) {
    std::vector<WindowBox> out;
    for (std::size_t si = 0; si < window_set.size(); ++si) {
        int n = window_set[si];
        if (n > h || n > w) continue;
        for (int y0 = 0; y0 + n <= h; ++y0) {
            for (int x0 = 0; x0 + n <= w; ++x0) {
                WindowBox win;
                win.y0 = y0;
                win.x0 = x0;
                win.size_index = static_cast<int>(si);
                win.box = {static_cast<double>(x0) * stride, static_cast<double>(y0) * stride,
                           static_cast<double>(n) * stride, static_cast<double>(n) * stride};
                out.push_back(win);
            }
        }
    }
    return out;
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
    std::sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        return std::tie(a.box.y, a.box.x, a.box.w, a.box.h) <
               std::tie(b.box.y, b.box.x, b.box.w, b.box.h);
    });
    std::vector<Detection> kept;
    for (const auto& det : detections) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (iou(det.box, k.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(det);
    }
    return kept;
}

std::vector<Detection> detect_from_features(const FeatureMap& features,
                                            const std::vector<double>& ref_embedding,
                                            const DetectorModel& model, std::int64_t image_id,
                                            std::int64_t category_id) {
    validate_model(model);
    FeatureMap match = match_features(features, ref_embedding);
    Sat sat(match);
    std::vector<Detection> candidates;
    for (const auto& win :
         enumerate_windows(features.h, features.w, features.stride, model.window_set)) {
        int size = model.window_set[static_cast<std::size_t>(win.size_index)];
        double score = sigmoid(head_score_z(model, sat, win, size));
        if (score >= model.score_threshold)
            candidates.push_back({image_id, category_id, win.box, score});
    }
    std::vector<Detection> kept = nms(std::move(candidates), model.nms_iou);
    if (kept.size() > static_cast<std::size_t>(model.max_detections))
        kept.resize(static_cast<std::size_t>(model.max_detections));
    return kept;
}

std::vector<Detection> detect(const Raster& pixels, const std::vector<ReferenceCrop>& references,
                              const DetectorModel& model, std::int64_t image_id,
                              std::int64_t category_id) {
    validate_model(model);
    std::vector<double> emb = embed_references(references, model);
    FeatureMap features = extract_features(pixels, model);
    return detect_from_features(features, emb, model, image_id, category_id);
}

namespace {

struct SelectedWindow {
    WindowBox win;
    int label;  // 1 positive, 0 negative
};

// Positives: IoU >= 0.5 with any label-1 box. Negatives: random subsample to
// negative_ratio per positive (at least negative_ratio total so background-only
// episodes still contribute).
std::vector<SelectedWindow> select_windows(const TrainingEpisode& episode,
                                           const std::vector<WindowBox>& windows,
                                           int negative_ratio, std::uint64_t selection_seed) {
    std::vector<SelectedWindow> selected;
    std::vector<std::size_t> negatives;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        bool positive = false;
        for (std::size_t b = 0; b < episode.boxes.size(); ++b) {
            if (episode.labels[b] != 1) continue;
            if (iou(windows[i].box, episode.boxes[b]) >= 0.5) {
                positive = true;
                break;
            }
        }
        if (positive)
            selected.push_back({windows[i], 1});
        else
            negatives.push_back(i);
    }
    std::size_t n_pos = selected.size();
    std::size_t n_neg = static_cast<std::size_t>(negative_ratio) * std::max<std::size_t>(1, n_pos);
    n_neg = std::min(n_neg, negatives.size());
    Rng rng(mix(selection_seed, static_cast<std::uint64_t>(episode.image_id), 0x5E1));
    for (std::size_t i = 0; i < n_neg; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng.below(negatives.size() - i));
        std::swap(negatives[i], negatives[j]);
        selected.push_back({windows[negatives[i]], 0});
    }
    return selected;
}

}  // namespace

double episode_batch_loss(const DetectorModel& model, const std::vector<TrainingEpisode>& batch,
                          int negative_ratio, std::uint64_t selection_seed, bool train_extractor,
                          ModelGrads* grads) {
    validate_model(model);
    if (batch.empty()) throw ConfigError("episode_batch_loss: empty batch");
    if (negative_ratio < 1) throw ConfigError("episode_batch_loss: negative_ratio must be >= 1");
    if (grads) {
        grads->conv1.assign(model.conv1.size(), 0.0);
        grads->conv2.assign(model.conv2.size(), 0.0);
        grads->head_w.assign(model.head_w.size(), 0.0);
        grads->head_b = 0.0;
    }

    const int C = model.c2;
    double loss_sum = 0.0;
    std::size_t n_windows = 0;

    for (const auto& episode : batch) {
        Forward img = run_forward(episode.pixels, model);
        Forward ref = run_forward(episode.reference.pixels, model);
        std::vector<double> emb(static_cast<std::size_t>(C), 0.0);
        for (int y = 0; y < ref.a2.h; ++y)
            for (int x = 0; x < ref.a2.w; ++x)
                for (int ch = 0; ch < C; ++ch) emb[static_cast<std::size_t>(ch)] += ref.a2.at(y, x, ch);
        double inv_ref = 1.0 / (static_cast<double>(ref.a2.h) * ref.a2.w);
        for (double& v : emb) v *= inv_ref;

        FeatureMap match = match_features(img.a2, emb);
        Sat sat(match);
        std::vector<WindowBox> windows =
            enumerate_windows(img.a2.h, img.a2.w, img.a2.stride, model.window_set);
        std::vector<SelectedWindow> selected =
            select_windows(episode, windows, negative_ratio, selection_seed);
        if (selected.empty()) continue;

        FeatureMap d_img = zero_like(img.a2);
        std::vector<double> d_emb(static_cast<std::size_t>(C), 0.0);

        for (const auto& sel : selected) {
            int size = model.window_set[static_cast<std::size_t>(sel.win.size_index)];
            double z = head_score_z(model, sat, sel.win, size);
            double p = sigmoid(z);
            double pc = std::clamp(p, 1e-12, 1.0 - 1e-12);
            loss_sum += sel.label ? -std::log(pc) : -std::log(1.0 - pc);
            ++n_windows;
            if (!grads) continue;

            double dz = p - static_cast<double>(sel.label);
            double inv_n = 1.0 / (static_cast<double>(size) * size);
            for (int ch = 0; ch < 2 * C; ++ch)
                grads->head_w[static_cast<std::size_t>(ch)] +=
                    dz * inv_n * sat.window_sum(sel.win.y0, sel.win.x0, size, ch);
            grads->head_w[static_cast<std::size_t>(2 * C + sel.win.size_index)] += dz;
            grads->head_b += dz;

            if (train_extractor) {
                for (int y = sel.win.y0; y < sel.win.y0 + size; ++y) {
                    for (int x = sel.win.x0; x < sel.win.x0 + size; ++x) {
                        for (int ch = 0; ch < C; ++ch) {
                            double w_img = model.head_w[static_cast<std::size_t>(ch)];
                            double w_diff = model.head_w[static_cast<std::size_t>(C + ch)];
                            double diff =
                                img.a2.at(y, x, ch) - emb[static_cast<std::size_t>(ch)];
                            double sg = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                            d_img.at(y, x, ch) += dz * inv_n * (w_img + w_diff * sg);
                            d_emb[static_cast<std::size_t>(ch)] -= dz * inv_n * w_diff * sg;
                        }
                    }
                }
            }
        }

        if (grads && train_extractor) {
            FeatureMap d_a1 = zero_like(img.a1);
            conv_backward(img.a1, img.a2, model.conv2, kConv2K, kConv2Stride, kConv2Pad, d_img,
                          grads->conv2, &d_a1);
            conv_backward(img.in, img.a1, model.conv1, kConv1K, kConv1Stride, kConv1Pad, d_a1,
                          grads->conv1, nullptr);

            FeatureMap d_ref2 = zero_like(ref.a2);
            for (int y = 0; y < ref.a2.h; ++y)
                for (int x = 0; x < ref.a2.w; ++x)
                    for (int ch = 0; ch < C; ++ch)
                        d_ref2.at(y, x, ch) = d_emb[static_cast<std::size_t>(ch)] * inv_ref;
            FeatureMap d_ref1 = zero_like(ref.a1);
            conv_backward(ref.a1, ref.a2, model.conv2, kConv2K, kConv2Stride, kConv2Pad, d_ref2,
                          grads->conv2, &d_ref1);
            conv_backward(ref.in, ref.a1, model.conv1, kConv1K, kConv1Stride, kConv1Pad, d_ref1,
                          grads->conv1, nullptr);
        }
    }

    if (n_windows == 0) return 0.0;
    double inv = 1.0 / static_cast<double>(n_windows);
    if (grads) {
        for (double& g : grads->conv1) g *= inv;
        for (double& g : grads->conv2) g *= inv;
        for (double& g : grads->head_w) g *= inv;
        grads->head_b *= inv;
    }
    return loss_sum * inv;
}

TrainResult train_detector(const Dataset& ds, EpisodeSampler& sampler, const TrainConfig& cfg) {
    if (!(cfg.learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (cfg.epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (cfg.batch_episodes < 1) throw ConfigError("train: batch_episodes must be >= 1");
    if (cfg.negative_ratio < 1) throw ConfigError("train: negative_ratio must be >= 1");
    if (cfg.extractor_mode != "fixed_random" && cfg.extractor_mode != "trained")
        throw ConfigError("train: unknown extractor_mode " + cfg.extractor_mode);
    if (ds.annotations.empty()) throw StageError("train: dataset has no annotations");
    std::vector<std::int64_t> image_ids = sampler.image_ids();
    if (image_ids.empty()) throw StageError("train: dataset has no annotated images");

    TrainResult result;
    result.model = init_model(cfg);
    if (cfg.epochs == 0) return result;

    const bool train_extractor = cfg.extractor_mode == "trained";
    std::size_t per_epoch = cfg.episodes_per_epoch > 0
                                ? static_cast<std::size_t>(cfg.episodes_per_epoch)
                                : image_ids.size();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::int64_t> order = image_ids;
        Rng shuffle_rng(mix(cfg.seed, 0xE90C, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        std::size_t i = 0;
        while (i < per_epoch) {
            std::vector<TrainingEpisode> batch;
            while (i < per_epoch && batch.size() < static_cast<std::size_t>(cfg.batch_episodes)) {
                std::int64_t image_id = order[i % order.size()];
                int draw = epoch * 1000003 + static_cast<int>(i);
                batch.push_back(sampler.sample(image_id, draw));
                ++i;
            }
            ModelGrads grads;
            double loss = episode_batch_loss(
                result.model, batch, cfg.negative_ratio,
                mix(cfg.seed, 0x5E1EC7, static_cast<std::uint64_t>(epoch),
                    static_cast<std::uint64_t>(n_batches)),
                train_extractor, &grads);
            epoch_loss += loss;
            ++n_batches;
            if (train_extractor) {
                for (std::size_t j = 0; j < result.model.conv1.size(); ++j)
                    result.model.conv1[j] -= cfg.learning_rate * grads.conv1[j];
                for (std::size_t j = 0; j < result.model.conv2.size(); ++j)
                    result.model.conv2[j] -= cfg.learning_rate * grads.conv2[j];
            }
            for (std::size_t j = 0; j < result.model.head_w.size(); ++j)
                result.model.head_w[j] -= cfg.learning_rate * grads.head_w[j];
            result.model.head_b -= cfg.learning_rate * grads.head_b;
        }
        result.epoch_losses.push_back(n_batches ? epoch_loss / static_cast<double>(n_batches)
                                                : 0.0);
    }
    return result;
}

DetectorModel make_matching_head_model(DetectorModel base, double sharpness) {
    if (!(sharpness > 0.0)) throw ConfigError("matching head: sharpness must be > 0");
    std::fill(base.head_w.begin(), base.head_w.end(), 0.0);
    for (int ch = 0; ch < base.c2; ++ch)
        base.head_w[static_cast<std::size_t>(base.c2 + ch)] = -sharpness;
    base.head_b = 0.0;
    base.score_threshold = 1e-6;
    validate_model(base);
    return base;
}

namespace {

constexpr char kModelMagic[] = "OSDMODEL1\n";

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw ParseError("model file truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_tensor(std::ostream& out, const std::vector<double>& t) {
    write_u32(out, static_cast<std::uint32_t>(t.size()));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
}

std::vector<double> read_tensor(std::istream& in, std::size_t expect) {
    std::uint32_t n = read_u32(in);
    if (n != expect)
        throw ParseError("model tensor has " + std::to_string(n) + " values, expected " +
                         std::to_string(expect));
    std::vector<double> t(n);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw ParseError("model file truncated");
    return t;
}

}  // namespace

void save_model(const std::string& path, const DetectorModel& model) {
    validate_model(model);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    out.write(kModelMagic, sizeof(kModelMagic) - 1);
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["c1"] = model.c1;
    j["c2"] = model.c2;
    j["reference_resolution"] = model.reference_resolution;
    j["score_threshold"] = model.score_threshold;
    j["nms_iou"] = model.nms_iou;
    j["window_set"] = model.window_set;
    j["max_detections"] = model.max_detections;
    j["extractor_mode"] = model.extractor_mode;
    j["tensors"] = {{"conv1", {model.c1, 1, kConv1K, kConv1K}},
                    {"conv2", {model.c2, model.c1, kConv2K, kConv2K}},
                    {"head_w", {static_cast<int>(model.head_w.size())}},
                    {"head_b", {1}}};
    std::string header = j.dump();
    write_u32(out, static_cast<std::uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    write_tensor(out, model.conv1);
    write_tensor(out, model.conv2);
    write_tensor(out, model.head_w);
    out.write(reinterpret_cast<const char*>(&model.head_b), sizeof(double));
    if (!out) throw Error("write failed: " + path);
}

DetectorModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open: " + path);
    char magic[sizeof(kModelMagic) - 1];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kModelMagic, sizeof magic) != 0)
        throw ParseError("not a model file: " + path);
    std::uint32_t header_len = read_u32(in);
    std::string header(header_len, '\0');
    in.read(header.data(), header_len);
    if (!in) throw ParseError("model file truncated");
    DetectorModel m;
    try {
        auto j = nlohmann::json::parse(header);
        if (j.at("version").get<int>() != 1)
            throw ParseError("unsupported model version");
        m.c1 = j.at("c1").get<int>();
        m.c2 = j.at("c2").get<int>();
        m.reference_resolution = j.at("reference_resolution").get<int>();
        m.score_threshold = j.at("score_threshold").get<double>();
        m.nms_iou = j.at("nms_iou").get<double>();
        m.window_set = j.at("window_set").get<std::vector<int>>();
        m.max_detections = j.at("max_detections").get<int>();
        m.extractor_mode = j.at("extractor_mode").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model header: ") + e.what());
    }
    m.conv1 = read_tensor(in, static_cast<std::size_t>(m.c1) * kConv1K * kConv1K);
    m.conv2 = read_tensor(in, static_cast<std::size_t>(m.c2) * m.c1 * kConv2K * kConv2K);
    m.head_w = read_tensor(in, static_cast<std::size_t>(2 * m.c2) + m.window_set.size());
    in.read(reinterpret_cast<char*>(&m.head_b), sizeof(double));
    if (!in) throw ParseError("model file truncated");
    validate_model(m);
    return m;
}

void save_loss_trace(const std::string& path, const std::vector<double>& losses) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    out << "epoch,mean_loss\n";
    out.precision(17);
    for (std::size_t i = 0; i < losses.size(); ++i) out << i << "," << losses[i] << "\n";
}

}  // namespace osd
