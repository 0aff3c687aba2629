#include "osdbench/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include "json.hpp"
#include "osdbench/common.hpp"

namespace osd::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr std::uint64_t kGlyphStream = 0x617;
constexpr std::uint64_t kSceneStream = 0x5C3;
constexpr int kImageAttempts = 8;
constexpr int kPlacementTries = 60;

bool point_in_stroke(const Stroke& s, double gx, double gy) {
    switch (s.kind) {
        case Stroke::Kind::chain: {
            for (std::size_t i = 0; i + 1 < s.points.size(); ++i) {
                double ax = s.points[i][0], ay = s.points[i][1];
                double bx = s.points[i + 1][0], by = s.points[i + 1][1];
                double dx = bx - ax, dy = by - ay;
                double len2 = dx * dx + dy * dy;
                double t = len2 > 0.0 ? ((gx - ax) * dx + (gy - ay) * dy) / len2 : 0.0;
                t = std::clamp(t, 0.0, 1.0);
                double px = ax + t * dx, py = ay + t * dy;
                double d2 = (gx - px) * (gx - px) + (gy - py) * (gy - py);
                if (d2 <= s.width * s.width) return true;
            }
            return false;
        }
        case Stroke::Kind::arc: {
            double dx = gx - s.center[0], dy = gy - s.center[1];
            double r = std::sqrt(dx * dx + dy * dy);
            if (std::abs(r - s.radius) > s.width) return false;
            double a = std::atan2(dy, dx);
            double rel = std::fmod(a - s.angle0 + 4.0 * kPi, 2.0 * kPi);
            return rel <= s.angle_span;
        }
        case Stroke::Kind::disc: {
            double dx = gx - s.center[0], dy = gy - s.center[1];
            return dx * dx + dy * dy <= s.radius * s.radius;
        }
    }
    return false;
}

bool point_in_glyph(const GlyphSpec& glyph, double gx, double gy) {
    for (const auto& s : glyph.strokes)
        if (point_in_stroke(s, gx, gy)) return true;
    return false;
}

GlyphSpec random_glyph(Rng& rng) {
    GlyphSpec g;
    int n_strokes = 3 + static_cast<int>(rng.below(5));
    for (int i = 0; i < n_strokes; ++i) {
        Stroke s;
        switch (rng.below(3)) {
            case 0: {
                s.kind = Stroke::Kind::chain;
                int n_pts = 3 + static_cast<int>(rng.below(3));
                for (int p = 0; p < n_pts; ++p)
                    s.points.push_back({rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)});
                s.width = rng.uniform(0.05, 0.09);
                break;
            }
            case 1: {
                s.kind = Stroke::Kind::arc;
                s.center = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
                s.radius = rng.uniform(0.12, 0.28);
                s.angle0 = rng.uniform(0.0, 2.0 * kPi);
                s.angle_span = rng.uniform(0.5 * kPi, 1.5 * kPi);
                s.width = rng.uniform(0.05, 0.08);
                break;
            }
            default: {
                s.kind = Stroke::Kind::disc;
                s.center = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
                s.radius = rng.uniform(0.06, 0.14);
                break;
            }
        }
        g.strokes.push_back(std::move(s));
    }
    return g;
}

bool has_foreground(const GlyphSpec& g) {
    Raster r = render_glyph(g, 32, 24.0, 0.0);
    for (float v : r.data)
        if (v >= 0.5f) return true;
    return false;
}

struct Placement {
    int category_index;  // 0-based into the glyph table
    double cx, cy;       // canvas center
    double size_px;      // scaled glyph side
    double rotation;     // radians
    double intensity;
    BoundingBox nominal;  // axis-aligned box of the rotated nominal square
};

BoundingBox nominal_box(double cx, double cy, double size_px, double rotation) {
    double half = 0.5 * size_px *
                  (std::abs(std::cos(rotation)) + std::abs(std::sin(rotation)));
    return {cx - half, cy - half, 2.0 * half, 2.0 * half};
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
    double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
    double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
    double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

struct ImageOut {
    Raster pixels;
    std::vector<std::pair<std::int64_t, BoundingBox>> instances;  // (category_id, tight box)
};

// Renders one placed instance onto the canvas (max composite) and returns the
// tight box of its own coverage-mask pixels; nullopt when the mask is empty.
std::optional<BoundingBox> render_instance(Raster& canvas, const GlyphSpec& glyph,
                                           const Placement& p) {
    double half = 0.80 * p.size_px;
    int x0 = std::max(0, static_cast<int>(std::floor(p.cx - half)));
    int y0 = std::max(0, static_cast<int>(std::floor(p.cy - half)));
    int x1 = std::min(canvas.width - 1, static_cast<int>(std::ceil(p.cx + half)));
    int y1 = std::min(canvas.height - 1, static_cast<int>(std::ceil(p.cy + half)));
    double c = std::cos(-p.rotation), s = std::sin(-p.rotation);
    int min_x = canvas.width, min_y = canvas.height, max_x = -1, max_y = -1;
    static constexpr double kSub[2] = {0.25, 0.75};
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            int covered = 0;
            for (double oy : kSub) {
                for (double ox : kSub) {
                    double dx = (x + ox) - p.cx;
                    double dy = (y + oy) - p.cy;
                    double gx = (dx * c - dy * s) / p.size_px + 0.5;
                    double gy = (dx * s + dy * c) / p.size_px + 0.5;
                    if (point_in_glyph(glyph, gx, gy)) ++covered;
                }
            }
            if (covered == 0) continue;
            float v = static_cast<float>(covered / 4.0 * p.intensity);
            canvas.at(x, y) = std::max(canvas.at(x, y), v);
            if (covered >= 2) {
                min_x = std::min(min_x, x);
                min_y = std::min(min_y, y);
                max_x = std::max(max_x, x);
                max_y = std::max(max_y, y);
            }
        }
    }
    if (max_x < 0) return std::nullopt;
    return BoundingBox{static_cast<double>(min_x), static_cast<double>(min_y),
                       static_cast<double>(max_x - min_x + 1),
                       static_cast<double>(max_y - min_y + 1)};
}

std::optional<ImageOut> try_generate_image(const SceneConfig& cfg,
                                           const std::vector<GlyphSpec>& glyphs, Rng& rng) {
    auto n_cls = static_cast<std::int64_t>(1 + rng.poisson(cfg.categories_per_image - 1.0));
    n_cls = std::min<std::int64_t>(n_cls, cfg.n_categories);
    std::int64_t extra =
        rng.poisson(cfg.instances_per_image - cfg.categories_per_image);
    std::int64_t n_inst = n_cls + extra;

    // Distinct categories for the image: partial Fisher-Yates over indices.
    std::vector<int> cat_pool(static_cast<std::size_t>(cfg.n_categories));
    std::iota(cat_pool.begin(), cat_pool.end(), 0);
    for (std::int64_t i = 0; i < n_cls; ++i) {
        std::size_t j = static_cast<std::size_t>(i) +
                        static_cast<std::size_t>(rng.below(cat_pool.size() - i));
        std::swap(cat_pool[static_cast<std::size_t>(i)], cat_pool[j]);
    }

    std::vector<Placement> placed;
    for (std::int64_t i = 0; i < n_inst; ++i) {
        // First n_cls instances realize each chosen category once.
        int cat = i < n_cls ? cat_pool[static_cast<std::size_t>(i)]
                            : cat_pool[static_cast<std::size_t>(rng.below(n_cls))];
        double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
        double size_px = cfg.glyph_size * scale;
        double rotation = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * kPi / 180.0;
        double lo = 0.5 * size_px, hi = cfg.canvas - 0.5 * size_px;
        bool ok = false;
        for (int attempt = 0; attempt < kPlacementTries && !ok; ++attempt) {
            Placement p;
            p.category_index = cat;
            p.cx = rng.uniform(lo, hi);
            p.cy = rng.uniform(lo, hi);
            p.size_px = size_px;
            p.rotation = rotation;
            p.intensity = rng.uniform(0.6, 1.0);
            p.nominal = nominal_box(p.cx, p.cy, size_px, rotation);
            ok = true;
            for (const auto& q : placed) {
                if (box_iou(p.nominal, q.nominal) > cfg.overlap_cap) {
                    ok = false;
                    break;
                }
            }
            if (ok) placed.push_back(p);
        }
        if (!ok) return std::nullopt;
    }

    ImageOut out;
    out.pixels = Raster(cfg.canvas, cfg.canvas);
    for (float& v : out.pixels.data) v = static_cast<float>(rng.uniform(0.0, cfg.noise));
    for (const auto& p : placed) {
        auto box = render_instance(out.pixels, glyphs[static_cast<std::size_t>(p.category_index)], p);
        if (!box) return std::nullopt;  // fully sub-threshold render, regenerate the image
        out.instances.emplace_back(p.category_index + 1, *box);
    }
    return out;
}

ImageOut generate_image(const SceneConfig& cfg, const std::vector<GlyphSpec>& glyphs,
                        std::int64_t image_index) {
    for (int attempt = 0; attempt < kImageAttempts; ++attempt) {
        Rng rng(mix(cfg.seed, kSceneStream,
                    mix(static_cast<std::uint64_t>(image_index),
                        static_cast<std::uint64_t>(attempt))));
        if (auto out = try_generate_image(cfg, glyphs, rng)) return std::move(*out);
    }
    throw StageError("synthworld: placement failed for image " + std::to_string(image_index) +
                     " after " + std::to_string(kImageAttempts) +
                     " attempts; config: " + scene_config_json(cfg));
}

}  // namespace

void validate_scene_config(const SceneConfig& cfg) {
    if (cfg.canvas < 32) throw ConfigError("scene config: canvas must be >= 32");
    if (cfg.n_categories < 1) throw ConfigError("scene config: n_categories must be >= 1");
    if (cfg.glyph_size < 8) throw ConfigError("scene config: glyph_size must be >= 8");
    if (cfg.categories_per_image < 1.0)
        throw ConfigError("scene config: categories_per_image must be >= 1");
    if (cfg.instances_per_image < cfg.categories_per_image)
        throw ConfigError("scene config: instances_per_image must be >= categories_per_image");
    if (!(cfg.scale_min > 0.0) || cfg.scale_min > cfg.scale_max || cfg.scale_max > 2.0)
        throw ConfigError("scene config: require 0 < scale_min <= scale_max <= 2");
    if (cfg.rotation_deg < 0.0 || cfg.rotation_deg > 180.0)
        throw ConfigError("scene config: rotation_deg must be in [0, 180]");
    if (cfg.overlap_cap < 0.0 || cfg.overlap_cap >= 1.0)
        throw ConfigError("scene config: overlap_cap must be in [0, 1)");
    if (cfg.noise < 0.0 || cfg.noise >= 0.5)
        throw ConfigError("scene config: noise must be in [0, 0.5)");
    if (cfg.glyph_size * cfg.scale_max > 0.75 * cfg.canvas)
        throw ConfigError("scene config: scaled glyphs must fit well inside the canvas");
}

std::vector<GlyphSpec> make_glyphs(const SceneConfig& cfg) {
    validate_scene_config(cfg);
    std::vector<GlyphSpec> glyphs;
    glyphs.reserve(static_cast<std::size_t>(cfg.n_categories));
    for (int i = 0; i < cfg.n_categories; ++i) {
        for (std::uint64_t attempt = 0;; ++attempt) {
            Rng rng(mix(cfg.seed, kGlyphStream,
                        mix(static_cast<std::uint64_t>(i), attempt)));
            GlyphSpec g = random_glyph(rng);
            g.category_id = i + 1;
            if (has_foreground(g)) {
                glyphs.push_back(std::move(g));
                break;
            }
            if (attempt > 64)
                throw StageError("synthworld: no renderable glyph for category " +
                                 std::to_string(i + 1));
        }
    }
    return glyphs;
}

Raster render_glyph(const GlyphSpec& glyph, int out_size, double glyph_px,
                    double rotation_rad) {
    if (out_size < 1 || glyph_px <= 0.0)
        throw ConfigError("render_glyph: bad output geometry");
    Raster r(out_size, out_size);
    double cx = out_size / 2.0, cy = out_size / 2.0;
    double c = std::cos(-rotation_rad), s = std::sin(-rotation_rad);
    static constexpr double kSub[2] = {0.25, 0.75};
    for (int y = 0; y < out_size; ++y) {
        for (int x = 0; x < out_size; ++x) {
            int covered = 0;
            for (double oy : kSub) {
                for (double ox : kSub) {
                    double dx = (x + ox) - cx;
                    double dy = (y + oy) - cy;
                    double gx = (dx * c - dy * s) / glyph_px + 0.5;
                    double gy = (dx * s + dy * c) / glyph_px + 0.5;
                    if (point_in_glyph(glyph, gx, gy)) ++covered;
                }
            }
            r.at(x, y) = static_cast<float>(covered / 4.0);
        }
    }
    return r;
}

Dataset generate_dataset(const SceneConfig& cfg, std::int64_t n_images, GeneratorStats* stats,
                         int n_workers) {
    validate_scene_config(cfg);
    if (n_images < 1) throw ConfigError("generate_dataset: n_images must be >= 1");
    if (n_workers < 1) throw ConfigError("generate_dataset: n_workers must be >= 1");
    std::vector<GlyphSpec> glyphs = make_glyphs(cfg);

    std::vector<ImageOut> outs(static_cast<std::size_t>(n_images));
    auto worker = [&](std::int64_t begin, std::int64_t end) {
        for (std::int64_t i = begin; i < end; ++i)
            outs[static_cast<std::size_t>(i)] = generate_image(cfg, glyphs, i);
    };
    if (n_workers == 1 || n_images == 1) {
        worker(0, n_images);
    } else {
        int n = std::min<std::int64_t>(n_workers, n_images);
        std::vector<std::thread> threads;
        std::int64_t chunk = (n_images + n - 1) / n;
        for (int t = 0; t < n; ++t)
            threads.emplace_back(worker, t * chunk, std::min<std::int64_t>((t + 1) * chunk, n_images));
        for (auto& th : threads) th.join();
    }

    Dataset ds;
    ds.exhaustive = true;
    for (int i = 0; i < cfg.n_categories; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "glyph_%03d", i + 1);
        ds.categories.push_back({i + 1, name});
    }
    std::int64_t next_ann = 1;
    std::int64_t total_instances = 0;
    std::int64_t total_classes = 0;
    for (std::int64_t i = 0; i < n_images; ++i) {
        auto& out = outs[static_cast<std::size_t>(i)];
        ImageRecord img;
        img.id = i + 1;
        img.width = cfg.canvas;
        img.height = cfg.canvas;
        char name[40];
        std::snprintf(name, sizeof name, "rasters/img_%06lld.pgm",
                      static_cast<long long>(img.id));
        img.file_name = name;
        img.pixels = std::move(out.pixels);
        ds.images.push_back(std::move(img));
        std::set<std::int64_t> cats;
        for (const auto& [cat_id, box] : out.instances) {
            ds.annotations.push_back({next_ann++, i + 1, cat_id, box, false});
            cats.insert(cat_id);
        }
        total_instances += static_cast<std::int64_t>(out.instances.size());
        total_classes += static_cast<std::int64_t>(cats.size());
    }
    if (stats) {
        stats->n_images = n_images;
        stats->n_instances = total_instances;
        stats->instances_per_image =
            static_cast<double>(total_instances) / static_cast<double>(n_images);
        stats->classes_per_image =
            static_cast<double>(total_classes) / static_cast<double>(n_images);
    }
    validate_dataset(ds);
    return ds;
}

Dataset take_images(const Dataset& ds, std::size_t first, std::size_t count) {
    if (first + count > ds.images.size())
        throw ConfigError("take_images: range exceeds image count");
    Dataset out;
    out.categories = ds.categories;
    out.exhaustive = ds.exhaustive;
    std::set<std::int64_t> kept;
    for (std::size_t i = first; i < first + count; ++i) {
        out.images.push_back(ds.images[i]);
        kept.insert(ds.images[i].id);
    }
    for (const auto& ann : ds.annotations)
        if (kept.count(ann.image_id)) out.annotations.push_back(ann);
    if (ds.not_exhaustive_map) {
        std::map<std::int64_t, std::set<std::int64_t>> pruned;
        for (const auto& [img, cats] : *ds.not_exhaustive_map)
            if (kept.count(img)) pruned[img] = cats;
        if (!pruned.empty()) out.not_exhaustive_map = std::move(pruned);
    }
    return out;
}

SceneConfig low_clutter_preset(int n_categories) {
    SceneConfig cfg;
    cfg.canvas = 96;
    cfg.n_categories = n_categories;
    cfg.instances_per_image = 3.0;
    cfg.categories_per_image = 1.5;
    cfg.glyph_size = 22;
    cfg.scale_min = 0.8;
    cfg.scale_max = 1.25;
    cfg.rotation_deg = 25.0;
    cfg.overlap_cap = 0.25;
    cfg.noise = 0.25;
    return cfg;
}

SceneConfig high_clutter_preset(int n_categories) {
    SceneConfig cfg;
    cfg.canvas = 128;
    cfg.n_categories = n_categories;
    cfg.instances_per_image = 14.0;
    cfg.categories_per_image = 6.0;
    cfg.glyph_size = 20;
    cfg.scale_min = 0.75;
    cfg.scale_max = 1.2;
    cfg.rotation_deg = 25.0;
    cfg.overlap_cap = 0.3;
    cfg.noise = 0.3;
    return cfg;
}

std::string scene_config_json(const SceneConfig& cfg) {
    nlohmann::ordered_json j;
    j["canvas"] = cfg.canvas;
    j["n_categories"] = cfg.n_categories;
    j["instances_per_image"] = cfg.instances_per_image;
    j["categories_per_image"] = cfg.categories_per_image;
    j["glyph_size"] = cfg.glyph_size;
    j["scale_min"] = cfg.scale_min;
    j["scale_max"] = cfg.scale_max;
    j["rotation_deg"] = cfg.rotation_deg;
    j["overlap_cap"] = cfg.overlap_cap;
    j["noise"] = cfg.noise;
    j["seed"] = cfg.seed;
    return j.dump();
}

SceneConfig scene_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
        SceneConfig cfg;
        cfg.canvas = j.at("canvas").get<int>();
        cfg.n_categories = j.at("n_categories").get<int>();
        cfg.instances_per_image = j.at("instances_per_image").get<double>();
        cfg.categories_per_image = j.at("categories_per_image").get<double>();
        cfg.glyph_size = j.at("glyph_size").get<int>();
        cfg.scale_min = j.at("scale_min").get<double>();
        cfg.scale_max = j.at("scale_max").get<double>();
        cfg.rotation_deg = j.at("rotation_deg").get<double>();
        cfg.overlap_cap = j.at("overlap_cap").get<double>();
        cfg.noise = j.at("noise").get<double>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
        validate_scene_config(cfg);
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("scene config: ") + e.what());
    }
}

void export_dataset(const Dataset& ds, const SceneConfig& cfg, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "rasters");
    for (const auto& img : ds.images) {
        if (!img.pixels)
            throw StageError("export_dataset: image " + std::to_string(img.id) +
                             " has no pixels");
        write_pgm((fs::path(dir) / img.file_name).string(), *img.pixels);
    }
    save_dataset((fs::path(dir) / "annotations.json").string(), ds);
    nlohmann::ordered_json manifest;
    manifest["schema_version"] = 1;
    manifest["scene_config"] = nlohmann::ordered_json::parse(scene_config_json(cfg));
    manifest["n_images"] = static_cast<std::int64_t>(ds.images.size());
    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
}

}  // namespace osd::synth
