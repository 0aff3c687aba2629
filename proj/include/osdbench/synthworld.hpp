#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "osdbench/annotations.hpp"
#include "osdbench/raster.hpp"

namespace osd::synth {

// One drawing primitive in glyph-local coordinates (unit square, y down).
struct Stroke {
    enum class Kind { chain, arc, disc };
    Kind kind = Kind::chain;
    std::vector<std::array<double, 2>> points;  // chain vertices
    double width = 0.06;                        // half-width of chain/arc bands
    std::array<double, 2> center{0.5, 0.5};     // arc/disc
    double radius = 0.2;
    double angle0 = 0.0;      // arc start, radians
    double angle_span = 3.0;  // arc extent, radians
};

struct GlyphSpec {
    std::int64_t category_id = 0;
    std::vector<Stroke> strokes;
};

struct SceneConfig {
    int canvas = 96;  // square canvas side, pixels
    int n_categories = 8;
    double instances_per_image = 3.0;   // target mean, min 1 realized
    double categories_per_image = 1.5;  // target mean of distinct categories
    int glyph_size = 22;                // nominal glyph side before scale jitter, pixels
    double scale_min = 0.8;
    double scale_max = 1.25;
    double rotation_deg = 25.0;  // jitter range: uniform in [-rotation_deg, +rotation_deg]
    double overlap_cap = 0.25;   // max pairwise IoU of nominal placement squares
    double noise = 0.25;         // background noise amplitude in [0, 0.5)
    std::uint64_t seed = 1;

    bool operator==(const SceneConfig&) const = default;
};

struct GeneratorStats {
    std::int64_t n_images = 0;
    std::int64_t n_instances = 0;
    double instances_per_image = 0.0;
    double classes_per_image = 0.0;
};

void validate_scene_config(const SceneConfig& cfg);

// Glyph universe for a config. Pure function of (cfg.seed, cfg.n_categories);
// category ids are 1..n_categories.
std::vector<GlyphSpec> make_glyphs(const SceneConfig& cfg);

// Renders one glyph into an out_size x out_size raster (values are coverage in
// [0, 1]), drawn at glyph_px pixels per unit-square side, centered, rotated by
// rotation_rad. Pixels with coverage >= 0.5 count as foreground.
Raster render_glyph(const GlyphSpec& glyph, int out_size, double glyph_px, double rotation_rad);

// Seeded scene generation. Image ids are 1..n_images, annotation ids are
// assigned sequentially in image order, and each image is produced from a seed
// derived from (cfg.seed, image index), so results do not depend on n_workers.
Dataset generate_dataset(const SceneConfig& cfg, std::int64_t n_images,
                         GeneratorStats* stats = nullptr, int n_workers = 1);

// Image-range subset (images [first, first + count) by position, with the full
// category table retained). Used to carve train/eval scene pools out of one
// generated dataset.
Dataset take_images(const Dataset& ds, std::size_t first, std::size_t count);

SceneConfig low_clutter_preset(int n_categories);
SceneConfig high_clutter_preset(int n_categories);

std::string scene_config_json(const SceneConfig& cfg);
SceneConfig scene_config_from_json(const std::string& text);

// Writes dir/annotations.json, dir/manifest.json and dir/rasters/*.pgm. The
// manifest records the config and image count for exact regeneration.
void export_dataset(const Dataset& ds, const SceneConfig& cfg, const std::string& dir);

}  // namespace osd::synth
