#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "osdbench/annotations.hpp"
#include "osdbench/common.hpp"
#include "osdbench/synthworld.hpp"

using namespace osd;
using namespace osd::synth;
namespace fs = std::filesystem;

namespace {

// With 2x2 supersampling, foreground pixels (coverage >= 0.5) have value at
// least 0.5 * min intensity (0.3), background glyph fringes at most 0.25. Any
// threshold between separates the two exactly on noise-free scenes.
constexpr float kMaskThreshold = 0.28f;

double mean_abs_diff(const Raster& a, const Raster& b) {
    double total = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        total += std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
    return total / static_cast<double>(a.data.size());
}

}  // namespace

TEST_CASE("scene config validation") {
    SceneConfig cfg;
    CHECK_NOTHROW(validate_scene_config(cfg));

    SceneConfig bad = cfg;
    bad.overlap_cap = 1.0;
    CHECK_THROWS_AS(validate_scene_config(bad), ConfigError);
    bad = cfg;
    bad.noise = 0.5;
    CHECK_THROWS_AS(validate_scene_config(bad), ConfigError);
    bad = cfg;
    bad.instances_per_image = 1.0;
    bad.categories_per_image = 1.5;  // cannot have more categories than instances
    CHECK_THROWS_AS(validate_scene_config(bad), ConfigError);
    bad = cfg;
    bad.scale_min = 1.5;
    bad.scale_max = 1.0;
    CHECK_THROWS_AS(validate_scene_config(bad), ConfigError);
    bad = cfg;
    bad.glyph_size = 90;  // glyph_size * scale_max must fit well inside the canvas
    CHECK_THROWS_AS(validate_scene_config(bad), ConfigError);
    bad = cfg;
    bad.n_categories = 0;
    CHECK_THROWS_AS(validate_scene_config(bad), ConfigError);
}

TEST_CASE("scene config json round trip") {
    SceneConfig cfg = high_clutter_preset(24);
    cfg.seed = 99;
    cfg.noise = 0.1;
    CHECK(scene_config_from_json(scene_config_json(cfg)) == cfg);
}

TEST_CASE("generation is deterministic and worker-count independent") {
    SceneConfig cfg = low_clutter_preset(6);
    cfg.seed = 17;
    GeneratorStats s1, s2;
    Dataset a = generate_dataset(cfg, 8, &s1, 1);
    Dataset b = generate_dataset(cfg, 8, &s2, 3);
    CHECK(a == b);  // includes raster pixels
    CHECK(s1.n_instances == s2.n_instances);

    SceneConfig other = cfg;
    other.seed = 18;
    Dataset c = generate_dataset(other, 8);
    CHECK_FALSE(a == c);
}

TEST_CASE("images carry pixels, ids and per-image annotations") {
    SceneConfig cfg = low_clutter_preset(5);
    cfg.seed = 3;
    Dataset ds = generate_dataset(cfg, 10);
    validate_dataset(ds);
    REQUIRE(ds.images.size() == 10);
    CHECK(ds.categories.size() == 5);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const auto& img = ds.images[i];
        CHECK(img.id == static_cast<std::int64_t>(i + 1));
        CHECK(img.width == cfg.canvas);
        CHECK(img.height == cfg.canvas);
        REQUIRE(img.pixels.has_value());
        CHECK_FALSE(img.pixels->all_zero());
    }
    CHECK_FALSE(ds.annotations.empty());
    for (const auto& ann : ds.annotations) {
        CHECK(ann.bbox.valid());
        CHECK(ann.bbox.x >= 0.0);
        CHECK(ann.bbox.y >= 0.0);
        CHECK(ann.bbox.x2() <= cfg.canvas);
        CHECK(ann.bbox.y2() <= cfg.canvas);
        CHECK_FALSE(ann.is_crowd);
    }
    // Annotation ids are sequential in image order.
    for (std::size_t i = 1; i < ds.annotations.size(); ++i)
        CHECK(ds.annotations[i].id == ds.annotations[i - 1].id + 1);
}

TEST_CASE("boxes are tight on single-instance noise-free scenes") {
    SceneConfig cfg;
    cfg.canvas = 64;
    cfg.n_categories = 3;
    cfg.instances_per_image = 1.0;
    cfg.categories_per_image = 1.0;
    cfg.glyph_size = 22;
    cfg.noise = 0.0;
    cfg.seed = 41;
    Dataset ds = generate_dataset(cfg, 20);

    for (const auto& img : ds.images) {
        std::vector<const InstanceAnnotation*> anns;
        for (const auto& ann : ds.annotations)
            if (ann.image_id == img.id) anns.push_back(&ann);
        REQUIRE(anns.size() == 1);
        const BoundingBox& box = anns[0]->bbox;
        const Raster& pix = *img.pixels;

        int min_x = cfg.canvas, min_y = cfg.canvas, max_x = -1, max_y = -1;
        for (int y = 0; y < cfg.canvas; ++y) {
            for (int x = 0; x < cfg.canvas; ++x) {
                if (pix.at(x, y) >= kMaskThreshold) {
                    min_x = std::min(min_x, x);
                    min_y = std::min(min_y, y);
                    max_x = std::max(max_x, x);
                    max_y = std::max(max_y, y);
                }
            }
        }
        REQUIRE(max_x >= 0);  // some foreground rendered
        CHECK(box.x == static_cast<double>(min_x));
        CHECK(box.y == static_cast<double>(min_y));
        CHECK(box.w == static_cast<double>(max_x - min_x + 1));
        CHECK(box.h == static_cast<double>(max_y - min_y + 1));
    }
}

TEST_CASE("every annotation box contains rendered foreground") {
    SceneConfig cfg = high_clutter_preset(10);
    cfg.seed = 7;
    Dataset ds = generate_dataset(cfg, 6);
    for (const auto& ann : ds.annotations) {
        const ImageRecord* img = nullptr;
        for (const auto& im : ds.images)
            if (im.id == ann.image_id) img = &im;
        REQUIRE(img != nullptr);
        bool found = false;
        for (int y = static_cast<int>(ann.bbox.y); y < static_cast<int>(ann.bbox.y2()); ++y)
            for (int x = static_cast<int>(ann.bbox.x); x < static_cast<int>(ann.bbox.x2()); ++x)
                if (img->pixels->at(x, y) >= kMaskThreshold) found = true;
        CHECK(found);
    }
}

TEST_CASE("realized clutter statistics track the configured targets") {
    SceneConfig cfg = low_clutter_preset(8);
    cfg.seed = 29;
    GeneratorStats gen;
    Dataset ds = generate_dataset(cfg, 200, &gen);
    DatasetStats stats = dataset_stats(ds);

    CHECK(gen.n_images == 200);
    CHECK(gen.n_instances == stats.n_instances);
    CHECK(gen.instances_per_image == doctest::Approx(stats.instances_per_image).epsilon(1e-12));
    CHECK(gen.classes_per_image == doctest::Approx(stats.classes_per_image).epsilon(1e-12));

    // Within 10 percent of the configured means over 200 images.
    CHECK(stats.instances_per_image > 0.9 * cfg.instances_per_image);
    CHECK(stats.instances_per_image < 1.1 * cfg.instances_per_image);
    CHECK(stats.classes_per_image > 0.9 * cfg.categories_per_image);
    CHECK(stats.classes_per_image < 1.1 * cfg.categories_per_image);

    // The distinct-category count can never exceed the universe.
    SceneConfig tiny = cfg;
    tiny.n_categories = 2;
    tiny.seed = 5;
    Dataset small = generate_dataset(tiny, 40);
    DatasetIndex index(small);
    for (const auto& img : small.images)
        CHECK(index.categories_in_image(img.id).size() <= 2);
}

TEST_CASE("high clutter preset packs denser scenes than low clutter") {
    SceneConfig low = low_clutter_preset(12);
    SceneConfig high = high_clutter_preset(12);
    low.seed = high.seed = 11;
    DatasetStats ls = dataset_stats(generate_dataset(low, 60));
    DatasetStats hs = dataset_stats(generate_dataset(high, 60));
    CHECK(hs.instances_per_image > 2.5 * ls.instances_per_image);
    CHECK(hs.classes_per_image > 2.0 * ls.classes_per_image);
}

TEST_CASE("glyphs are stable per seed and distinct across categories") {
    SceneConfig cfg;
    cfg.n_categories = 20;
    cfg.seed = 101;
    std::vector<GlyphSpec> glyphs = make_glyphs(cfg);
    REQUIRE(glyphs.size() == 20);
    for (std::size_t i = 0; i < glyphs.size(); ++i)
        CHECK(glyphs[i].category_id == static_cast<std::int64_t>(i + 1));

    // Canonical renders: cross-category differences dwarf within-category
    // jitter (rotation and scale inside the configured ranges).
    std::vector<Raster> canon;
    for (const auto& g : glyphs) canon.push_back(render_glyph(g, 32, 24.0, 0.0));

    double cross = 0.0;
    int cross_n = 0;
    for (std::size_t i = 0; i < glyphs.size(); ++i)
        for (std::size_t j = i + 1; j < glyphs.size(); ++j) {
            cross += mean_abs_diff(canon[i], canon[j]);
            ++cross_n;
        }
    cross /= cross_n;

    double within = 0.0;
    for (std::size_t i = 0; i < glyphs.size(); ++i) {
        Raster jittered = render_glyph(glyphs[i], 32, 24.0 * 0.9, 0.3);
        within += mean_abs_diff(canon[i], jittered);
    }
    within /= static_cast<double>(glyphs.size());
    CHECK(cross > 1.5 * within);

    // Same seed reproduces the same shapes; a different seed does not.
    std::vector<GlyphSpec> again = make_glyphs(cfg);
    for (std::size_t i = 0; i < glyphs.size(); ++i)
        CHECK(mean_abs_diff(canon[i], render_glyph(again[i], 32, 24.0, 0.0)) == 0.0);

    SceneConfig other = cfg;
    other.seed = 102;
    std::vector<GlyphSpec> fresh = make_glyphs(other);
    int changed = 0;
    for (std::size_t i = 0; i < glyphs.size(); ++i)
        if (mean_abs_diff(canon[i], render_glyph(fresh[i], 32, 24.0, 0.0)) > 1e-3) ++changed;
    CHECK(changed >= 18);
}

TEST_CASE("take_images carves image ranges with the category table intact") {
    SceneConfig cfg = low_clutter_preset(6);
    cfg.seed = 23;
    Dataset ds = generate_dataset(cfg, 10);
    Dataset head = take_images(ds, 0, 6);
    Dataset tail = take_images(ds, 6, 4);

    CHECK(head.images.size() == 6);
    CHECK(tail.images.size() == 4);
    CHECK(head.categories == ds.categories);
    CHECK(tail.categories == ds.categories);
    CHECK(head.annotations.size() + tail.annotations.size() == ds.annotations.size());
    std::set<std::int64_t> head_ids;
    for (const auto& img : head.images) head_ids.insert(img.id);
    for (const auto& ann : head.annotations) CHECK(head_ids.count(ann.image_id) == 1);
    validate_dataset(head);
    validate_dataset(tail);

    CHECK_THROWS_AS(take_images(ds, 8, 4), ConfigError);
}

TEST_CASE("impossible placement budgets fail with the config attached") {
    SceneConfig cfg;
    cfg.canvas = 32;
    cfg.n_categories = 1;
    cfg.instances_per_image = 20.0;
    cfg.categories_per_image = 1.0;
    cfg.glyph_size = 12;
    cfg.scale_min = 1.0;
    cfg.scale_max = 1.0;
    cfg.overlap_cap = 0.0;
    cfg.noise = 0.0;
    cfg.seed = 2;
    CHECK_THROWS_WITH_AS(generate_dataset(cfg, 2), doctest::Contains("canvas"), StageError);
}

TEST_CASE("export writes a loadable dataset with a regeneration manifest") {
    fs::path dir = fs::temp_directory_path() / "osdbench_test_synth_export";
    fs::remove_all(dir);

    SceneConfig cfg = low_clutter_preset(4);
    cfg.seed = 31;
    Dataset ds = generate_dataset(cfg, 5);
    export_dataset(ds, cfg, dir.string());

    CHECK(fs::exists(dir / "annotations.json"));
    CHECK(fs::exists(dir / "manifest.json"));
    CHECK(fs::exists(dir / "rasters"));

    LoaderOptions opts;
    opts.raster_dir = (dir / "rasters").string();
    Dataset loaded = load_dataset((dir / "annotations.json").string(), opts);
    CHECK(loaded.annotations == ds.annotations);
    CHECK(loaded.categories == ds.categories);
    REQUIRE(loaded.images.size() == ds.images.size());
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        REQUIRE(loaded.images[i].pixels.has_value());
        // PGM quantizes to 8 bits; everything else must survive exactly.
        const Raster& orig = *ds.images[i].pixels;
        const Raster& back = *loaded.images[i].pixels;
        REQUIRE(orig.data.size() == back.data.size());
        float worst = 0.0f;
        for (std::size_t p = 0; p < orig.data.size(); ++p)
            worst = std::max(worst, std::abs(orig.data[p] - back.data[p]));
        CHECK(worst <= 0.5f / 255.0f + 1e-6f);
    }

    std::ifstream manifest(dir / "manifest.json");
    std::string text((std::istreambuf_iterator<char>(manifest)),
                     std::istreambuf_iterator<char>());
    auto j = nlohmann::json::parse(text);
    CHECK(j.at("n_images") == 5);
    CHECK(scene_config_from_json(j.at("scene_config").dump()) == cfg);
}
