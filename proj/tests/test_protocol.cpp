#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "osdbench/annotations.hpp"
#include "osdbench/common.hpp"
#include "osdbench/protocol.hpp"

using namespace osd;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
    fs::path dir = fs::temp_directory_path() / "osdbench_test_protocol";
    fs::create_directories(dir);
    return dir;
}

std::vector<CategoryRecord> numbered_categories(int n, std::int64_t id_step = 1,
                                                std::int64_t id_base = 1) {
    std::vector<CategoryRecord> cats;
    for (int i = 0; i < n; ++i)
        cats.push_back({id_base + id_step * i, "cat_" + std::to_string(i)});
    return cats;
}

// Images hold one annotation per (image, category) pair listed; category c of
// image i gets a box offset so ids stay readable.
Dataset grid_dataset(const std::vector<std::vector<std::int64_t>>& image_cats, int n_categories) {
    Dataset ds;
    ds.categories = numbered_categories(n_categories);
    std::int64_t next_ann = 1;
    for (std::size_t i = 0; i < image_cats.size(); ++i) {
        auto img_id = static_cast<std::int64_t>(i + 1);
        ds.images.push_back({img_id, 64, 64, "", std::nullopt});
        for (std::int64_t c : image_cats[i])
            ds.annotations.push_back({next_ann++, img_id, c, {2.0 * c, 4.0, 8.0, 8.0}, false});
    }
    return ds;
}

}  // namespace

TEST_CASE("splits stripe the sorted category universe") {
    // Non-contiguous ids, deliberately unsorted input order.
    std::vector<CategoryRecord> cats = numbered_categories(11, 7, 3);
    std::reverse(cats.begin(), cats.end());
    std::vector<CategorySplit> splits = make_splits(cats, {});
    REQUIRE(splits.size() == 4);

    std::vector<std::int64_t> sorted_ids;
    for (const auto& c : cats) sorted_ids.push_back(c.id);
    std::sort(sorted_ids.begin(), sorted_ids.end());

    for (int s = 0; s < 4; ++s) {
        const auto& split = splits[s];
        CHECK(split.split_index == s);
        // Partition: train and heldout are disjoint and cover the universe.
        std::set<std::int64_t> all = split.train_category_ids;
        for (std::int64_t id : split.heldout_category_ids) CHECK(all.insert(id).second);
        CHECK(all == std::set<std::int64_t>(sorted_ids.begin(), sorted_ids.end()));
        // Position i of the sorted universe is held out in split i mod 4.
        for (std::size_t i = 0; i < sorted_ids.size(); ++i) {
            bool held = split.heldout_category_ids.count(sorted_ids[i]) > 0;
            CHECK(held == (static_cast<int>(i % 4) == s));
        }
    }

    // Each category is held out in exactly one split.
    for (std::int64_t id : sorted_ids) {
        int held_count = 0;
        for (const auto& split : splits) held_count += split.heldout_category_ids.count(id);
        CHECK(held_count == 1);
    }
}

TEST_CASE("split sizes for the benchmark universe sizes") {
    auto train_sizes = [](int n_categories) {
        std::vector<std::size_t> sizes;
        for (const auto& s : make_splits(numbered_categories(n_categories), {}))
            sizes.push_back(s.train_category_ids.size());
        std::sort(sizes.begin(), sizes.end());
        return sizes;
    };
    CHECK(train_sizes(20) == std::vector<std::size_t>{15, 15, 15, 15});
    CHECK(train_sizes(80) == std::vector<std::size_t>{60, 60, 60, 60});
    // Universes not divisible by 4 deviate from the even size by at most one.
    CHECK(train_sizes(365) == std::vector<std::size_t>{273, 274, 274, 274});
    CHECK(train_sizes(1203) == std::vector<std::size_t>{902, 902, 902, 903});
}

TEST_CASE("split construction is independent of input order") {
    std::vector<CategoryRecord> cats = numbered_categories(17, 3, 100);
    std::vector<CategoryRecord> shuffled = cats;
    Rng rng(5);
    rng.shuffle(shuffled);
    CHECK(make_splits(cats, {}) == make_splits(shuffled, {}));
}

TEST_CASE("make_splits rejects tiny inputs") {
    CHECK_THROWS_AS(make_splits(numbered_categories(3), {}), ConfigError);
    SplitSpec spec;
    spec.n_splits = 1;
    CHECK_THROWS_AS(make_splits(numbered_categories(8), spec), ConfigError);
}

TEST_CASE("apply_split removes held-out labels from the training phase only") {
    Dataset ds = grid_dataset({{2}, {1, 2}, {1}}, 2);
    CategorySplit split;
    split.split_index = 0;
    split.train_category_ids = {1};
    split.heldout_category_ids = {2};

    Dataset train = apply_split(ds, split, Phase::train);
    // Image 1 only carried category 2, so it disappears entirely.
    REQUIRE(train.images.size() == 2);
    CHECK(train.images[0].id == 2);
    CHECK(train.images[1].id == 3);
    for (const auto& ann : train.annotations) CHECK(ann.category_id == 1);
    CHECK(train.annotations.size() == 2);
    CHECK(train.categories == ds.categories);  // category table is never trimmed

    CHECK(apply_split(ds, split, Phase::eval) == ds);

    CategorySplit bad = split;
    bad.heldout_category_ids.insert(99);
    CHECK_THROWS_AS(apply_split(ds, bad, Phase::train), ConfigError);
}

TEST_CASE("exclusion split follows the external hold-out through the correspondence") {
    Dataset ds = grid_dataset({{1, 2, 3}}, 3);
    CategorySplit external;
    external.split_index = 2;
    external.train_category_ids = {20};
    external.heldout_category_ids = {10};

    std::map<std::int64_t, std::int64_t> corr{{1, 10}, {2, 20}};
    CategorySplit split = make_exclusion_split(ds, corr, external);
    CHECK(split.split_index == 2);
    CHECK(split.heldout_category_ids == std::set<std::int64_t>{1});
    // Mapped-to-train and unmapped categories both train.
    CHECK(split.train_category_ids == std::set<std::int64_t>{2, 3});

    std::map<std::int64_t, std::int64_t> bad_src{{99, 10}};
    CHECK_THROWS_AS(make_exclusion_split(ds, bad_src, external), ConfigError);
    std::map<std::int64_t, std::int64_t> bad_dst{{1, 999}};
    CHECK_THROWS_AS(make_exclusion_split(ds, bad_dst, external), ConfigError);
}

TEST_CASE("category fraction keeps a ceil-sized deterministic subset") {
    // 10 categories, 2 instances each over 5 images.
    std::vector<std::vector<std::int64_t>> layout(5);
    for (std::int64_t c = 1; c <= 10; ++c) {
        layout[(c - 1) % 5].push_back(c);
        layout[(c + 1) % 5].push_back(c);
    }
    Dataset ds = grid_dataset(layout, 10);
    std::set<std::int64_t> train_cats;
    for (std::int64_t c = 1; c <= 10; ++c) train_cats.insert(c);

    SubsampleSpec spec;
    spec.mode = SubsampleMode::category_fraction;
    spec.fraction = 0.5;
    spec.seed = 71;
    SubsampleResult res = subsample_training_set(ds, train_cats, spec);
    CHECK(res.kept_categories.size() == 5);
    for (std::int64_t c : res.kept_categories) CHECK(train_cats.count(c) == 1);
    for (const auto& ann : res.dataset.annotations)
        CHECK(res.kept_categories.count(ann.category_id) == 1);
    CHECK(res.instance_budget == static_cast<std::int64_t>(res.dataset.annotations.size()));
    CHECK(res.instance_budget == 10);  // 5 categories x 2 instances

    // Same seed reproduces, another seed picks a different subset somewhere.
    CHECK(subsample_training_set(ds, train_cats, spec).kept_categories == res.kept_categories);
    bool any_differs = false;
    for (std::uint64_t seed = 100; seed < 105; ++seed) {
        SubsampleSpec other = spec;
        other.seed = seed;
        if (subsample_training_set(ds, train_cats, other).kept_categories != res.kept_categories)
            any_differs = true;
    }
    CHECK(any_differs);

    SubsampleSpec full = spec;
    full.fraction = 1.0;
    SubsampleResult all = subsample_training_set(ds, train_cats, full);
    CHECK(all.kept_categories == train_cats);
    CHECK(all.dataset.annotations.size() == ds.annotations.size());

    // ceil(0.24 * 25) = 6
    std::set<std::int64_t> cats25;
    Dataset ds25;
    ds25.categories = numbered_categories(25);
    ds25.images.push_back({1, 64, 64, "", std::nullopt});
    for (std::int64_t c = 1; c <= 25; ++c) {
        cats25.insert(c);
        ds25.annotations.push_back({c, 1, c, {1, 1, 4, 4}, false});
    }
    SubsampleSpec frac;
    frac.fraction = 0.24;
    frac.seed = 3;
    CHECK(subsample_training_set(ds25, cats25, frac).kept_categories.size() == 6);

    SubsampleSpec bad = spec;
    bad.fraction = 0.0;
    CHECK_THROWS_AS(subsample_training_set(ds, train_cats, bad), ConfigError);
    bad.fraction = 1.5;
    CHECK_THROWS_AS(subsample_training_set(ds, train_cats, bad), ConfigError);
    CHECK_THROWS_AS(subsample_training_set(ds, {}, spec), ConfigError);
}

TEST_CASE("instance-matched modes share the subset budget") {
    // Uneven instance counts: category c has c annotations.
    Dataset ds;
    ds.categories = numbered_categories(8);
    ds.images.push_back({1, 256, 256, "", std::nullopt});
    std::int64_t next = 1;
    std::set<std::int64_t> train_cats;
    for (std::int64_t c = 1; c <= 8; ++c) {
        train_cats.insert(c);
        for (std::int64_t k = 0; k < c; ++k)
            ds.annotations.push_back({next++, 1, c, {2.0 * k, 2.0 * c, 4.0, 4.0}, false});
    }

    SubsampleSpec subset_spec;
    subset_spec.mode = SubsampleMode::instance_matched_subset;
    subset_spec.fraction = 0.5;
    subset_spec.seed = 9;
    SubsampleResult subset = subsample_training_set(ds, train_cats, subset_spec);

    SubsampleSpec frac_spec = subset_spec;
    frac_spec.mode = SubsampleMode::category_fraction;
    SubsampleResult frac = subsample_training_set(ds, train_cats, frac_spec);
    CHECK(subset.dataset == frac.dataset);
    CHECK(subset.instance_budget == frac.instance_budget);

    SubsampleSpec all_spec = subset_spec;
    all_spec.mode = SubsampleMode::instance_matched_all;
    SubsampleResult all = subsample_training_set(ds, train_cats, all_spec);
    CHECK(all.instance_budget == subset.instance_budget);
    CHECK(static_cast<std::int64_t>(all.dataset.annotations.size()) == all.instance_budget);
    CHECK(all.kept_categories == train_cats);
    for (const auto& ann : all.dataset.annotations) CHECK(train_cats.count(ann.category_id) == 1);
    // The spread sample reaches outside the 4-category subset.
    std::set<std::int64_t> cats_in_sample;
    for (const auto& ann : all.dataset.annotations) cats_in_sample.insert(ann.category_id);
    CHECK(cats_in_sample.size() > subset.kept_categories.size());

    SubsampleSpec quota_spec = all_spec;
    quota_spec.per_category_quota = true;
    SubsampleResult quota = subsample_training_set(ds, train_cats, quota_spec);
    CHECK(quota.instance_budget == subset.instance_budget);
    CHECK(static_cast<std::int64_t>(quota.dataset.annotations.size()) == quota.instance_budget);
    // Round-robin allocation: realized counts differ by at most one between any
    // two categories that still had annotations left.
    std::map<std::int64_t, std::int64_t> per_cat;
    for (const auto& ann : quota.dataset.annotations) ++per_cat[ann.category_id];
    std::int64_t lo = 1 << 30, hi = 0;
    for (std::int64_t c = 1; c <= 8; ++c) {
        std::int64_t got = per_cat.count(c) ? per_cat[c] : 0;
        hi = std::max(hi, got);
        if (got < c) lo = std::min(lo, got);  // category not exhausted
    }
    CHECK(hi - lo <= 1);
}

TEST_CASE("split manifests round trip through json") {
    std::vector<CategorySplit> splits = make_splits(numbered_categories(13, 2, 4), {});
    fs::path path = tmp_dir() / "splits.json";
    save_splits(path.string(), splits);
    CHECK(load_splits(path.string()) == splits);
}

TEST_CASE("subsample manifest records the draw") {
    Dataset ds = grid_dataset({{1, 2}, {1, 2}}, 2);
    std::set<std::int64_t> cats{1, 2};
    SubsampleSpec spec;
    spec.fraction = 0.5;
    spec.seed = 42;
    SubsampleResult res = subsample_training_set(ds, cats, spec);
    CategorySplit split;
    split.train_category_ids = cats;

    auto j = nlohmann::json::parse(subsample_manifest_json(split, spec, res));
    CHECK(j.at("mode") == "category_fraction");
    CHECK(j.at("fraction") == 0.5);
    CHECK(j.at("seed") == 42);
    CHECK(j.at("instance_budget").get<std::int64_t>() == res.instance_budget);
    CHECK(j.at("kept_category_ids").size() == res.kept_categories.size());
}

TEST_CASE("mode names round trip") {
    for (auto mode : {SubsampleMode::category_fraction, SubsampleMode::instance_matched_subset,
                      SubsampleMode::instance_matched_all})
        CHECK(subsample_mode_from_string(to_string(mode)) == mode);
    CHECK_THROWS_AS(subsample_mode_from_string("bogus"), ConfigError);
}

TEST_CASE("correspondence csv accepts a header and rejects duplicates") {
    fs::path path = tmp_dir() / "corr.csv";
    {
        std::ofstream out(path);
        out << "source_id,target_id\n17,4\n23,9\n";
    }
    auto map = load_correspondence_csv(path.string());
    CHECK(map == std::map<std::int64_t, std::int64_t>{{17, 4}, {23, 9}});

    {
        std::ofstream out(path);
        out << "1,2\n1,3\n";
    }
    CHECK_THROWS_WITH_AS(load_correspondence_csv(path.string()),
                         doctest::Contains("duplicate source"), ParseError);

    {
        std::ofstream out(path);
        out << "1,2\nx,3\n";
    }
    CHECK_THROWS_AS(load_correspondence_csv(path.string()), ParseError);
    CHECK_THROWS_AS(load_correspondence_csv((tmp_dir() / "missing.csv").string()), ParseError);
}
