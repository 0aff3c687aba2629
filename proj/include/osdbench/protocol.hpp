#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "osdbench/annotations.hpp"

namespace osd {

enum class CategoryOrdering { ascending_id };

struct SplitSpec {
    int n_splits = 4;
    CategoryOrdering ordering = CategoryOrdering::ascending_id;
};

// One of n partitions of the category universe into train / held-out.
struct CategorySplit {
    int split_index = 0;
    std::set<std::int64_t> train_category_ids;
    std::set<std::int64_t> heldout_category_ids;

    bool operator==(const CategorySplit&) const = default;
};

enum class SubsampleMode { category_fraction, instance_matched_subset, instance_matched_all };

struct SubsampleSpec {
    SubsampleMode mode = SubsampleMode::category_fraction;
    double fraction = 1.0;  // in (0, 1]
    std::uint64_t seed = 0;
    // Alternative budget allocation for instance_matched_all: equal per-category
    // quotas instead of uniform-over-instances.
    bool per_category_quota = false;
};

struct SubsampleResult {
    Dataset dataset;
    // Categories whose annotations were kept (the sampled subset for the
    // *_subset modes, all train categories for instance_matched_all).
    std::set<std::int64_t> kept_categories;
    // Number of annotations in the output (the budget B for matched modes).
    std::int64_t instance_budget = 0;
};

enum class Phase { train, eval };

// Categories sorted ascending by id; position i is held out in split i mod n.
std::vector<CategorySplit> make_splits(const std::vector<CategoryRecord>& categories,
                                       const SplitSpec& spec = {});

// phase == train: drop annotations of held-out categories, then drop images left
// without annotations. phase == eval: the dataset is returned unchanged; group
// attribution happens downstream against the split.
Dataset apply_split(const Dataset& ds, const CategorySplit& split, Phase phase);

// Hold out every ds category whose correspondent is held out in the external
// split; everything else (mapped-to-train and unmapped) trains.
CategorySplit make_exclusion_split(const Dataset& ds,
                                   const std::map<std::int64_t, std::int64_t>& correspondence,
                                   const CategorySplit& external_split);

SubsampleResult subsample_training_set(const Dataset& ds,
                                       const std::set<std::int64_t>& train_cats,
                                       const SubsampleSpec& spec);

const char* to_string(SubsampleMode mode);
SubsampleMode subsample_mode_from_string(const std::string& name);

// JSON split manifests ({split_index, train_category_ids, heldout_category_ids}).
void save_splits(const std::string& path, const std::vector<CategorySplit>& splits);
std::vector<CategorySplit> load_splits(const std::string& path);

// Subsample manifest: split + spec + realized budget.
std::string subsample_manifest_json(const CategorySplit& split, const SubsampleSpec& spec,
                                    const SubsampleResult& result);

// Two-column CSV (source_id, target_id); a non-numeric first row is treated as
// a header and skipped.
std::map<std::int64_t, std::int64_t> load_correspondence_csv(const std::string& path);

}  // namespace osd
