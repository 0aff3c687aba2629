#include "osdbench/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "osdbench/common.hpp"

namespace osd {

using ordered_json = nlohmann::ordered_json;

std::vector<CategorySplit> make_splits(const std::vector<CategoryRecord>& categories,
                                       const SplitSpec& spec) {
    if (spec.n_splits < 2) throw ConfigError("make_splits: n_splits must be >= 2");
    if (static_cast<int>(categories.size()) < spec.n_splits)
        throw ConfigError("make_splits: fewer categories (" +
                          std::to_string(categories.size()) + ") than splits (" +
                          std::to_string(spec.n_splits) + ")");
    std::vector<std::int64_t> ids;
    ids.reserve(categories.size());
    for (const auto& cat : categories) ids.push_back(cat.id);
    std::sort(ids.begin(), ids.end());  // CategoryOrdering::ascending_id

    std::vector<CategorySplit> splits(static_cast<std::size_t>(spec.n_splits));
    for (int s = 0; s < spec.n_splits; ++s) splits[static_cast<std::size_t>(s)].split_index = s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int held_in = static_cast<int>(i % static_cast<std::size_t>(spec.n_splits));
        for (int s = 0; s < spec.n_splits; ++s) {
            auto& split = splits[static_cast<std::size_t>(s)];
            if (s == held_in)
                split.heldout_category_ids.insert(ids[i]);
            else
                split.train_category_ids.insert(ids[i]);
        }
    }
    return splits;
}

namespace {

void check_split_categories(const Dataset& ds, const CategorySplit& split) {
    std::set<std::int64_t> known;
    for (const auto& cat : ds.categories) known.insert(cat.id);
    for (const auto& ids : {split.train_category_ids, split.heldout_category_ids})
        for (std::int64_t id : ids)
            if (!known.count(id))
                throw ConfigError("apply_split: split references unknown category " +
                                  std::to_string(id));
}

// Drops annotations that fail `keep_ann`, then images left without annotations,
// then prunes not_exhaustive_map to surviving images.
template <typename Pred>
Dataset filter_annotations(const Dataset& ds, Pred keep_ann) {
    Dataset out;
    out.categories = ds.categories;
    out.exhaustive = ds.exhaustive;
    std::set<std::int64_t> images_with_annotations;
    for (const auto& ann : ds.annotations) {
        if (keep_ann(ann)) {
            out.annotations.push_back(ann);
            images_with_annotations.insert(ann.image_id);
        }
    }
    for (const auto& img : ds.images)
        if (images_with_annotations.count(img.id)) out.images.push_back(img);
    if (ds.not_exhaustive_map) {
        std::map<std::int64_t, std::set<std::int64_t>> pruned;
        for (const auto& [img_id, cats] : *ds.not_exhaustive_map)
            if (images_with_annotations.count(img_id)) pruned[img_id] = cats;
        if (!pruned.empty()) out.not_exhaustive_map = std::move(pruned);
    }
    return out;
}

}  // namespace

Dataset apply_split(const Dataset& ds, const CategorySplit& split, Phase phase) {
    check_split_categories(ds, split);
    if (phase == Phase::eval) return ds;
    return filter_annotations(ds, [&](const InstanceAnnotation& ann) {
        return !split.heldout_category_ids.count(ann.category_id);
    });
}

CategorySplit make_exclusion_split(const Dataset& ds,
                                   const std::map<std::int64_t, std::int64_t>& correspondence,
                                   const CategorySplit& external_split) {
    std::set<std::int64_t> known;
    for (const auto& cat : ds.categories) known.insert(cat.id);
    for (const auto& [src, dst] : correspondence) {
        if (!known.count(src))
            throw ConfigError("make_exclusion_split: correspondence source " +
                              std::to_string(src) + " not in dataset categories");
        if (!external_split.train_category_ids.count(dst) &&
            !external_split.heldout_category_ids.count(dst))
            throw ConfigError("make_exclusion_split: correspondent " + std::to_string(dst) +
                              " absent from external split universe");
    }
    CategorySplit split;
    split.split_index = external_split.split_index;
    for (const auto& cat : ds.categories) {
        auto it = correspondence.find(cat.id);
        bool heldout =
            it != correspondence.end() && external_split.heldout_category_ids.count(it->second);
        if (heldout)
            split.heldout_category_ids.insert(cat.id);
        else
            split.train_category_ids.insert(cat.id);
    }
    return split;
}

SubsampleResult subsample_training_set(const Dataset& ds,
                                       const std::set<std::int64_t>& train_cats,
                                       const SubsampleSpec& spec) {
    if (spec.fraction <= 0.0 || spec.fraction > 1.0)
        throw ConfigError("subsample: fraction must be in (0, 1]");
    if (train_cats.empty()) throw ConfigError("subsample: empty training category set");

    std::vector<std::int64_t> cats(train_cats.begin(), train_cats.end());  // ascending
    auto n_keep = static_cast<std::size_t>(
        std::ceil(spec.fraction * static_cast<double>(cats.size())));
    if (n_keep == 0) throw ConfigError("subsample: fraction yields 0 categories");

    // The category subset is a function of (train_cats, fraction, seed) only, so
    // the two instance-matched modes agree on the budget B for the same spec.
    Rng cat_rng(mix(spec.seed, 0xC47ULL));
    std::vector<std::int64_t> shuffled = cats;
    cat_rng.shuffle(shuffled);
    std::set<std::int64_t> subset(shuffled.begin(), shuffled.begin() + n_keep);

    auto count_subset_instances = [&]() {
        std::int64_t n = 0;
        for (const auto& ann : ds.annotations)
            if (subset.count(ann.category_id)) ++n;
        return n;
    };

    SubsampleResult result;
    switch (spec.mode) {
        case SubsampleMode::category_fraction:
        case SubsampleMode::instance_matched_subset: {
            result.dataset = filter_annotations(ds, [&](const InstanceAnnotation& ann) {
                return subset.count(ann.category_id) > 0;
            });
            result.kept_categories = subset;
            result.instance_budget = static_cast<std::int64_t>(result.dataset.annotations.size());
            break;
        }
        case SubsampleMode::instance_matched_all: {
            std::int64_t budget = count_subset_instances();
            std::vector<std::size_t> pool;
            for (std::size_t i = 0; i < ds.annotations.size(); ++i)
                if (train_cats.count(ds.annotations[i].category_id)) pool.push_back(i);
            if (budget > static_cast<std::int64_t>(pool.size()))
                throw ConfigError("subsample: instance budget " + std::to_string(budget) +
                                  " exceeds available annotations (" +
                                  std::to_string(pool.size()) + ")");
            Rng inst_rng(mix(spec.seed, 0xA11ULL));
            std::set<std::size_t> chosen;
            if (spec.per_category_quota) {
                // Round-robin over categories in ascending id order until the
                // budget is exhausted; per-category annotation order randomized.
                std::map<std::int64_t, std::vector<std::size_t>> per_cat;
                for (std::size_t i : pool) per_cat[ds.annotations[i].category_id].push_back(i);
                std::vector<std::vector<std::size_t>> lists;
                for (auto& [cat, list] : per_cat) {
                    inst_rng.shuffle(list);
                    lists.push_back(list);
                }
                std::int64_t taken = 0;
                for (std::size_t round = 0; taken < budget; ++round) {
                    bool any = false;
                    for (const auto& list : lists) {
                        if (round < list.size()) {
                            chosen.insert(list[round]);
                            any = true;
                            if (++taken == budget) break;
                        }
                    }
                    if (!any) break;
                }
            } else {
                // Uniform over instances: preserves the category frequency profile.
                std::vector<std::size_t> shuffled_pool = pool;
                inst_rng.shuffle(shuffled_pool);
                chosen.insert(shuffled_pool.begin(),
                              shuffled_pool.begin() + static_cast<std::size_t>(budget));
            }
            std::set<std::int64_t> ann_ids;
            for (std::size_t i : chosen) ann_ids.insert(ds.annotations[i].id);
            result.dataset = filter_annotations(ds, [&](const InstanceAnnotation& ann) {
                return ann_ids.count(ann.id) > 0;
            });
            result.kept_categories = train_cats;
            result.instance_budget = static_cast<std::int64_t>(result.dataset.annotations.size());
            break;
        }
    }
    return result;
}

const char* to_string(SubsampleMode mode) {
    switch (mode) {
        case SubsampleMode::category_fraction: return "category_fraction";
        case SubsampleMode::instance_matched_subset: return "instance_matched_subset";
        case SubsampleMode::instance_matched_all: return "instance_matched_all";
    }
    return "?";
}

SubsampleMode subsample_mode_from_string(const std::string& name) {
    if (name == "category_fraction") return SubsampleMode::category_fraction;
    if (name == "instance_matched_subset") return SubsampleMode::instance_matched_subset;
    if (name == "instance_matched_all") return SubsampleMode::instance_matched_all;
    throw ConfigError("unknown subsample mode: " + name);
}

namespace {

ordered_json split_to_json(const CategorySplit& split) {
    ordered_json j;
    j["split_index"] = split.split_index;
    j["train_category_ids"] =
        std::vector<std::int64_t>(split.train_category_ids.begin(),
                                  split.train_category_ids.end());
    j["heldout_category_ids"] =
        std::vector<std::int64_t>(split.heldout_category_ids.begin(),
                                  split.heldout_category_ids.end());
    return j;
}

CategorySplit split_from_json(const nlohmann::json& j) {
    CategorySplit split;
    split.split_index = j.at("split_index").get<int>();
    for (const auto& id : j.at("train_category_ids"))
        split.train_category_ids.insert(id.get<std::int64_t>());
    for (const auto& id : j.at("heldout_category_ids"))
        split.heldout_category_ids.insert(id.get<std::int64_t>());
    return split;
}

}  // namespace

void save_splits(const std::string& path, const std::vector<CategorySplit>& splits) {
    ordered_json root = ordered_json::array();
    for (const auto& split : splits) root.push_back(split_to_json(split));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    out << root.dump(2) << "\n";
}

std::vector<CategorySplit> load_splits(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open: " + path);
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("malformed JSON in " + path + ": " + e.what());
    }
    std::vector<CategorySplit> splits;
    try {
        if (root.is_array())
            for (const auto& j : root) splits.push_back(split_from_json(j));
        else
            splits.push_back(split_from_json(root));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return splits;
}

std::string subsample_manifest_json(const CategorySplit& split, const SubsampleSpec& spec,
                                    const SubsampleResult& result) {
    ordered_json j = split_to_json(split);
    j["seed"] = spec.seed;
    j["mode"] = to_string(spec.mode);
    j["fraction"] = spec.fraction;
    j["instance_budget"] = result.instance_budget;
    j["kept_category_ids"] =
        std::vector<std::int64_t>(result.kept_categories.begin(), result.kept_categories.end());
    return j.dump(2) + "\n";
}

std::map<std::int64_t, std::int64_t> load_correspondence_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open: " + path);
    std::map<std::int64_t, std::int64_t> map;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected two columns");
        try {
            std::int64_t src = std::stoll(line.substr(0, comma));
            std::int64_t dst = std::stoll(line.substr(comma + 1));
            if (map.count(src))
                throw ParseError(path + ":" + std::to_string(line_no) +
                                 ": duplicate source id " + std::to_string(src));
            map[src] = dst;
        } catch (const std::invalid_argument&) {
            if (line_no == 1) continue;  // header row
            throw ParseError(path + ":" + std::to_string(line_no) + ": non-numeric id");
        }
    }
    return map;
}

}  // namespace osd
