#include "osdbench/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace osd {

Raster crop_reference_pixels(const Raster& src, const BoundingBox& box,
                             const EpisodeConfig& cfg) {
    double side = std::max(box.w, box.h) * (1.0 + 2.0 * cfg.context_margin);
    double cx = box.x + box.w / 2.0;
    double cy = box.y + box.h / 2.0;
    return resample_square(src, cx, cy, side / 2.0, cfg.reference_resolution);
}

ReferenceCrop make_reference_crop(const Dataset& ds, const DatasetIndex& index,
                                  std::int64_t annotation_id, const EpisodeConfig& cfg) {
    const InstanceAnnotation* ann = index.annotation(annotation_id);
    if (!ann) throw IntegrityError("unknown annotation id " + std::to_string(annotation_id));
    const ImageRecord* img = index.image(ann->image_id);
    if (!img->pixels)
        throw Error("reference crop needs pixels for image " + std::to_string(img->id) +
                    " (load with raster_dir or use synthetic data)");
    (void)ds;
    ReferenceCrop crop;
    crop.source_annotation_id = annotation_id;
    crop.category_id = ann->category_id;
    crop.is_empty = false;
    crop.pixels = crop_reference_pixels(*img->pixels, ann->bbox, cfg);
    return crop;
}

ReferenceCrop make_empty_reference(std::int64_t category_id, const EpisodeConfig& cfg) {
    ReferenceCrop crop;
    crop.source_annotation_id = -1;
    crop.category_id = category_id;
    crop.is_empty = true;
    crop.pixels = Raster(cfg.reference_resolution, cfg.reference_resolution, 0.0f);
    return crop;
}

namespace {

// Candidates of `category` in images other than `image_id`, insertion order.
std::vector<std::size_t> cross_image_candidates(const Dataset& ds, const DatasetIndex& index,
                                                std::int64_t category_id,
                                                std::int64_t image_id) {
    std::vector<std::size_t> out;
    for (std::size_t i : index.annotations_of_category(category_id))
        if (ds.annotations[i].image_id != image_id) out.push_back(i);
    return out;
}

}  // namespace

TrainingEpisode sample_training_episode(const Dataset& ds, const DatasetIndex& index,
                                        std::int64_t image_id, Rng& rng,
                                        const EpisodeConfig& cfg) {
    const auto& ann_indices = index.annotations_of_image(image_id);
    if (ann_indices.empty())
        throw ConfigError("sample_training_episode: image " + std::to_string(image_id) +
                          " has no annotations");
    std::vector<std::int64_t> present = index.categories_in_image(image_id);
    std::int64_t ref_cat = present[rng.below(present.size())];

    std::vector<std::size_t> candidates = cross_image_candidates(ds, index, ref_cat, image_id);
    bool same_image = false;
    if (candidates.empty()) {
        // Same-image fallback, always flagged. With a single instance the crop
        // is that instance itself.
        same_image = true;
        for (std::size_t i : index.annotations_of_category(ref_cat))
            if (ds.annotations[i].image_id == image_id) candidates.push_back(i);
    }
    std::size_t ref_idx = candidates[rng.below(candidates.size())];

    const ImageRecord* img = index.image(image_id);
    if (!img->pixels)
        throw ConfigError("sample_training_episode: image " + std::to_string(image_id) +
                          " has no pixels");
    TrainingEpisode ep;
    ep.image_id = image_id;
    ep.pixels = *img->pixels;
    ep.same_image_reference = same_image;
    ep.reference = make_reference_crop(ds, index, ds.annotations[ref_idx].id, cfg);
    for (std::size_t i : ann_indices) {
        const auto& ann = ds.annotations[i];
        ep.boxes.push_back(ann.bbox);
        ep.labels.push_back(ann.category_id == ref_cat ? 1 : 0);
        ep.annotation_ids.push_back(ann.id);
    }
    return ep;
}

EpisodeSampler::EpisodeSampler(const Dataset& ds, std::uint64_t seed, EpisodeConfig cfg)
    : ds_(&ds), index_(ds), seed_(seed), cfg_(cfg) {
    std::set<std::int64_t> with_anns;
    for (const auto& ann : ds.annotations) with_anns.insert(ann.image_id);
    image_ids_.assign(with_anns.begin(), with_anns.end());
}

TrainingEpisode EpisodeSampler::sample(std::int64_t image_id, std::uint64_t draw_index) const {
    Rng rng(mix(seed_, static_cast<std::uint64_t>(image_id), draw_index));
    return sample_training_episode(*ds_, index_, image_id, rng, cfg_);
}

std::vector<EvalQuery> build_eval_queries(const Dataset& ds, const CategorySplit& split,
                                          const EvalQueryOptions& opts, std::uint64_t seed) {
    if (opts.k < 1) throw ConfigError("build_eval_queries: k must be >= 1");
    DatasetIndex index(ds);
    std::vector<std::int64_t> image_ids;
    for (const auto& img : ds.images) image_ids.push_back(img.id);
    std::sort(image_ids.begin(), image_ids.end());

    std::vector<EvalQuery> queries;
    for (std::int64_t image_id : image_ids) {
        Rng rng(mix(seed, static_cast<std::uint64_t>(image_id)));
        for (std::int64_t cat : index.categories_in_image(image_id)) {
            QueryGroup group;
            if (split.heldout_category_ids.count(cat))
                group = QueryGroup::heldout;
            else if (split.train_category_ids.count(cat))
                group = QueryGroup::train;
            else if (opts.skip_unsplit_categories)
                continue;
            else
                throw ProtocolError("category " + std::to_string(cat) +
                                    " present in image " + std::to_string(image_id) +
                                    " is not in the split universe");

            EvalQuery q;
            q.image_id = image_id;
            q.category_id = cat;
            q.group = group;

            std::vector<std::size_t> candidates =
                cross_image_candidates(ds, index, cat, image_id);
            if (candidates.empty()) {
                q.same_image_reference = true;
                for (std::size_t i : index.annotations_of_category(cat))
                    if (ds.annotations[i].image_id == image_id) candidates.push_back(i);
            }
            std::vector<std::size_t> picked;
            if (candidates.size() >= static_cast<std::size_t>(opts.k)) {
                // Partial Fisher-Yates: k draws without replacement.
                std::vector<std::size_t> pool = candidates;
                for (int j = 0; j < opts.k; ++j) {
                    std::size_t pick = j + static_cast<std::size_t>(rng.below(pool.size() - j));
                    std::swap(pool[static_cast<std::size_t>(j)], pool[pick]);
                    picked.push_back(pool[static_cast<std::size_t>(j)]);
                }
            } else {
                q.insufficient_refs = true;
                for (int j = 0; j < opts.k; ++j)
                    picked.push_back(candidates[rng.below(candidates.size())]);
            }
            for (std::size_t idx : picked) {
                if (opts.empty_refs)
                    q.references.push_back(make_empty_reference(cat, opts.crop));
                else
                    q.references.push_back(
                        make_reference_crop(ds, index, ds.annotations[idx].id, opts.crop));
            }
            queries.push_back(std::move(q));
        }
    }
    return queries;
}

void save_query_manifest(const std::string& path, const std::vector<EvalQuery>& queries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    for (const auto& q : queries) {
        nlohmann::ordered_json j;
        j["image_id"] = q.image_id;
        j["category_id"] = q.category_id;
        j["group"] = q.group == QueryGroup::heldout ? "heldout" : "train";
        std::vector<std::int64_t> refs;
        for (const auto& r : q.references) refs.push_back(r.source_annotation_id);
        j["reference_annotation_ids"] = refs;
        j["insufficient_refs"] = q.insufficient_refs;
        j["same_image_reference"] = q.same_image_reference;
        out << j.dump() << "\n";
    }
}

}  // namespace osd
