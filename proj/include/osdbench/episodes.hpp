#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "osdbench/annotations.hpp"
#include "osdbench/common.hpp"
#include "osdbench/protocol.hpp"
#include "osdbench/raster.hpp"

namespace osd {

// Tight crop of one instance, padded to square and resized to a fixed
// resolution. An empty crop is all zeros and stands in for the query category.
struct ReferenceCrop {
    std::int64_t source_annotation_id = -1;  // -1 for empty references
    Raster pixels;
    std::int64_t category_id = 0;
    bool is_empty = false;
};

struct TrainingEpisode {
    std::int64_t image_id = 0;
    Raster pixels;  // the query scene
    ReferenceCrop reference;
    std::vector<BoundingBox> boxes;     // all annotated boxes of the image
    std::vector<int> labels;            // 1 iff box category == reference category
    std::vector<std::int64_t> annotation_ids;
    bool same_image_reference = false;  // fallback: reference drawn from this image
};

enum class QueryGroup { train, heldout };

struct EvalQuery {
    std::int64_t image_id = 0;
    std::int64_t category_id = 0;
    std::vector<ReferenceCrop> references;  // length k
    QueryGroup group = QueryGroup::train;
    bool insufficient_refs = false;     // fewer than k distinct instances available
    bool same_image_reference = false;  // category present in no other eval image
};

struct EpisodeConfig {
    int reference_resolution = 64;
    // Extra context around the tight box, as a fraction of max(w, h) per side.
    double context_margin = 0.0;
};

struct EvalQueryOptions {
    int k = 1;
    bool empty_refs = false;
    // Skip present categories outside the split universe instead of throwing;
    // used with subsampled effective splits.
    bool skip_unsplit_categories = false;
    EpisodeConfig crop;
};

// Tight crop per the annotation box (optionally with context margin),
// pad-to-square, bilinear resize.
Raster crop_reference_pixels(const Raster& src, const BoundingBox& box,
                             const EpisodeConfig& cfg);
ReferenceCrop make_reference_crop(const Dataset& ds, const DatasetIndex& index,
                                  std::int64_t annotation_id, const EpisodeConfig& cfg);
ReferenceCrop make_empty_reference(std::int64_t category_id, const EpisodeConfig& cfg);

// Reference category uniform over categories present in the image; reference
// instance uniform over that category's instances in other images, falling
// back to the same image (flagged) when none exist.
TrainingEpisode sample_training_episode(const Dataset& ds, const DatasetIndex& index,
                                        std::int64_t image_id, Rng& rng,
                                        const EpisodeConfig& cfg = {});

// Deterministic episode source over a dataset: the episode for (image, draw)
// depends only on (seed, image_id, draw), so parallel and serial schedules
// agree.
class EpisodeSampler {
public:
    EpisodeSampler(const Dataset& ds, std::uint64_t seed, EpisodeConfig cfg = {});

    TrainingEpisode sample(std::int64_t image_id, std::uint64_t draw_index) const;
    // Image ids that can seed an episode (at least one annotation), ascending.
    const std::vector<std::int64_t>& image_ids() const { return image_ids_; }
    const DatasetIndex& index() const { return index_; }

private:
    const Dataset* ds_;
    DatasetIndex index_;
    std::uint64_t seed_;
    EpisodeConfig cfg_;
    std::vector<std::int64_t> image_ids_;
};

// One query per (image, present-category) pair. References are drawn without
// replacement from the category's instances in other images of `ds` (with
// replacement, flagged, when fewer than k exist). Per-image derived seeds.
std::vector<EvalQuery> build_eval_queries(const Dataset& ds, const CategorySplit& split,
                                          const EvalQueryOptions& opts, std::uint64_t seed);

// Audit trail: one JSON line per query (ids, group, flags), no pixel data.
void save_query_manifest(const std::string& path, const std::vector<EvalQuery>& queries);

}  // namespace osd
