#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "osdbench/raster.hpp"

namespace osd {

// COCO (x, y, w, h) convention: x/y is the top-left corner. Internal geometry
// (IoU, window matching) converts to corner form at the matcheval/siamdet
// boundary.
struct BoundingBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double x2() const { return x + w; }
    double y2() const { return y + h; }
    double area() const { return w * h; }
    bool valid() const { return w > 0.0 && h > 0.0; }

    bool operator==(const BoundingBox&) const = default;
};

struct InstanceAnnotation {
    std::int64_t id = 0;
    std::int64_t image_id = 0;
    std::int64_t category_id = 0;
    BoundingBox bbox;
    bool is_crowd = false;

    bool operator==(const InstanceAnnotation&) const = default;
};

struct ImageRecord {
    std::int64_t id = 0;
    int width = 0;
    int height = 0;
    std::string file_name;          // may be empty for synthetic in-memory data
    std::optional<Raster> pixels;   // populated for synthetic scenes / loaded rasters

    bool operator==(const ImageRecord&) const = default;
};

struct CategoryRecord {
    std::int64_t id = 0;
    std::string name;

    bool operator==(const CategoryRecord&) const = default;
};

struct Dataset {
    std::vector<ImageRecord> images;
    std::vector<InstanceAnnotation> annotations;
    std::vector<CategoryRecord> categories;
    // True when every instance of every category is annotated in every image.
    bool exhaustive = true;
    // LVIS-style metadata: per-image category ids that are not exhaustively labeled.
    std::optional<std::map<std::int64_t, std::set<std::int64_t>>> not_exhaustive_map;

    bool operator==(const Dataset&) const = default;
};

struct DatasetStats {
    std::int64_t n_classes = 0;
    std::int64_t n_images = 0;
    std::int64_t n_instances = 0;
    double instances_per_image = 0.0;
    double classes_per_image = 0.0;
};

struct LoaderOptions {
    // When set, image rasters are loaded from raster_dir/file_name (PGM).
    std::optional<std::string> raster_dir;
};

struct LoadStats {
    std::int64_t n_clamped = 0;            // boxes clamped to image bounds
    std::int64_t n_dropped_degenerate = 0; // boxes empty after clamping
};

// Fast id-based lookups over an immutable Dataset.
class DatasetIndex {
public:
    explicit DatasetIndex(const Dataset& ds);

    const ImageRecord* image(std::int64_t id) const;
    const CategoryRecord* category(std::int64_t id) const;
    const InstanceAnnotation* annotation(std::int64_t id) const;

    // Annotation indices (into ds.annotations), in insertion order.
    const std::vector<std::size_t>& annotations_of_image(std::int64_t image_id) const;
    const std::vector<std::size_t>& annotations_of_category(std::int64_t category_id) const;

    // Distinct category ids with at least one annotation in the image, ascending.
    std::vector<std::int64_t> categories_in_image(std::int64_t image_id) const;

    const Dataset& dataset() const { return *ds_; }

private:
    const Dataset* ds_;
    std::map<std::int64_t, std::size_t> image_by_id_;
    std::map<std::int64_t, std::size_t> category_by_id_;
    std::map<std::int64_t, std::size_t> annotation_by_id_;
    std::map<std::int64_t, std::vector<std::size_t>> by_image_;
    std::map<std::int64_t, std::vector<std::size_t>> by_category_;
    std::vector<std::size_t> empty_;
};

// Throws IntegrityError on dangling references, duplicate ids, bad dimensions
// or invalid boxes. Called by the loader; usable directly on built datasets.
void validate_dataset(const Dataset& ds);

// Parses COCO-style JSON. Out-of-bounds boxes are clamped, degenerate boxes
// dropped; counts are reported through `stats` and logged to stderr.
Dataset load_dataset(const std::string& path, const LoaderOptions& options = {},
                     LoadStats* stats = nullptr);

// Same schema as the loader accepts, fixed key order, byte-stable output.
std::string serialize_dataset(const Dataset& ds);
void save_dataset(const std::string& path, const Dataset& ds);

DatasetStats dataset_stats(const Dataset& ds);

}  // namespace osd
