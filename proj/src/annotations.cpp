#include "osdbench/annotations.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "osdbench/common.hpp"

namespace osd {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

DatasetIndex::DatasetIndex(const Dataset& ds) : ds_(&ds) {
    for (std::size_t i = 0; i < ds.images.size(); ++i) image_by_id_[ds.images[i].id] = i;
    for (std::size_t i = 0; i < ds.categories.size(); ++i)
        category_by_id_[ds.categories[i].id] = i;
    for (std::size_t i = 0; i < ds.annotations.size(); ++i) {
        const auto& ann = ds.annotations[i];
        annotation_by_id_[ann.id] = i;
        by_image_[ann.image_id].push_back(i);
        by_category_[ann.category_id].push_back(i);
    }
}

const ImageRecord* DatasetIndex::image(std::int64_t id) const {
    auto it = image_by_id_.find(id);
    return it == image_by_id_.end() ? nullptr : &ds_->images[it->second];
}

const CategoryRecord* DatasetIndex::category(std::int64_t id) const {
    auto it = category_by_id_.find(id);
    return it == category_by_id_.end() ? nullptr : &ds_->categories[it->second];
}

const InstanceAnnotation* DatasetIndex::annotation(std::int64_t id) const {
    auto it = annotation_by_id_.find(id);
    return it == annotation_by_id_.end() ? nullptr : &ds_->annotations[it->second];
}

const std::vector<std::size_t>& DatasetIndex::annotations_of_image(std::int64_t image_id) const {
    auto it = by_image_.find(image_id);
    return it == by_image_.end() ? empty_ : it->second;
}

const std::vector<std::size_t>& DatasetIndex::annotations_of_category(
    std::int64_t category_id) const {
    auto it = by_category_.find(category_id);
    return it == by_category_.end() ? empty_ : it->second;
}

std::vector<std::int64_t> DatasetIndex::categories_in_image(std::int64_t image_id) const {
    std::set<std::int64_t> cats;
    for (std::size_t i : annotations_of_image(image_id))
        cats.insert(ds_->annotations[i].category_id);
    return {cats.begin(), cats.end()};
}

namespace {

template <typename T>
std::string join_ids(const std::vector<T>& ids, std::size_t limit = 10) {
    std::ostringstream out;
    for (std::size_t i = 0; i < ids.size() && i < limit; ++i) {
        if (i) out << ", ";
        out << ids[i];
    }
    if (ids.size() > limit) out << ", ... (" << ids.size() << " total)";
    return out.str();
}

}  // namespace

void validate_dataset(const Dataset& ds) {
    std::set<std::int64_t> image_ids;
    for (const auto& img : ds.images) {
        if (!image_ids.insert(img.id).second)
            throw IntegrityError("duplicate image id " + std::to_string(img.id));
        if (img.width <= 0 || img.height <= 0)
            throw IntegrityError("image " + std::to_string(img.id) +
                                 " has non-positive dimensions");
        if (img.pixels &&
            (img.pixels->width != img.width || img.pixels->height != img.height))
            throw IntegrityError("image " + std::to_string(img.id) +
                                 " raster does not match (width, height)");
    }
    std::set<std::int64_t> category_ids;
    for (const auto& cat : ds.categories) {
        if (!category_ids.insert(cat.id).second)
            throw IntegrityError("duplicate category id " + std::to_string(cat.id));
        if (cat.name.empty())
            throw IntegrityError("category " + std::to_string(cat.id) + " has empty name");
    }
    std::set<std::int64_t> annotation_ids;
    std::vector<std::int64_t> dangling;
    for (const auto& ann : ds.annotations) {
        if (!annotation_ids.insert(ann.id).second)
            throw IntegrityError("duplicate annotation id " + std::to_string(ann.id));
        if (!image_ids.count(ann.image_id) || !category_ids.count(ann.category_id))
            dangling.push_back(ann.id);
        if (!ann.bbox.valid())
            throw IntegrityError("annotation " + std::to_string(ann.id) +
                                 " has degenerate bbox");
    }
    if (!dangling.empty())
        throw IntegrityError("annotations with dangling image_id/category_id: " +
                             join_ids(dangling));
    if (ds.not_exhaustive_map) {
        for (const auto& [img_id, cats] : *ds.not_exhaustive_map) {
            if (!image_ids.count(img_id))
                throw IntegrityError("not_exhaustive_map references unknown image " +
                                     std::to_string(img_id));
            for (std::int64_t cat : cats)
                if (!category_ids.count(cat))
                    throw IntegrityError("not_exhaustive_map references unknown category " +
                                         std::to_string(cat));
        }
    }
}

Dataset load_dataset(const std::string& path, const LoaderOptions& options,
                     LoadStats* stats) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open: " + path);
    json root;
    try {
        root = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("malformed JSON in " + path + " at byte " +
                         std::to_string(e.byte) + ": " + e.what());
    }
    for (const char* key : {"images", "annotations", "categories"}) {
        if (!root.contains(key) || !root[key].is_array())
            throw ParseError(path + ": missing or non-array top-level key \"" +
                             std::string(key) + "\"");
    }

    Dataset ds;
    std::map<std::int64_t, std::set<std::int64_t>> not_exhaustive;
    try {
        for (const auto& j : root["images"]) {
            ImageRecord img;
            img.id = j.at("id").get<std::int64_t>();
            img.width = j.at("width").get<int>();
            img.height = j.at("height").get<int>();
            if (j.contains("file_name")) img.file_name = j["file_name"].get<std::string>();
            if (j.contains("not_exhaustive_category_ids")) {
                auto& cats = not_exhaustive[img.id];
                for (const auto& c : j["not_exhaustive_category_ids"])
                    cats.insert(c.get<std::int64_t>());
            }
            ds.images.push_back(std::move(img));
        }
        for (const auto& j : root["categories"]) {
            CategoryRecord cat;
            cat.id = j.at("id").get<std::int64_t>();
            cat.name = j.at("name").get<std::string>();
            ds.categories.push_back(std::move(cat));
        }
        for (const auto& j : root["annotations"]) {
            InstanceAnnotation ann;
            ann.id = j.at("id").get<std::int64_t>();
            ann.image_id = j.at("image_id").get<std::int64_t>();
            ann.category_id = j.at("category_id").get<std::int64_t>();
            const auto& bb = j.at("bbox");
            if (!bb.is_array() || bb.size() != 4)
                throw ParseError("annotation " + std::to_string(ann.id) +
                                 ": bbox must be [x, y, w, h]");
            ann.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(),
                        bb[3].get<double>()};
            if (j.contains("iscrowd")) ann.is_crowd = j["iscrowd"].get<int>() != 0;
            ds.annotations.push_back(ann);
        }
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }

    if (!not_exhaustive.empty()) {
        ds.not_exhaustive_map = std::move(not_exhaustive);
        ds.exhaustive = false;
    }

    // Referential integrity first, so clamping can assume resolvable image ids.
    {
        std::set<std::int64_t> image_ids, category_ids;
        for (const auto& img : ds.images) image_ids.insert(img.id);
        for (const auto& cat : ds.categories) category_ids.insert(cat.id);
        std::vector<std::int64_t> dangling;
        for (const auto& ann : ds.annotations)
            if (!image_ids.count(ann.image_id) || !category_ids.count(ann.category_id))
                dangling.push_back(ann.id);
        if (!dangling.empty())
            throw IntegrityError(path + ": annotations with dangling image_id/category_id: " +
                                 join_ids(dangling));
    }

    std::map<std::int64_t, const ImageRecord*> img_by_id;
    for (const auto& img : ds.images) img_by_id[img.id] = &img;

    LoadStats local;
    std::vector<InstanceAnnotation> kept;
    kept.reserve(ds.annotations.size());
    for (auto ann : ds.annotations) {
        const ImageRecord* img = img_by_id.at(ann.image_id);
        double x1 = std::clamp(ann.bbox.x, 0.0, static_cast<double>(img->width));
        double y1 = std::clamp(ann.bbox.y, 0.0, static_cast<double>(img->height));
        double x2 = std::clamp(ann.bbox.x2(), 0.0, static_cast<double>(img->width));
        double y2 = std::clamp(ann.bbox.y2(), 0.0, static_cast<double>(img->height));
        BoundingBox clamped{x1, y1, x2 - x1, y2 - y1};
        if (clamped != ann.bbox) ++local.n_clamped;
        if (!clamped.valid()) {
            ++local.n_dropped_degenerate;
            continue;
        }
        ann.bbox = clamped;
        kept.push_back(ann);
    }
    ds.annotations = std::move(kept);
    if (local.n_clamped || local.n_dropped_degenerate)
        std::cerr << "load_dataset " << path << ": clamped " << local.n_clamped
                  << " boxes, dropped " << local.n_dropped_degenerate
                  << " degenerate boxes\n";
    if (stats) *stats = local;

    if (options.raster_dir) {
        for (auto& img : ds.images) {
            if (img.file_name.empty()) continue;
            std::filesystem::path p = std::filesystem::path(*options.raster_dir) / img.file_name;
            img.pixels = read_pgm(p.string());
        }
    }

    validate_dataset(ds);
    return ds;
}

std::string serialize_dataset(const Dataset& ds) {
    ordered_json root;
    root["images"] = ordered_json::array();
    for (const auto& img : ds.images) {
        ordered_json j;
        j["id"] = img.id;
        j["width"] = img.width;
        j["height"] = img.height;
        j["file_name"] = img.file_name;
        if (ds.not_exhaustive_map) {
            auto it = ds.not_exhaustive_map->find(img.id);
            if (it != ds.not_exhaustive_map->end())
                j["not_exhaustive_category_ids"] =
                    std::vector<std::int64_t>(it->second.begin(), it->second.end());
        }
        root["images"].push_back(std::move(j));
    }
    root["annotations"] = ordered_json::array();
    for (const auto& ann : ds.annotations) {
        ordered_json j;
        j["id"] = ann.id;
        j["image_id"] = ann.image_id;
        j["category_id"] = ann.category_id;
        j["bbox"] = {ann.bbox.x, ann.bbox.y, ann.bbox.w, ann.bbox.h};
        j["iscrowd"] = ann.is_crowd ? 1 : 0;
        root["annotations"].push_back(std::move(j));
    }
    root["categories"] = ordered_json::array();
    for (const auto& cat : ds.categories) {
        ordered_json j;
        j["id"] = cat.id;
        j["name"] = cat.name;
        root["categories"].push_back(std::move(j));
    }
    return root.dump(2) + "\n";
}

void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    out << serialize_dataset(ds);
    if (!out) throw Error("short write: " + path);
}

DatasetStats dataset_stats(const Dataset& ds) {
    if (ds.images.empty())
        throw ConfigError("dataset_stats: empty image list (ratios undefined)");
    DatasetStats s;
    s.n_classes = static_cast<std::int64_t>(ds.categories.size());
    s.n_images = static_cast<std::int64_t>(ds.images.size());
    s.n_instances = static_cast<std::int64_t>(ds.annotations.size());
    s.instances_per_image =
        static_cast<double>(s.n_instances) / static_cast<double>(s.n_images);
    std::map<std::int64_t, std::set<std::int64_t>> cats_per_image;
    for (const auto& ann : ds.annotations)
        cats_per_image[ann.image_id].insert(ann.category_id);
    double total = 0.0;
    for (const auto& [img_id, cats] : cats_per_image) total += static_cast<double>(cats.size());
    s.classes_per_image = total / static_cast<double>(s.n_images);
    return s;
}

}  // namespace osd
