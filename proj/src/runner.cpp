#include "osdbench/runner.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "osdbench/common.hpp"

namespace fs = std::filesystem;

namespace osd {

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    out << text;
    if (!out) throw Error("write failed: " + path);
}

synth::SceneConfig scene_from_toml(const toml::Table& t, std::uint64_t global_seed) {
    std::string preset = t.get_string_or("dataset.preset", "custom");
    int n_categories = static_cast<int>(t.get_int_or("dataset.n_categories", 8));
    synth::SceneConfig scene;
    if (preset == "low_clutter") {
        scene = synth::low_clutter_preset(n_categories);
    } else if (preset == "high_clutter") {
        scene = synth::high_clutter_preset(n_categories);
    } else if (preset == "custom") {
        scene.n_categories = n_categories;
    } else {
        throw ConfigError("unknown dataset.preset: " + preset);
    }
    scene.canvas = static_cast<int>(t.get_int_or("dataset.canvas", scene.canvas));
    scene.glyph_size = static_cast<int>(t.get_int_or("dataset.glyph_size", scene.glyph_size));
    scene.instances_per_image =
        t.get_double_or("dataset.instances_per_image", scene.instances_per_image);
    scene.categories_per_image =
        t.get_double_or("dataset.categories_per_image", scene.categories_per_image);
    scene.scale_min = t.get_double_or("dataset.scale_min", scene.scale_min);
    scene.scale_max = t.get_double_or("dataset.scale_max", scene.scale_max);
    scene.rotation_deg = t.get_double_or("dataset.rotation_deg", scene.rotation_deg);
    scene.overlap_cap = t.get_double_or("dataset.overlap_cap", scene.overlap_cap);
    scene.noise = t.get_double_or("dataset.noise", scene.noise);
    std::int64_t scene_seed = t.get_int_or("dataset.scene_seed", 0);
    scene.seed = scene_seed != 0 ? static_cast<std::uint64_t>(scene_seed)
                                 : mix(global_seed, 0xDA7A);
    return scene;
}

SubsampleMode mode_enum(const std::string& mode) { return subsample_mode_from_string(mode); }

std::string format_fraction(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", fraction);
    return buf;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string condition_dir_name(const ExperimentCondition& cond) {
    if (cond.mode == "none") return "full";
    return cond.mode + "_f" + format_fraction(cond.fraction);
}

ExperimentConfig experiment_config_from_toml(const toml::Table& t) {
    ExperimentConfig cfg;
    cfg.schema_version = static_cast<int>(t.get_int_or("schema_version", 1));
    if (cfg.schema_version != 1)
        throw ConfigError("unsupported schema_version " + std::to_string(cfg.schema_version));
    cfg.seed = static_cast<std::uint64_t>(t.get_int_or("seed", 1));
    cfg.workers = static_cast<int>(t.get_int_or("workers", 1));
    cfg.out_dir = t.get_string_or("out_dir", "");

    cfg.data.source = t.get_string_or("dataset.source", "synth");
    if (cfg.data.source == "synth") {
        cfg.data.scene = scene_from_toml(t, cfg.seed);
        cfg.data.n_train_images = t.get_int_or("dataset.n_train_images", 120);
        cfg.data.n_eval_images = t.get_int_or("dataset.n_eval_images", 80);
    } else if (cfg.data.source == "file") {
        cfg.data.train_path = t.get_string("dataset.train_path");
        cfg.data.eval_path = t.get_string("dataset.eval_path");
        cfg.data.raster_dir = t.get_string_or("dataset.raster_dir", "");
    } else {
        throw ConfigError("unknown dataset.source: " + cfg.data.source);
    }

    cfg.split_spec.n_splits = static_cast<int>(t.get_int_or("split.n_splits", 4));
    if (t.has("split.indices"))
        for (std::int64_t i : t.get_int_array("split.indices"))
            cfg.split_indices.push_back(static_cast<int>(i));

    std::vector<std::string> modes =
        t.has("conditions.modes") ? t.get_string_array("conditions.modes")
                                  : std::vector<std::string>{"none"};
    std::vector<double> fractions = t.has("conditions.fractions")
                                        ? t.get_double_array("conditions.fractions")
                                        : std::vector<double>{1.0};
    for (const auto& mode : modes) {
        if (mode == "none") {
            cfg.conditions.push_back({"none", 1.0});
        } else {
            mode_enum(mode);  // validates the name
            for (double f : fractions) cfg.conditions.push_back({mode, f});
        }
    }

    cfg.train.extractor_mode = t.get_string_or("train.extractor_mode", "fixed_random");
    cfg.train.learning_rate = t.get_double_or("train.learning_rate", 0.2);
    cfg.train.epochs = static_cast<int>(t.get_int_or("train.epochs", 10));
    cfg.train.batch_episodes = static_cast<int>(t.get_int_or("train.batch_episodes", 8));
    cfg.train.negative_ratio = static_cast<int>(t.get_int_or("train.negative_ratio", 3));
    cfg.train.episodes_per_epoch =
        static_cast<int>(t.get_int_or("train.episodes_per_epoch", 0));

    cfg.eval.iou_threshold = t.get_double_or("eval.iou_threshold", 0.5);
    cfg.eval.n_repetitions = static_cast<int>(t.get_int_or("eval.n_repetitions", 2));
    cfg.eval.recall_points = static_cast<int>(t.get_int_or("eval.recall_points", 101));
    cfg.eval.all_point_interpolation = t.get_bool_or("eval.all_point_interpolation", false);
    cfg.eval.drop_non_exhaustive = t.get_bool_or("eval.drop_non_exhaustive", false);
    cfg.k_shots = static_cast<int>(t.get_int_or("eval.k_shots", 1));
    cfg.eval.k_shots = cfg.k_shots;
    cfg.empty_refs = t.get_bool_or("eval.empty_refs", false);

    cfg.crop.reference_resolution =
        static_cast<int>(t.get_int_or("reference.resolution", 64));
    cfg.crop.context_margin = t.get_double_or("reference.context_margin", 0.0);
    return cfg;
}

toml::Table experiment_config_to_toml(const ExperimentConfig& cfg) {
    toml::Table t;
    t.set("schema_version", toml::make_int(cfg.schema_version));
    t.set("seed", toml::make_int(static_cast<std::int64_t>(cfg.seed)));
    t.set("workers", toml::make_int(cfg.workers));
    t.set("out_dir", toml::make_string(cfg.out_dir));

    t.set("dataset.source", toml::make_string(cfg.data.source));
    if (cfg.data.source == "synth") {
        const auto& s = cfg.data.scene;
        t.set("dataset.preset", toml::make_string("custom"));
        t.set("dataset.n_categories", toml::make_int(s.n_categories));
        t.set("dataset.n_train_images", toml::make_int(cfg.data.n_train_images));
        t.set("dataset.n_eval_images", toml::make_int(cfg.data.n_eval_images));
        t.set("dataset.canvas", toml::make_int(s.canvas));
        t.set("dataset.glyph_size", toml::make_int(s.glyph_size));
        t.set("dataset.instances_per_image", toml::make_double(s.instances_per_image));
        t.set("dataset.categories_per_image", toml::make_double(s.categories_per_image));
        t.set("dataset.scale_min", toml::make_double(s.scale_min));
        t.set("dataset.scale_max", toml::make_double(s.scale_max));
        t.set("dataset.rotation_deg", toml::make_double(s.rotation_deg));
        t.set("dataset.overlap_cap", toml::make_double(s.overlap_cap));
        t.set("dataset.noise", toml::make_double(s.noise));
        t.set("dataset.scene_seed", toml::make_int(static_cast<std::int64_t>(s.seed)));
    } else {
        t.set("dataset.train_path", toml::make_string(cfg.data.train_path));
        t.set("dataset.eval_path", toml::make_string(cfg.data.eval_path));
        t.set("dataset.raster_dir", toml::make_string(cfg.data.raster_dir));
    }

    t.set("split.n_splits", toml::make_int(cfg.split_spec.n_splits));
    std::vector<std::int64_t> indices(cfg.split_indices.begin(), cfg.split_indices.end());
    t.set("split.indices", toml::make_int_array(indices));

    std::vector<std::string> modes;
    std::vector<double> fractions;
    for (const auto& c : cfg.conditions) {
        if (std::find(modes.begin(), modes.end(), c.mode) == modes.end()) modes.push_back(c.mode);
        if (c.mode != "none" &&
            std::find(fractions.begin(), fractions.end(), c.fraction) == fractions.end())
            fractions.push_back(c.fraction);
    }
    if (fractions.empty()) fractions.push_back(1.0);
    t.set("conditions.modes", toml::make_string_array(modes));
    t.set("conditions.fractions", toml::make_double_array(fractions));

    t.set("train.extractor_mode", toml::make_string(cfg.train.extractor_mode));
    t.set("train.learning_rate", toml::make_double(cfg.train.learning_rate));
    t.set("train.epochs", toml::make_int(cfg.train.epochs));
    t.set("train.batch_episodes", toml::make_int(cfg.train.batch_episodes));
    t.set("train.negative_ratio", toml::make_int(cfg.train.negative_ratio));
    t.set("train.episodes_per_epoch", toml::make_int(cfg.train.episodes_per_epoch));

    t.set("eval.iou_threshold", toml::make_double(cfg.eval.iou_threshold));
    t.set("eval.n_repetitions", toml::make_int(cfg.eval.n_repetitions));
    t.set("eval.recall_points", toml::make_int(cfg.eval.recall_points));
    t.set("eval.all_point_interpolation", toml::make_bool(cfg.eval.all_point_interpolation));
    t.set("eval.drop_non_exhaustive", toml::make_bool(cfg.eval.drop_non_exhaustive));
    t.set("eval.k_shots", toml::make_int(cfg.k_shots));
    t.set("eval.empty_refs", toml::make_bool(cfg.empty_refs));

    t.set("reference.resolution", toml::make_int(cfg.crop.reference_resolution));
    t.set("reference.context_margin", toml::make_double(cfg.crop.context_margin));
    return t;
}

void validate_experiment_config(const ExperimentConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("experiment: out_dir is required");
    if (cfg.workers < 1) throw ConfigError("experiment: workers must be >= 1");
    if (cfg.conditions.empty()) throw ConfigError("experiment: no conditions");
    if (cfg.eval.n_repetitions < 1)
        throw ConfigError("experiment: eval.n_repetitions must be >= 1");
    if (cfg.k_shots < 1) throw ConfigError("experiment: k_shots must be >= 1");
    for (const auto& c : cfg.conditions) {
        if (c.mode != "none") {
            mode_enum(c.mode);
            if (!(c.fraction > 0.0 && c.fraction <= 1.0))
                throw ConfigError("experiment: fraction must be in (0, 1]");
        }
    }
    if (cfg.data.source == "synth") {
        synth::validate_scene_config(cfg.data.scene);
        if (cfg.data.n_train_images < 1 || cfg.data.n_eval_images < 1)
            throw ConfigError("experiment: need at least one train and one eval image");
    } else if (cfg.data.source == "file") {
        if (cfg.data.train_path.empty() || cfg.data.eval_path.empty())
            throw ConfigError("experiment: file source needs train_path and eval_path");
    } else {
        throw ConfigError("experiment: unknown dataset source " + cfg.data.source);
    }
}

std::string curves_csv(const std::vector<CurvePoint>& curves) {
    std::ostringstream out;
    out.precision(17);
    out << "mode,fraction,group,ap50,ci95\n";
    for (const auto& p : curves)
        out << p.mode << "," << format_fraction(p.fraction) << "," << p.group << "," << p.ap50
            << "," << p.ci95 << "\n";
    return out.str();
}

std::string eval_result_json(const EvalResult& result, int split_index, int repetition) {
    nlohmann::ordered_json j;
    j["split_index"] = split_index;
    j["repetition"] = repetition;
    j["train_ap"] = result.train_ap;
    j["heldout_ap"] = result.heldout_ap;
    j["n_train_categories"] = result.n_train_categories;
    j["n_heldout_categories"] = result.n_heldout_categories;
    nlohmann::ordered_json per;
    for (const auto& [cat, ap] : result.per_category_ap) per[std::to_string(cat)] = ap;
    j["per_category_ap"] = per;
    j["categories_without_gt"] = result.categories_without_gt;
    j["n_non_exhaustive_pairs"] = result.n_non_exhaustive_pairs;
    j["n_dropped_non_exhaustive"] = result.n_dropped_non_exhaustive;
    return j.dump(2) + "\n";
}

RunCell eval_result_from_json(const std::string& text) {
    try {
        auto j = nlohmann::json::parse(text);
        RunCell cell;
        cell.split_index = j.at("split_index").get<int>();
        cell.repetition = j.at("repetition").get<int>();
        cell.result.train_ap = j.at("train_ap").get<double>();
        cell.result.heldout_ap = j.at("heldout_ap").get<double>();
        cell.result.n_train_categories = j.at("n_train_categories").get<int>();
        cell.result.n_heldout_categories = j.at("n_heldout_categories").get<int>();
        for (const auto& [key, val] : j.at("per_category_ap").items())
            cell.result.per_category_ap[std::stoll(key)] = val.get<double>();
        cell.result.categories_without_gt =
            j.at("categories_without_gt").get<std::vector<std::int64_t>>();
        cell.result.n_non_exhaustive_pairs = j.at("n_non_exhaustive_pairs").get<std::int64_t>();
        cell.result.n_dropped_non_exhaustive =
            j.at("n_dropped_non_exhaustive").get<std::int64_t>();
        return cell;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("cell result: ") + e.what());
    }
}

DetectorRunner::DetectorRunner(const Dataset& eval_ds, const DetectorModel& model)
    : ds_(&eval_ds), model_(&model), index_(eval_ds) {
    validate_model(model);
}

std::vector<Detection> DetectorRunner::run_queries(const std::vector<EvalQuery>& queries) {
    std::vector<Detection> out;
    for (const auto& q : queries) {
        auto fit = features_.find(q.image_id);
        if (fit == features_.end()) {
            const ImageRecord* img = index_.image(q.image_id);
            if (!img || !img->pixels)
                throw StageError("eval: image " + std::to_string(q.image_id) + " has no pixels");
            fit = features_.emplace(q.image_id, extract_features(*img->pixels, *model_)).first;
        }
        std::string key;
        if (!q.references.empty() && q.references.front().is_empty) {
            key = "empty";
        } else {
            std::vector<std::int64_t> ids;
            for (const auto& r : q.references) ids.push_back(r.source_annotation_id);
            std::sort(ids.begin(), ids.end());
            for (std::int64_t id : ids) key += std::to_string(id) + "_";
        }
        auto eit = embeddings_.find(key);
        if (eit == embeddings_.end())
            eit = embeddings_.emplace(key, embed_references(q.references, *model_)).first;
        std::vector<Detection> dets =
            detect_from_features(fit->second, eit->second, *model_, q.image_id, q.category_id);
        out.insert(out.end(), dets.begin(), dets.end());
    }
    return out;
}

namespace {

struct TaskOutput {
    std::string cond_name;
    std::vector<RunCell> cells;
};

struct ExperimentContext {
    const ExperimentConfig& cfg;
    const Dataset& train_base;
    const Dataset& eval_ds;
    const std::vector<CategorySplit>& splits;
};

// Training set plus the split to evaluate against (subsampling narrows the
// train-side universe to the kept categories).
struct PreparedCell {
    Dataset labeled;
    CategorySplit effective_split;
    bool subsampled = false;
    std::string manifest_json;
};

PreparedCell prepare_training_set(const ExperimentContext& ctx, const ExperimentCondition& cond,
                                  std::size_t cond_idx, const CategorySplit& split) {
    (void)cond_idx;
    PreparedCell cell;
    Dataset train_ds = apply_split(ctx.train_base, split, Phase::train);
    if (cond.mode == "none") {
        cell.labeled = std::move(train_ds);
        cell.effective_split = split;
        return cell;
    }
    SubsampleSpec spec;
    spec.mode = mode_enum(cond.mode);
    spec.fraction = cond.fraction;
    // Seeded by fraction, not condition index: the *_subset and *_all modes at
    // one fraction then draw the same category subset, so their instance
    // budgets match and the conditions are comparable.
    spec.seed = mix(ctx.cfg.seed, 0x5AB5, std::bit_cast<std::uint64_t>(cond.fraction),
                    static_cast<std::uint64_t>(split.split_index));
    SubsampleResult res = subsample_training_set(train_ds, split.train_category_ids, spec);
    cell.subsampled = true;
    cell.manifest_json = subsample_manifest_json(split, spec, res);
    cell.labeled = std::move(res.dataset);
    cell.effective_split.split_index = split.split_index;
    cell.effective_split.train_category_ids = res.kept_categories;
    cell.effective_split.heldout_category_ids = split.heldout_category_ids;
    return cell;
}

TaskOutput run_task(const ExperimentContext& ctx, std::size_t cond_idx,
                    const CategorySplit& split) {
    const ExperimentConfig& cfg = ctx.cfg;
    const ExperimentCondition& cond = cfg.conditions[cond_idx];
    TaskOutput out;
    out.cond_name = condition_dir_name(cond);
    fs::path cell_dir = fs::path(cfg.out_dir) / "cells" / out.cond_name /
                        ("split_" + std::to_string(split.split_index));
    fs::create_directories(cell_dir);

    // Model: reuse a cached one, else build the training set and train.
    fs::path model_path = cell_dir / "model.bin";
    PreparedCell prep;
    bool prepared = false;
    DetectorModel model;
    if (fs::exists(model_path)) {
        model = load_model(model_path.string());
    } else {
        prep = prepare_training_set(ctx, cond, cond_idx, split);
        prepared = true;
        if (prep.subsampled)
            write_text_file((cell_dir / "subsample.json").string(), prep.manifest_json);
        EpisodeSampler sampler(prep.labeled,
                               mix(cfg.seed, 0xE5150, static_cast<std::uint64_t>(cond_idx),
                                   static_cast<std::uint64_t>(split.split_index)),
                               cfg.crop);
        TrainConfig tc = cfg.train;
        tc.seed = mix(cfg.seed, 0x7124, static_cast<std::uint64_t>(cond_idx),
                      static_cast<std::uint64_t>(split.split_index));
        TrainResult trained = train_detector(prep.labeled, sampler, tc);
        model = std::move(trained.model);
        save_model(model_path.string(), model);
        save_loss_trace((cell_dir / "loss_trace.csv").string(), trained.epoch_losses);
    }

    // The effective split is deterministic, so recompute it when the model
    // came from cache.
    if (!prepared) prep = prepare_training_set(ctx, cond, cond_idx, split);

    EvalQueryOptions opts;
    opts.k = cfg.k_shots;
    opts.empty_refs = cfg.empty_refs;
    opts.skip_unsplit_categories = prep.subsampled;
    opts.crop = cfg.crop;

    DetectorRunner runner(ctx.eval_ds, model);
    for (int rep = 0; rep < cfg.eval.n_repetitions; ++rep) {
        fs::path rep_dir = cell_dir / ("rep_" + std::to_string(rep));
        fs::path result_path = rep_dir / "result.json";
        if (fs::exists(result_path)) {
            out.cells.push_back(eval_result_from_json(read_text_file(result_path.string())));
            continue;
        }
        fs::create_directories(rep_dir);
        std::uint64_t query_seed =
            mix(cfg.seed, 0xE7A1, static_cast<std::uint64_t>(cond_idx),
                mix(static_cast<std::uint64_t>(split.split_index),
                    static_cast<std::uint64_t>(rep)));
        std::vector<EvalQuery> queries =
            build_eval_queries(ctx.eval_ds, prep.effective_split, opts, query_seed);
        save_query_manifest((rep_dir / "queries.jsonl").string(), queries);
        std::vector<Detection> detections = runner.run_queries(queries);
        save_detections_jsonl((rep_dir / "detections.jsonl").string(), detections);
        EvalResult result =
            evaluate_run(detections, queries, ctx.eval_ds, prep.effective_split, cfg.eval);
        write_text_file(result_path.string(),
                        eval_result_json(result, split.split_index, rep));
        RunCell cell;
        cell.split_index = split.split_index;
        cell.repetition = rep;
        cell.result = result;
        out.cells.push_back(std::move(cell));
    }
    return out;
}

}  // namespace

void load_experiment_datasets(const ExperimentConfig& cfg, Dataset& train_base,
                              Dataset& eval_ds) {
    if (cfg.data.source == "synth") {
        Dataset full = synth::generate_dataset(
            cfg.data.scene, cfg.data.n_train_images + cfg.data.n_eval_images, nullptr,
            cfg.workers);
        train_base = synth::take_images(full, 0, static_cast<std::size_t>(cfg.data.n_train_images));
        eval_ds = synth::take_images(full, static_cast<std::size_t>(cfg.data.n_train_images),
                                     static_cast<std::size_t>(cfg.data.n_eval_images));
    } else {
        LoaderOptions opts;
        if (!cfg.data.raster_dir.empty()) opts.raster_dir = cfg.data.raster_dir;
        train_base = load_dataset(cfg.data.train_path, opts);
        eval_ds = load_dataset(cfg.data.eval_path, opts);
    }
}

ReportBundle run_experiment(const ExperimentConfig& cfg) {
    validate_experiment_config(cfg);
    fs::create_directories(cfg.out_dir);

    std::string resolved = toml::emit(experiment_config_to_toml(cfg));
    fs::path resolved_path = fs::path(cfg.out_dir) / "resolved_config.toml";
    if (fs::exists(resolved_path)) {
        if (read_text_file(resolved_path.string()) != resolved)
            throw ConfigError("output directory " + cfg.out_dir +
                              " holds results for a different config; use a fresh directory");
    } else {
        write_text_file(resolved_path.string(), resolved);
    }

    Dataset train_base, eval_ds;
    load_experiment_datasets(cfg, train_base, eval_ds);

    std::vector<CategorySplit> all_splits = make_splits(train_base.categories, cfg.split_spec);
    std::vector<CategorySplit> splits;
    if (cfg.split_indices.empty()) {
        splits = all_splits;
    } else {
        for (int idx : cfg.split_indices) {
            if (idx < 0 || idx >= static_cast<int>(all_splits.size()))
                throw ConfigError("experiment: split index " + std::to_string(idx) +
                                  " out of range");
            splits.push_back(all_splits[static_cast<std::size_t>(idx)]);
        }
    }
    save_splits((fs::path(cfg.out_dir) / "splits.json").string(), all_splits);

    ExperimentContext ctx{cfg, train_base, eval_ds, splits};

    struct Task {
        std::size_t cond_idx;
        std::size_t split_idx;
    };
    std::vector<Task> tasks;
    for (std::size_t c = 0; c < cfg.conditions.size(); ++c)
        for (std::size_t s = 0; s < splits.size(); ++s) tasks.push_back({c, s});
    std::vector<TaskOutput> outputs(tasks.size());

    auto run_one = [&](std::size_t t) {
        const Task& task = tasks[t];
        try {
            outputs[t] = run_task(ctx, task.cond_idx, splits[task.split_idx]);
        } catch (const Error& e) {
            throw StageError("condition " + condition_dir_name(cfg.conditions[task.cond_idx]) +
                             " split " + std::to_string(splits[task.split_idx].split_index) +
                             ": " + e.what());
        }
    };
    if (cfg.workers == 1 || tasks.size() == 1) {
        for (std::size_t t = 0; t < tasks.size(); ++t) run_one(t);
    } else {
        std::mutex mu;
        std::size_t next = 0;
        std::exception_ptr first_error;
        auto worker = [&] {
            for (;;) {
                std::size_t t;
                {
                    std::lock_guard<std::mutex> lock(mu);
                    if (next >= tasks.size() || first_error) return;
                    t = next++;
                }
                try {
                    run_one(t);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> threads;
        int n = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), tasks.size());
        for (int i = 0; i < n; ++i) threads.emplace_back(worker);
        for (auto& th : threads) th.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    // Aggregate in condition order, independent of execution order.
    ReportBundle bundle;
    for (std::size_t c = 0; c < cfg.conditions.size(); ++c) {
        std::string name = condition_dir_name(cfg.conditions[c]);
        std::vector<RunCell> cells;
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            if (tasks[t].cond_idx != c) continue;
            cells.insert(cells.end(), outputs[t].cells.begin(), outputs[t].cells.end());
        }
        GapReport report = gap_report(cells);
        fs::path cond_dir = fs::path(cfg.out_dir) / "cells" / name;
        write_text_file((cond_dir / "gap_report.json").string(), gap_report_json(report));
        write_text_file((cond_dir / "cells.csv").string(), cells_csv(cells, report));
        bundle.per_condition.emplace_back(name, report);
        bundle.curves.push_back(
            {cfg.conditions[c].mode, cfg.conditions[c].fraction, "train", report.train_ap,
             report.ci95_train});
        bundle.curves.push_back(
            {cfg.conditions[c].mode, cfg.conditions[c].fraction, "heldout", report.heldout_ap,
             report.ci95_heldout});
    }
    write_text_file((fs::path(cfg.out_dir) / "curves.csv").string(), curves_csv(bundle.curves));

    nlohmann::ordered_json prov;
    prov["toolkit_version"] = kToolkitVersion;
    prov["schema_version"] = cfg.schema_version;
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(resolved)));
    prov["config_fnv1a"] = hash;
    prov["seed"] = cfg.seed;
    prov["n_conditions"] = cfg.conditions.size();
    prov["n_splits"] = splits.size();
    bundle.provenance_json = prov.dump(2) + "\n";
    write_text_file((fs::path(cfg.out_dir) / "provenance.json").string(),
                    bundle.provenance_json);

    // The top-level report mirrors the per-condition ones for one-stop reading.
    nlohmann::ordered_json all;
    for (const auto& [name, report] : bundle.per_condition)
        all[name] = nlohmann::ordered_json::parse(gap_report_json(report));
    write_text_file((fs::path(cfg.out_dir) / "gap_report.json").string(), all.dump(2) + "\n");
    return bundle;
}

}  // namespace osd
