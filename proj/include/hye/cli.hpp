#pragma once

#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hye/checkpoint.hpp"
#include "hye/config.hpp"
#include "hye/data_pipeline.hpp"
#include "hye/metrics.hpp"
#include "hye/sampling.hpp"
#include "hye/training.hpp"

namespace hye {

namespace fs = std::filesystem;

/// Tracks files written by a command so a failed run can remove them.
class OutputSet {
public:
    explicit OutputSet(fs::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec || !fs::is_directory(dir_)) throw IoError("cannot create output directory '" + dir_.string() + "'");
    }
    fs::path add(const std::string& name) {
        written_.push_back(dir_ / name);
        return written_.back();
    }
    void discard() noexcept {
        std::error_code ec;
        for (const auto& p : written_) fs::remove(p, ec);
        written_.clear();
    }
    const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
    std::vector<fs::path> written_;
};

namespace detail {

inline void write_tiles(OutputSet& out, const std::vector<TilePatch>& tiles) {
    std::vector<ManifestEntry> manifest;
    for (const auto& t : tiles) {
        const auto name = t.geo_id + ".hye1";
        write_tile(t, out.add(name));
        manifest.push_back({name, t.geo_id, t.valid, embedding_class_mix(t.embedding)});
    }
    write_manifest(out.add("manifest.jsonl"), manifest);
}

template <class F>
auto guarded(OutputSet& out, F&& body) {
    try {
        return body();
    } catch (...) {
        out.discard();
        throw;
    }
}

inline std::string scene_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%03d", i);
    return buf;
}

inline SceneSpec scene_spec(const RunConfig& c, int size, const ClassMix& mix, double incidence) {
    SceneSpec s;
    s.size = size;
    s.terrain_roughness = c.simulator.terrain_roughness;
    s.class_mix = mix;
    s.incidence_deg = incidence;
    s.looks = c.simulator.looks;
    s.pixel_spacing_m = c.simulator.pixel_spacing_m;
    s.relief_m = c.simulator.relief_m;
    s.theta_min_deg = c.pipeline.theta.theta_min;
    s.theta_max_deg = c.pipeline.theta.theta_max;
    return s;
}

inline const std::string& require_path(const std::string& p, const char* key) {
    if (p.empty()) throw ConfigError(std::string(key) + " is not set");
    return p;
}

} // namespace detail

struct SimulateResult {
    int scenes = 0;
    std::vector<TilePatch> tiles;
};

/// Renders the configured synthetic scenes and writes their cleaned tiles plus
/// a manifest to `out`.
inline SimulateResult cmd_simulate(const RunConfig& c, const fs::path& out_dir) {
    OutputSet out(out_dir);
    return detail::guarded(out, [&] {
        SimulateResult r;
        Rng master(c.seed);
        for (int i = 0; i < c.simulator.scenes; ++i) {
            Rng scene_rng = master.split();
            const auto& recipe = c.simulator.class_mixes[static_cast<std::size_t>(i) % c.simulator.class_mixes.size()];
            const auto mix = recipe.draw(scene_rng);
            const double inc = c.simulator.incidence_low +
                               (c.simulator.incidence_high - c.simulator.incidence_low) * scene_rng.uniform();
            const auto scene = generate_scene(scene_rng.next_u64(), detail::scene_spec(c, c.simulator.size, mix, inc));
            const auto stack =
                simulate_stack(scene, c.simulator.backscatter, scene_rng, c.simulator.projection_seed, detail::scene_name(i));
            auto tiles = clean(sliding_window(stack, c.pipeline.tile_size, c.pipeline.stride));
            for (auto& t : tiles) r.tiles.push_back(std::move(t));
            ++r.scenes;
        }
        detail::write_tiles(out, r.tiles);
        spdlog::info("simulate: {} scenes, {} tiles -> {}", r.scenes, r.tiles.size(), out.dir().string());
        return r;
    });
}

/// Cuts co-registered .npy rasters into cleaned tiles.
inline std::vector<TilePatch> cmd_tile(const RunConfig& c, const fs::path& out_dir) {
    const auto& in = c.pipeline.inputs;
    RasterStack stack;
    stack.optical = read_npy(detail::require_path(in.optical, "pipeline.inputs.optical"));
    stack.sar = read_npy(detail::require_path(in.sar, "pipeline.inputs.sar"));
    if (!in.embedding.empty())
        stack.embedding_raster = load_embedding_raster(in.embedding, in.embedding_format, in.raw_height, in.raw_width);
    stack.name = in.name;
    auto tiles = clean(sliding_window(stack, c.pipeline.tile_size, c.pipeline.stride));
    OutputSet out(out_dir);
    detail::guarded(out, [&] {
        detail::write_tiles(out, tiles);
        return 0;
    });
    spdlog::info("tile: {} tiles -> {}", tiles.size(), out.dir().string());
    return tiles;
}

inline std::vector<TrainingExample> training_examples(const std::vector<TilePatch>& tiles, const RunConfig& c) {
    std::vector<TrainingExample> data;
    for (const auto& t : tiles) {
        if (!t.valid) continue;
        TrainingExample ex;
        ex.image = training_image(t, c.pipeline.db_window);
        if (c.training.conditional) ex.cond = build_condition(t, c.pipeline.theta);
        data.push_back(std::move(ex));
    }
    if (data.empty()) throw DatasetError("no valid tiles to train on");
    return data;
}

struct TrainResult {
    std::vector<StepStats> stats;
    fs::path checkpoint;
};

/// Trains on the tiles in paths.data, writing loss.tsv, periodic checkpoints
/// and checkpoint.hyck to `out`. paths.resume continues an earlier run.
inline TrainResult cmd_train(const RunConfig& c, const fs::path& out_dir) {
    const auto tiles = load_tile_dir(detail::require_path(c.paths.data, "paths.data (--data)"));
    auto data = training_examples(tiles, c);
    OutputSet out(out_dir);
    auto trainer = [&] {
        if (!c.paths.resume.empty()) {
            auto t = Trainer::resume(Checkpoint::load(c.paths.resume), c.training, std::move(data));
            spdlog::info("train: resuming at step {}", t.current_step());
            return t;
        }
        Rng init(c.seed ^ 0xD1CEull);
        return Trainer(build_denoiser(c.model, init), c.schedule.build(), c.training, std::move(data));
    }();

    std::ofstream log(out.dir() / "loss.tsv", trainer.current_step() == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write loss log in '" + out.dir().string() + "'");
    TrainResult r;
    while (trainer.current_step() < c.training.steps) {
        const int next = c.checkpoint_every > 0 ? std::min(c.training.steps,
                                                           (trainer.current_step() / c.checkpoint_every + 1) *
                                                               c.checkpoint_every)
                                                : c.training.steps;
        for (auto& s : trainer.run(&log, next)) r.stats.push_back(s);
        log.flush();
        if (!std::isfinite(r.stats.back().loss))
            throw TrainingError("loss became non-finite at step " + std::to_string(r.stats.back().step));
        spdlog::info("train: step {}/{} loss {:.5f}", trainer.current_step(), c.training.steps, r.stats.back().loss);
        if (c.checkpoint_every > 0 && trainer.current_step() < c.training.steps) {
            char name[40];
            std::snprintf(name, sizeof name, "checkpoint_%06d.hyck", trainer.current_step());
            trainer.checkpoint().save(out.dir() / name);
        }
    }
    r.checkpoint = out.dir() / "checkpoint.hyck";
    trainer.checkpoint().save(r.checkpoint);
    return r;
}

struct ConditionSet {
    Tensor cond; // [N, 65, H, W]
    std::vector<TilePatch> templates; // per-sample geo_id, embedding and incidence
};

/// Conditions for the configured source; each template carries what the
/// generated tile inherits (geo_id, embedding, incidence map).
inline ConditionSet sampling_conditions(const RunConfig& c) {
    const auto& s = c.sampling;
    std::vector<TilePatch> templates;
    if (s.source == ConditionSource::tiles) {
        std::vector<TilePatch> src;
        for (auto& t : load_tile_dir(detail::require_path(s.condition_path, "sampling.condition.path")))
            if (t.valid) src.push_back(std::move(t));
        if (src.empty()) throw ConditionError("no valid condition tiles in '" + s.condition_path + "'");
        for (int i = 0; i < s.count; ++i) {
            auto t = src[static_cast<std::size_t>(i) % src.size()];
            if (i >= static_cast<int>(src.size())) t.geo_id += "_g" + std::to_string(i / src.size());
            templates.push_back(std::move(t));
        }
    } else if (s.source == ConditionSource::embedding_file) {
        const auto e = read_npy(detail::require_path(s.condition_path, "sampling.condition.path"));
        if (e.numel() % kEmbeddingDim != 0 || e.dim(e.ndim() - 1) != kEmbeddingDim)
            throw ConditionError("embedding file must hold [64] or [N, 64] values, got " + to_string(e.shape()));
        const auto rows = e.numel() / kEmbeddingDim;
        for (int i = 0; i < s.count; ++i) {
            const auto row = i % rows;
            TilePatch t;
            t.embedding = Tensor(Shape{kEmbeddingDim}, std::vector<float>(e.values().begin() + row * kEmbeddingDim,
                                                                         e.values().begin() + (row + 1) * kEmbeddingDim));
            t.sar = Tensor(Shape{kSarChannels, s.scene_size, s.scene_size}, kNoData);
            auto v = t.sar.values();
            std::fill(v.begin() + 2 * s.scene_size * s.scene_size, v.end(), static_cast<float>(s.incidence_deg));
            t.sar = Tensor(t.sar.shape(), std::vector<float>(v.begin(), v.end()));
            t.geo_id = "emb_" + std::to_string(i);
            templates.push_back(std::move(t));
        }
    } else {
        Rng rng(c.seed ^ 0x5C3E7Eull);
        for (int i = 0; i < s.count; ++i) {
            const auto mix = s.class_mix.draw(rng);
            const double inc = c.simulator.incidence_low +
                               (c.simulator.incidence_high - c.simulator.incidence_low) * rng.uniform();
            const auto scene = generate_scene(rng.next_u64(), detail::scene_spec(c, s.scene_size, mix, inc));
            TilePatch t;
            t.embedding = synth_embedding(scene, {}, c.simulator.projection_seed, c.pipeline.theta.theta_min,
                                          c.pipeline.theta.theta_max);
            const auto plane = static_cast<std::size_t>(s.scene_size) * static_cast<std::size_t>(s.scene_size);
            std::vector<float> sar(3 * plane, kNoData);
            const auto inc_map = incidence_map(scene);
            std::copy(inc_map.values().begin(), inc_map.values().end(), sar.begin() + 2 * plane);
            t.sar = Tensor(Shape{kSarChannels, s.scene_size, s.scene_size}, std::move(sar));
            t.geo_id = "sim_" + std::to_string(i);
            templates.push_back(std::move(t));
        }
    }
    std::vector<Tensor> conds;
    for (const auto& t : templates) conds.push_back(build_condition(t, c.pipeline.theta));
    std::vector<const Tensor*> ptrs;
    for (const auto& t : conds) ptrs.push_back(&t);
    return {stack(ptrs), std::move(templates)};
}

/// Draws sampling.count tiles from the checkpoint in paths.checkpoint. Each
/// output tile holds the generated VV backscatter (dB), a missing VH channel,
/// the conditioning incidence map and embedding, plus a PGM preview.
inline std::vector<TilePatch> cmd_sample(const RunConfig& c, const fs::path& out_dir) {
    const auto ckpt = Checkpoint::load(detail::require_path(c.paths.checkpoint, "paths.checkpoint (--checkpoint)"));
    const auto model = restore_model(ckpt);
    const auto schedule = decode_schedule(ckpt.text("schedule"));
    const bool conditional = !ckpt.has_text("model.conditional") || ckpt.text("model.conditional") == "1";
    auto conds = sampling_conditions(c);
    Rng rng(c.seed ^ 0x5A3D1Eull);
    const auto images = generate(model, schedule, conds.cond, c.sampling.sampler, rng,
                                 conditional ? ControlMode::active : ControlMode::off);
    const auto h = images.dim(2), w = images.dim(3);
    const auto plane = static_cast<std::size_t>(h * w);

    std::vector<TilePatch> tiles;
    for (std::size_t i = 0; i < conds.templates.size(); ++i) {
        const auto& tmpl = conds.templates[i];
        const Tensor x(Shape{h, w}, std::vector<float>(images.values().begin() + static_cast<std::ptrdiff_t>(i * plane),
                                                       images.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * plane)));
        const auto vv = denormalize_sar(x, c.pipeline.db_window);
        std::vector<float> sar(3 * plane, kNoData);
        std::copy(vv.values().begin(), vv.values().end(), sar.begin());
        std::copy(tmpl.sar.values().begin() + static_cast<std::ptrdiff_t>(2 * plane), tmpl.sar.values().end(),
                  sar.begin() + static_cast<std::ptrdiff_t>(2 * plane));
        TilePatch t;
        t.sar = Tensor(Shape{kSarChannels, h, w}, std::move(sar));
        t.optical = Tensor(Shape{kOpticalChannels, h, w}, kNoData);
        t.embedding = tmpl.embedding;
        t.geo_id = tmpl.geo_id;
        t.valid = patch_is_valid(t);
        tiles.push_back(std::move(t));
    }

    OutputSet out(out_dir);
    detail::guarded(out, [&] {
        detail::write_tiles(out, tiles);
        for (const auto& t : tiles) {
            const Tensor vv(Shape{h, w}, std::vector<float>(t.sar.values().begin(),
                                                            t.sar.values().begin() + static_cast<std::ptrdiff_t>(plane)));
            write_pgm(out.add(t.geo_id + ".pgm"), vv, c.pipeline.db_window.low, c.pipeline.db_window.high);
        }
        return 0;
    });
    spdlog::info("sample: {} tiles -> {}", tiles.size(), out.dir().string());
    return tiles;
}

inline LandCover dominant_class(const TilePatch& t) {
    const auto mix = embedding_class_mix(t.embedding);
    return static_cast<LandCover>(std::max_element(mix.begin(), mix.end()) - mix.begin());
}

struct TilePair {
    const TilePatch* generated;
    const TilePatch* real;
};

/// Pairs generated tiles with real ones by geo_id, or by dominant land-cover
/// class (round-robin within the class) when class_matched is set.
inline std::vector<TilePair> pair_tiles(const std::vector<TilePatch>& gen, const std::vector<TilePatch>& real,
                                        bool class_matched) {
    std::vector<TilePair> pairs;
    if (class_matched) {
        std::map<LandCover, std::vector<const TilePatch*>> by_class;
        for (const auto& r : real) by_class[dominant_class(r)].push_back(&r);
        std::map<LandCover, std::size_t> cursor;
        for (const auto& g : gen) {
            const auto cls = dominant_class(g);
            const auto it = by_class.find(cls);
            if (it == by_class.end())
                throw PairingError("no real tile of class '" + std::string(to_string(cls)) + "' to pair with '" +
                                   g.geo_id + "'");
            pairs.push_back({&g, it->second[cursor[cls]++ % it->second.size()]});
        }
        return pairs;
    }
    std::map<std::string, const TilePatch*> by_id;
    for (const auto& r : real) by_id[r.geo_id] = &r;
    for (const auto& g : gen) {
        const auto it = by_id.find(g.geo_id);
        if (it == by_id.end())
            throw PairingError("generated tile '" + g.geo_id +
                               "' has no real tile with the same geo_id (set eval.class_matched to pair by class)");
        pairs.push_back({&g, it->second});
    }
    return pairs;
}

/// Compares paths.generated against paths.real and writes report.jsonl
/// (one line per pair, then the aggregate) and report.txt.
inline MetricsReport cmd_eval(const RunConfig& c, const fs::path& out_dir) {
    const auto gen = load_tile_dir(detail::require_path(c.paths.generated, "paths.generated (--gen)"));
    const auto real = load_tile_dir(detail::require_path(c.paths.real, "paths.real (--real)"));
    if (gen.empty()) throw EvaluationError("no generated tiles in '" + c.paths.generated + "'");
    const auto pairs = pair_tiles(gen, real, c.eval.class_matched);

    std::vector<Tensor> g_img, r_img;
    std::string lines;
    for (const auto& p : pairs) {
        g_img.push_back(training_image(*p.generated, c.pipeline.db_window));
        r_img.push_back(training_image(*p.real, c.pipeline.db_window));
        if (g_img.back().shape() != r_img.back().shape())
            throw PairingError("tiles '" + p.generated->geo_id + "' and '" + p.real->geo_id + "' differ in size");
        const auto one = evaluate_pairs({g_img.back()}, {r_img.back()}, c.pipeline.db_window);
        auto j = nlohmann::json::parse(one.to_json());
        j.erase("n_pairs");
        lines += nlohmann::json{{"generated", p.generated->geo_id}, {"real", p.real->geo_id}, {"metrics", j}}.dump() + "\n";
    }
    const auto report = evaluate_pairs(g_img, r_img, c.pipeline.db_window);
    lines += nlohmann::json{{"aggregate", nlohmann::json::parse(report.to_json())}}.dump() + "\n";

    OutputSet out(out_dir);
    detail::guarded(out, [&] {
        write_file_atomic(out.add("report.jsonl"), lines);
        write_file_atomic(out.add("report.txt"), report.to_table());
        return 0;
    });
    spdlog::info("eval: {} pairs", report.n_pairs);
    return report;
}

} // namespace hye
