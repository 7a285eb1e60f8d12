#pragma once

#include <yaml-cpp/yaml.h>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hye/data_pipeline.hpp"
#include "hye/denoiser.hpp"
#include "hye/sampling.hpp"
#include "hye/sar_sim.hpp"
#include "hye/scheduler.hpp"
#include "hye/training.hpp"

namespace hye {

/// Scene class-mix recipe: either fixed fractions or a dominant class whose
/// share is drawn uniformly from [fraction_low, fraction_high] with the rest
/// split at random among the other classes.
struct MixRecipe {
    std::optional<ClassMix> fixed;
    LandCover dominant = LandCover::water;
    double fraction_low = 1.0, fraction_high = 1.0;

    ClassMix draw(Rng& rng) const {
        if (fixed) return *fixed;
        ClassMix mix{};
        const double share = fraction_low + (fraction_high - fraction_low) * rng.uniform();
        mix[static_cast<int>(dominant)] = share;
        std::array<double, kNumLandCover> w{};
        double total = 0;
        for (int c = 0; c < kNumLandCover; ++c)
            if (c != static_cast<int>(dominant)) total += w[c] = -std::log(1.0 - rng.uniform());
        for (int c = 0; c < kNumLandCover; ++c)
            if (c != static_cast<int>(dominant)) mix[c] = total > 0 ? (1.0 - share) * w[c] / total : 0.0;
        return mix;
    }

    /// Land-cover class the recipe is built around (largest fixed share).
    LandCover label() const {
        if (!fixed) return dominant;
        return static_cast<LandCover>(std::max_element(fixed->begin(), fixed->end()) - fixed->begin());
    }
};

struct SimulatorSection {
    int scenes = 4;
    int size = 128;
    int looks = 4;
    double terrain_roughness = 0.5;
    double relief_m = 400.0;
    double pixel_spacing_m = 20.0;
    double incidence_low = 30.0, incidence_high = 45.0;
    std::vector<MixRecipe> class_mixes{MixRecipe{ClassMix{0.2, 0.3, 0.2, 0.15, 0.15}}};
    std::uint64_t projection_seed = 0;
    BackscatterTable backscatter;
};

struct PipelineInputs {
    std::string optical, sar, embedding;
    RasterFormat embedding_format = RasterFormat::npy;
    std::int64_t raw_height = 0, raw_width = 0;
    std::string name = "raster";
};

struct PipelineSection {
    int tile_size = 512;
    int stride = 256;
    DbWindow db_window;
    IncidenceRange theta;
    PipelineInputs inputs;
};

struct ScheduleSection {
    ScheduleKind kind = ScheduleKind::linear;
    int steps = 1000;
    double beta_min = 1e-4, beta_max = 0.02;

    NoiseSchedule build() const { return build_schedule(kind, steps, beta_min, beta_max); }
};

enum class ConditionSource { tiles, embedding_file, simulator };

inline ConditionSource parse_condition_source(const std::string& s) {
    if (s == "tiles") return ConditionSource::tiles;
    if (s == "embedding_file") return ConditionSource::embedding_file;
    if (s == "simulator") return ConditionSource::simulator;
    throw ConfigError("unknown condition source '" + s + "' (expected tiles, embedding_file or simulator)");
}

struct SamplingSection {
    SamplingConfig sampler;
    int count = 8;
    ConditionSource source = ConditionSource::tiles;
    std::string condition_path; // tile directory or embedding .npy
    double incidence_deg = 37.5;
    MixRecipe class_mix{ClassMix{0.2, 0.3, 0.2, 0.15, 0.15}};
    int scene_size = 64;
};

struct EvalSection {
    bool class_matched = false;
};

struct PathsSection {
    std::string data;       // tile directory for train
    std::string checkpoint; // model for sample
    std::string resume;     // optional checkpoint to continue training from
    std::string real;       // eval reference tiles
    std::string generated;  // eval generated tiles
};

struct RunConfig {
    std::uint64_t seed = 42;
    SimulatorSection simulator;
    PipelineSection pipeline;
    DenoiserConfig model;
    ScheduleSection schedule;
    TrainConfig training;
    int checkpoint_every = 0;
    SamplingSection sampling;
    EvalSection eval;
    PathsSection paths;

    RunConfig() {
        model.lora_rank = 32;
        training.learning_rate = 2e-5;
    }

    void validate() const {
        if (simulator.scenes < 1) throw ConfigError("simulator.scenes must be >= 1");
        if (simulator.size < 2) throw ConfigError("simulator.size must be >= 2");
        if (simulator.looks < 1) throw ConfigError("simulator.looks must be >= 1");
        if (simulator.class_mixes.empty()) throw ConfigError("simulator.class_mixes must not be empty");
        if (!(simulator.incidence_low <= simulator.incidence_high))
            throw ConfigError("simulator.incidence range is empty");
        for (const auto& m : simulator.class_mixes) {
            if (m.fixed) validate_class_mix(*m.fixed);
            else if (!(m.fraction_low >= 0 && m.fraction_low <= m.fraction_high && m.fraction_high <= 1))
                throw ConfigError("class_mixes fraction range must satisfy 0 <= low <= high <= 1");
        }
        simulator.backscatter.validate();
        if (pipeline.tile_size < 1 || pipeline.stride < 1) throw ConfigError("pipeline tile_size and stride must be positive");
        pipeline.db_window.validate();
        pipeline.theta.validate();
        model.validate();
        if (model.cond_channels != kConditionChannels)
            throw ConfigError("model.cond_channels must be 65 (64 embedding + incidence)");
        try {
            model.check_spatial(pipeline.tile_size, pipeline.tile_size);
        } catch (const ConfigError&) {
            throw ConfigError("pipeline.tile_size " + std::to_string(pipeline.tile_size) +
                              " must be divisible by 2^model.depth = " + std::to_string(1 << model.depth));
        }
        if (schedule.steps < 1) throw ConfigError("schedule.steps must be >= 1");
        training.validate();
        if (checkpoint_every < 0) throw ConfigError("training.checkpoint_every must be >= 0");
        if (sampling.count < 1) throw ConfigError("sampling.count must be >= 1");
        if (sampling.scene_size % (1 << model.depth) != 0)
            throw ConfigError("sampling.scene_size must be divisible by 2^model.depth");
    }
};

struct ConfigKey {
    const char* key;
    const char* default_value;
    const char* meaning;
};

/// Every recognised key, for --help and validation.
inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"seed", "42", "master seed; --seed overrides"},
        {"simulator.scenes", "4", "number of synthetic scenes rendered by simulate"},
        {"simulator.size", "128", "scene edge length in pixels"},
        {"simulator.looks", "4", "speckle looks (Gamma shape)"},
        {"simulator.terrain_roughness", "0.5", "0 = flat, 1 = full relief"},
        {"simulator.relief_m", "400", "elevation span at roughness 1 (metres)"},
        {"simulator.pixel_spacing_m", "20", "ground sample distance (metres)"},
        {"simulator.incidence_deg", "[30, 45]", "per-scene incidence drawn uniformly from this range"},
        {"simulator.class_mixes", "[{water: 0.2, ...}]",
         "list cycled over scenes; each entry is a {class: fraction} map or {dominant: class, fraction: [lo, hi]}"},
        {"simulator.projection_seed", "0", "seed of the fixed embedding projection"},
        {"simulator.backscatter_db", "{water: -22, vegetation: -11, farmland: -9, urban: -3, bare: -14}",
         "class mean backscatter; only the ordering is contractual"},
        {"simulator.noise_floor_db", "-30", "intensity assigned to radar shadow"},
        {"simulator.vh_offset_db", "-7", "cross-pol offset from the co-pol image"},
        {"pipeline.tile_size", "512", "tile edge length; 64 or 128 at desk scale"},
        {"pipeline.stride", "256", "window step; half the tile size gives 50% overlap"},
        {"pipeline.db_window", "[-25, 0]", "dB range mapped to [-1, 1] for the generator"},
        {"pipeline.theta_range", "[29, 46]", "incidence range mapped to [-1, 1] in the condition"},
        {"pipeline.inputs.optical", "", "tile: [4, H, W] .npy optical raster (B2, B3, B4, B8)"},
        {"pipeline.inputs.sar", "", "tile: [3, H, W] .npy SAR raster (VV dB, VH dB, incidence deg)"},
        {"pipeline.inputs.embedding", "", "tile: [64, H, W] embedding raster"},
        {"pipeline.inputs.embedding_format", "npy", "npy or raw (headerless float32 planes)"},
        {"pipeline.inputs.raw_height / raw_width", "0", "raster size for raw embedding files"},
        {"pipeline.inputs.name", "raster", "geo_id prefix for tiles cut from the inputs"},
        {"model.base_channels", "32", "width of the first stage"},
        {"model.depth", "3", "number of down/up stages"},
        {"model.channel_mult", "[1, 2, 2]", "per-stage width multipliers"},
        {"model.time_embed_dim", "64", "sinusoidal time embedding width"},
        {"model.attention_resolution", "16", "stages at or below this size get self-attention"},
        {"model.norm_groups", "8", "group-norm groups"},
        {"model.lora_rank", "32", "LoRA rank on attention projections (0 disables)"},
        {"model.lora_scale", "1.0", "LoRA output scale"},
        {"model.lora_targets", "[q, k, v, out]", "attention projections that receive adapters"},
        {"model.hint_source_channels", "3", "condition-layer width before widening to 65 channels"},
        {"schedule.kind", "linear", "linear or cosine beta schedule"},
        {"schedule.steps", "1000", "diffusion steps T"},
        {"schedule.beta_min / beta_max", "1e-4 / 0.02", "linear schedule endpoints"},
        {"training.learning_rate", "2e-5", "initial AdamW learning rate"},
        {"training.lr_min", "0", "floor of the cosine learning-rate schedule"},
        {"training.lr_schedule", "cosine", "cosine or constant"},
        {"training.batch_size", "8", "examples per step"},
        {"training.steps", "500", "optimizer steps"},
        {"training.gamma_offset", "0.2", "offset-noise intensity"},
        {"training.offset_noise", "true", "add the per-sample constant offset to the noise"},
        {"training.gamma_snr", "5.0", "Min-SNR clamp"},
        {"training.min_snr", "true", "weight the loss by min(SNR, gamma_snr) / SNR"},
        {"training.weight_decay", "0", "decoupled AdamW decay"},
        {"training.grad_clip", "off", "global gradient-norm clip"},
        {"training.mode", "full", "full or lora_and_control (backbone frozen)"},
        {"training.conditional", "true", "false trains without the control branch"},
        {"training.checkpoint_every", "0", "write a checkpoint every K steps (0: final only)"},
        {"sampling.sampler", "ddpm", "ddpm or ddim"},
        {"sampling.steps", "0", "DDIM steps (0 = T)"},
        {"sampling.eta", "0", "DDIM stochasticity"},
        {"sampling.batch_size", "8", "samples per forward batch"},
        {"sampling.count", "8", "number of samples"},
        {"sampling.condition.source", "tiles", "tiles, embedding_file or simulator"},
        {"sampling.condition.path", "", "tile directory or .npy embeddings ([64] or [N, 64]); --cond"},
        {"sampling.condition.incidence_deg", "37.5", "incidence used with embedding_file conditions"},
        {"sampling.condition.class_mix", "{water: 0.2, ...}", "scene recipe for simulator conditions"},
        {"sampling.condition.scene_size", "64", "tile size for embedding_file and simulator conditions"},
        {"eval.class_matched", "false", "pair tiles by dominant class instead of geo_id"},
        {"paths.data", "", "tile directory read by train (required, or --data)"},
        {"paths.checkpoint", "", "model read by sample (required, or --checkpoint)"},
        {"paths.resume", "", "checkpoint to continue training from"},
        {"paths.real / paths.generated", "", "tile directories compared by eval"},
    };
    return keys;
}

namespace detail {

inline void check_keys(const YAML::Node& node, const std::string& section, const std::set<std::string>& allowed) {
    if (!node) return;
    if (!node.IsMap()) throw ConfigError("'" + section + "' must be a mapping");
    for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (!allowed.count(key))
            throw ConfigError("unknown key '" + (section.empty() ? key : section + "." + key) + "'");
    }
}

template <class T>
void read(const YAML::Node& node, const char* key, T& out) {
    if (node && node[key]) out = node[key].as<T>();
}

inline std::pair<double, double> read_range(const YAML::Node& n, const std::string& what) {
    if (n.IsSequence() && n.size() == 2) return {n[0].as<double>(), n[1].as<double>()};
    if (n.IsScalar()) {
        const double v = n.as<double>();
        return {v, v};
    }
    throw ConfigError(what + " must be a number or a [low, high] pair");
}

inline std::map<std::string, double> read_class_map(const YAML::Node& n) {
    std::map<std::string, double> m;
    for (const auto& kv : n) m[kv.first.as<std::string>()] = kv.second.as<double>();
    return m;
}

inline MixRecipe read_mix(const YAML::Node& n) {
    if (!n.IsMap()) throw ConfigError("class mix entries must be mappings");
    MixRecipe r;
    if (n["dominant"]) {
        check_keys(n, "class_mix", {"dominant", "fraction"});
        r.dominant = parse_land_cover(n["dominant"].as<std::string>());
        std::tie(r.fraction_low, r.fraction_high) =
            n["fraction"] ? read_range(n["fraction"], "class_mix.fraction") : std::pair{1.0, 1.0};
        return r;
    }
    r.fixed = class_mix_from(read_class_map(n));
    return r;
}

} // namespace detail

inline RunConfig parse_run_config(const YAML::Node& root) {
    using detail::check_keys;
    using detail::read;
    RunConfig c;
    try {
        if (root.IsNull()) return c;
        check_keys(root, "", {"seed", "simulator", "pipeline", "model", "schedule", "training", "sampling", "eval", "paths"});
        read(root, "seed", c.seed);
        c.training.seed = c.seed;

        if (const auto s = root["simulator"]) {
            check_keys(s, "simulator",
                       {"scenes", "size", "looks", "terrain_roughness", "relief_m", "pixel_spacing_m", "incidence_deg",
                        "class_mixes", "projection_seed", "backscatter_db", "noise_floor_db", "vh_offset_db"});
            auto& o = c.simulator;
            read(s, "scenes", o.scenes);
            read(s, "size", o.size);
            read(s, "looks", o.looks);
            read(s, "terrain_roughness", o.terrain_roughness);
            read(s, "relief_m", o.relief_m);
            read(s, "pixel_spacing_m", o.pixel_spacing_m);
            if (s["incidence_deg"])
                std::tie(o.incidence_low, o.incidence_high) = detail::read_range(s["incidence_deg"], "simulator.incidence_deg");
            if (s["class_mixes"]) {
                if (!s["class_mixes"].IsSequence()) throw ConfigError("simulator.class_mixes must be a list");
                o.class_mixes.clear();
                for (const auto& m : s["class_mixes"]) o.class_mixes.push_back(detail::read_mix(m));
            }
            read(s, "projection_seed", o.projection_seed);
            if (s["backscatter_db"]) {
                for (const auto& [name, v] : detail::read_class_map(s["backscatter_db"]))
                    o.backscatter.mean_db[static_cast<int>(parse_land_cover(name))] = v;
            }
            read(s, "noise_floor_db", o.backscatter.noise_floor_db);
            read(s, "vh_offset_db", o.backscatter.vh_offset_db);
        }

        if (const auto p = root["pipeline"]) {
            check_keys(p, "pipeline", {"tile_size", "stride", "db_window", "theta_range", "inputs"});
            read(p, "tile_size", c.pipeline.tile_size);
            read(p, "stride", c.pipeline.stride);
            if (p["db_window"])
                std::tie(c.pipeline.db_window.low, c.pipeline.db_window.high) =
                    detail::read_range(p["db_window"], "pipeline.db_window");
            if (p["theta_range"])
                std::tie(c.pipeline.theta.theta_min, c.pipeline.theta.theta_max) =
                    detail::read_range(p["theta_range"], "pipeline.theta_range");
            if (const auto in = p["inputs"]) {
                check_keys(in, "pipeline.inputs",
                           {"optical", "sar", "embedding", "embedding_format", "raw_height", "raw_width", "name"});
                auto& i = c.pipeline.inputs;
                read(in, "optical", i.optical);
                read(in, "sar", i.sar);
                read(in, "embedding", i.embedding);
                if (in["embedding_format"]) i.embedding_format = parse_raster_format(in["embedding_format"].as<std::string>());
                read(in, "raw_height", i.raw_height);
                read(in, "raw_width", i.raw_width);
                read(in, "name", i.name);
            }
        }

        if (const auto m = root["model"]) {
            check_keys(m, "model",
                       {"base_channels", "depth", "channel_mult", "time_embed_dim", "attention_resolution", "norm_groups",
                        "lora_rank", "lora_scale", "lora_targets", "hint_source_channels", "cond_channels"});
            auto& o = c.model;
            read(m, "base_channels", o.base_channels);
            read(m, "depth", o.depth);
            read(m, "channel_mult", o.channel_mult);
            read(m, "time_embed_dim", o.time_embed_dim);
            read(m, "attention_resolution", o.attention_resolution);
            read(m, "norm_groups", o.norm_groups);
            read(m, "lora_rank", o.lora_rank);
            read(m, "lora_scale", o.lora_scale);
            read(m, "hint_source_channels", o.hint_source_channels);
            read(m, "cond_channels", o.cond_channels);
            if (m["lora_targets"]) {
                o.lora_targets = 0;
                for (const auto& t : m["lora_targets"]) {
                    const auto name = t.as<std::string>();
                    if (name == "q") o.lora_targets |= lora_q;
                    else if (name == "k") o.lora_targets |= lora_k;
                    else if (name == "v") o.lora_targets |= lora_v;
                    else if (name == "out") o.lora_targets |= lora_out;
                    else throw ConfigError("unknown LoRA target '" + name + "' (expected q, k, v or out)");
                }
            }
        }

        if (const auto s = root["schedule"]) {
            check_keys(s, "schedule", {"kind", "steps", "beta_min", "beta_max"});
            if (s["kind"]) c.schedule.kind = parse_schedule_kind(s["kind"].as<std::string>());
            read(s, "steps", c.schedule.steps);
            read(s, "beta_min", c.schedule.beta_min);
            read(s, "beta_max", c.schedule.beta_max);
        }

        if (const auto t = root["training"]) {
            check_keys(t, "training",
                       {"learning_rate", "lr_min", "lr_schedule", "batch_size", "steps", "gamma_offset", "offset_noise",
                        "gamma_snr", "min_snr", "weight_decay", "grad_clip", "mode", "conditional", "checkpoint_every"});
            auto& o = c.training;
            read(t, "learning_rate", o.learning_rate);
            read(t, "lr_min", o.lr_min);
            if (t["lr_schedule"]) o.lr_schedule = parse_lr_schedule(t["lr_schedule"].as<std::string>());
            read(t, "batch_size", o.batch_size);
            read(t, "steps", o.steps);
            read(t, "gamma_offset", o.gamma_offset);
            read(t, "offset_noise", o.offset_noise);
            read(t, "gamma_snr", o.gamma_snr);
            read(t, "min_snr", o.min_snr);
            read(t, "weight_decay", o.weight_decay);
            if (t["grad_clip"] && !t["grad_clip"].IsNull()) {
                const auto v = t["grad_clip"].as<std::string>();
                if (v != "off") o.grad_clip = t["grad_clip"].as<double>();
            }
            if (t["mode"]) o.mode = parse_train_mode(t["mode"].as<std::string>());
            read(t, "conditional", o.conditional);
            read(t, "checkpoint_every", c.checkpoint_every);
        }

        if (const auto s = root["sampling"]) {
            check_keys(s, "sampling", {"sampler", "steps", "eta", "batch_size", "count", "condition"});
            if (s["sampler"]) c.sampling.sampler.sampler = parse_sampler_kind(s["sampler"].as<std::string>());
            read(s, "steps", c.sampling.sampler.steps);
            read(s, "eta", c.sampling.sampler.eta);
            read(s, "batch_size", c.sampling.sampler.batch_size);
            read(s, "count", c.sampling.count);
            if (const auto cond = s["condition"]) {
                check_keys(cond, "sampling.condition", {"source", "path", "incidence_deg", "class_mix", "scene_size"});
                if (cond["source"]) c.sampling.source = parse_condition_source(cond["source"].as<std::string>());
                read(cond, "path", c.sampling.condition_path);
                read(cond, "incidence_deg", c.sampling.incidence_deg);
                read(cond, "scene_size", c.sampling.scene_size);
                if (cond["class_mix"]) c.sampling.class_mix = detail::read_mix(cond["class_mix"]);
            }
        }

        if (const auto e = root["eval"]) {
            check_keys(e, "eval", {"class_matched"});
            read(e, "class_matched", c.eval.class_matched);
        }

        if (const auto p = root["paths"]) {
            check_keys(p, "paths", {"data", "checkpoint", "resume", "real", "generated"});
            read(p, "data", c.paths.data);
            read(p, "checkpoint", c.paths.checkpoint);
            read(p, "resume", c.paths.resume);
            read(p, "real", c.paths.real);
            read(p, "generated", c.paths.generated);
        }
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
    try {
        return parse_run_config(YAML::LoadFile(path.string()));
    } catch (const YAML::Exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

} // namespace hye
