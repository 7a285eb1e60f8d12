#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hye/nn.hpp"

namespace hye {

// Bit flags naming the attention projections that receive adapters.
enum LoraTarget : unsigned { lora_q = 1u, lora_k = 2u, lora_v = 4u, lora_out = 8u, lora_all = 15u };

struct DenoiserConfig {
    int base_channels = 32;
    int depth = 3;
    int time_embed_dim = 64;
    int cond_channels = 65;
    int image_channels = 1;
    // Per-level channel multiplier; one entry per down stage.
    std::vector<int> channel_mult = {1, 2, 2};
    // Levels at or below this spatial size get an attention block; the
    // bottleneck always has one.
    int attention_resolution = 16;
    int norm_groups = 8;
    // Width the control branch's condition layer is first built at before it
    // is widened to cond_channels by weight averaging.
    int hint_source_channels = 3;
    int lora_rank = 4;
    float lora_scale = 1.0f;
    unsigned lora_targets = lora_all;

    int channels_at(int level) const { return base_channels * channel_mult.at(static_cast<std::size_t>(level)); }

    void validate() const {
        if (depth < 1) throw ConfigError("denoiser depth must be >= 1");
        if (base_channels < 1 || time_embed_dim < 2 || cond_channels < 1 || image_channels < 1)
            throw ConfigError("denoiser dimensions must be positive");
        if (time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even");
        if (static_cast<int>(channel_mult.size()) != depth)
            throw ConfigError("channel_mult needs one entry per stage (" + std::to_string(depth) + ")");
        for (int m : channel_mult)
            if (m < 1) throw ConfigError("channel multipliers must be positive");
        for (int l = 0; l < depth; ++l)
            if (channels_at(l) % norm_groups != 0)
                throw ConfigError("stage channels must be divisible by norm_groups");
        if (hint_source_channels < 1 || hint_source_channels > cond_channels)
            throw ConfigError("hint_source_channels must lie in [1, cond_channels]");
        if (lora_rank < 0) throw ConfigError("lora_rank must be >= 0");
    }

    void check_spatial(std::int64_t h, std::int64_t w) const {
        const std::int64_t f = std::int64_t{1} << depth;
        if (h % f != 0 || w % f != 0)
            throw ConfigError("spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                              " not divisible by 2^depth = " + std::to_string(f));
    }
};

/// Widens a conv's input side to `c_new` channels: the original kernel is
/// averaged over its input channels and that mean slice is replicated into
/// every input channel of the new kernel. Bias is unchanged.
inline void expand_input_channels(Conv2dLayer& layer, std::int64_t c_new) {
    const std::int64_t cout = layer.weight.dim(0), c_old = layer.weight.dim(1);
    const std::int64_t kk = layer.weight.dim(2) * layer.weight.dim(3);
    if (c_new < c_old)
        throw ConfigError("cannot shrink input channels from " + std::to_string(c_old) + " to " + std::to_string(c_new));
    std::vector<float> out(static_cast<std::size_t>(cout * c_new * kk));
    const auto& w = layer.weight.values();
    for (std::int64_t o = 0; o < cout; ++o)
        for (std::int64_t p = 0; p < kk; ++p) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < c_old; ++i) acc += w[(o * c_old + i) * kk + p];
            const float m = static_cast<float>(acc / static_cast<double>(c_old));
            for (std::int64_t j = 0; j < c_new; ++j) out[(o * c_new + j) * kk + p] = m;
        }
    layer.weight = Tensor({cout, c_new, layer.weight.dim(2), layer.weight.dim(3)}, std::move(out));
}

struct EncoderLevel {
    ResBlock res;
    std::optional<AttentionBlock> attn;
    Conv2dLayer down;
};

struct DecoderLevel {
    Conv2dLayer up;
    ResBlock res;
    std::optional<AttentionBlock> attn;
};

struct ControlLevel {
    ResBlock res;
    Conv2dLayer zero;
    Conv2dLayer down;
};

// Encoder-shaped branch fed by x_t and the condition tensor. Its outputs
// pass through zero-initialized 1x1 projections, one per encoder stage plus
// the bottleneck.
struct ControlBranch {
    Conv2dLayer hint;
    Conv2dLayer conv_in;
    std::vector<ControlLevel> levels;
    ResBlock mid;
    Conv2dLayer mid_zero;

    std::vector<Tensor> residuals(const Tensor& x_t, const Tensor& cond, const Tensor& temb_act) const {
        std::vector<Tensor> out;
        auto h = add(conv_in.forward(x_t), hint.forward(cond));
        for (const auto& level : levels) {
            h = level.res.forward(h, temb_act);
            out.push_back(level.zero.forward(h));
            h = level.down.forward(h);
        }
        h = mid.forward(h, temb_act);
        out.push_back(mid_zero.forward(h));
        return out;
    }

    void visit(const std::string& prefix, const ParamVisitor& f) {
        const auto g = ParamGroup::control;
        hint.visit(prefix + ".hint", g, f);
        conv_in.visit(prefix + ".conv_in", g, f);
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const std::string p = prefix + ".level" + std::to_string(i);
            levels[i].res.visit(p + ".res", g, f);
            levels[i].zero.visit(p + ".zero", g, f);
            levels[i].down.visit(p + ".down", g, f);
        }
        mid.visit(prefix + ".mid", g, f);
        mid_zero.visit(prefix + ".mid_zero", g, f);
    }
};

enum class ControlMode {
    active,  // residuals from the control branch
    zeroed,  // residual slots filled with zeros
    off,     // backbone alone
};

/// Conditional U-Net noise predictor with a control branch and LoRA adapters
/// on every attention projection.
///
/// Copying a Denoiser copies parameter handles, not values; use clone().
struct Denoiser {
    DenoiserConfig config;
    LinearLayer time1, time2;
    Conv2dLayer conv_in;
    std::vector<EncoderLevel> encoder;
    ResBlock mid;
    AttentionBlock mid_attn;
    std::vector<DecoderLevel> decoder;  // deepest first
    GroupNormLayer out_norm;
    Conv2dLayer conv_out;
    ControlBranch control;

    // SiLU-activated time embedding, [N, time_embed_dim].
    Tensor time_embedding(const std::vector<int>& t) const {
        const std::int64_t n = static_cast<std::int64_t>(t.size());
        const std::int64_t dim = config.time_embed_dim, half = dim / 2;
        std::vector<float> v(static_cast<std::size_t>(n * dim));
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < half; ++j) {
                const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
                v[i * dim + j] = static_cast<float>(std::sin(t[i] * freq));
                v[i * dim + half + j] = static_cast<float>(std::cos(t[i] * freq));
            }
        Tensor sinusoid({n, dim}, std::move(v));
        return silu(time2.forward(silu(time1.forward(sinusoid))));
    }

    Tensor backbone(const Tensor& x_t, const Tensor& temb_act, const std::vector<Tensor>* residuals) const {
        std::vector<Tensor> skips;
        auto h = conv_in.forward(x_t);
        for (std::size_t s = 0; s < encoder.size(); ++s) {
            h = encoder[s].res.forward(h, temb_act);
            if (encoder[s].attn) h = encoder[s].attn->forward(h);
            if (residuals) h = add(h, (*residuals)[s]);
            skips.push_back(h);
            h = encoder[s].down.forward(h);
        }
        h = mid_attn.forward(mid.forward(h, temb_act));
        if (residuals) h = add(h, residuals->back());
        for (std::size_t i = 0; i < decoder.size(); ++i) {
            const std::size_t s = encoder.size() - 1 - i;
            h = decoder[i].up.forward(upsample_nearest2x(h));
            h = decoder[i].res.forward(concat_channels(h, skips[s]), temb_act);
            if (decoder[i].attn) h = decoder[i].attn->forward(h);
        }
        return conv_out.forward(silu(out_norm.forward(h)));
    }

    std::vector<AttentionBlock*> attention_blocks() {
        std::vector<AttentionBlock*> out;
        for (auto& e : encoder)
            if (e.attn) out.push_back(&*e.attn);
        out.push_back(&mid_attn);
        for (auto& d : decoder)
            if (d.attn) out.push_back(&*d.attn);
        return out;
    }

    void visit_parameters(const ParamVisitor& f) {
        const auto g = ParamGroup::backbone;
        time1.visit("time1", g, f);
        time2.visit("time2", g, f);
        conv_in.visit("conv_in", g, f);
        for (std::size_t i = 0; i < encoder.size(); ++i) {
            const std::string p = "enc" + std::to_string(i);
            encoder[i].res.visit(p + ".res", g, f);
            if (encoder[i].attn) encoder[i].attn->visit(p + ".attn", g, f);
            encoder[i].down.visit(p + ".down", g, f);
        }
        mid.visit("mid.res", g, f);
        mid_attn.visit("mid.attn", g, f);
        for (std::size_t i = 0; i < decoder.size(); ++i) {
            const std::string p = "dec" + std::to_string(i);
            decoder[i].up.visit(p + ".up", g, f);
            decoder[i].res.visit(p + ".res", g, f);
            if (decoder[i].attn) decoder[i].attn->visit(p + ".attn", g, f);
        }
        out_norm.visit("out_norm", g, f);
        conv_out.visit("conv_out", g, f);
        control.visit("control", f);
    }

    std::vector<NamedParam> parameters() {
        std::vector<NamedParam> out;
        visit_parameters([&](const std::string& name, Tensor& t, ParamGroup g) { out.push_back({name, t, g}); });
        return out;
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        for (auto& p : parameters()) n += p.tensor.numel();
        return n;
    }

    Denoiser clone() const {
        Denoiser copy = *this;
        copy.visit_parameters([](const std::string&, Tensor& t, ParamGroup) {
            const bool rg = t.requires_grad();
            t = t.detach();
            t.set_requires_grad(rg);
        });
        return copy;
    }
};

/// Builds the backbone, a control branch with the encoder's layout but its own
/// random weights, and (when lora_rank > 0) adapters on attention layers.
inline Denoiser build_denoiser(const DenoiserConfig& config, Rng& rng) {
    config.validate();
    Denoiser m;
    m.config = config;
    const int groups = config.norm_groups;
    const int tdim = config.time_embed_dim;
    m.time1 = LinearLayer::make(tdim, tdim, true, rng);
    m.time2 = LinearLayer::make(tdim, tdim, true, rng);
    m.conv_in = Conv2dLayer::make(config.image_channels, config.channels_at(0), 3, 1, 1, rng);

    // Resolution is tracked relative to a nominal input of 2^depth * 8 only
    // to decide attention placement; the network itself is size-agnostic.
    auto has_attention = [&](int level, std::int64_t input_size) {
        return (input_size >> level) <= config.attention_resolution;
    };
    const std::int64_t nominal = std::int64_t{8} << config.depth;

    int cin = config.channels_at(0);
    for (int l = 0; l < config.depth; ++l) {
        const int ch = config.channels_at(l);
        EncoderLevel e;
        e.res = ResBlock::make(cin, ch, tdim, groups, rng);
        if (has_attention(l, nominal)) e.attn = AttentionBlock::make(ch, groups, rng);
        e.down = Conv2dLayer::make(ch, ch, 3, 2, 1, rng);
        m.encoder.push_back(std::move(e));
        cin = ch;
    }
    m.mid = ResBlock::make(cin, cin, tdim, groups, rng);
    m.mid_attn = AttentionBlock::make(cin, groups, rng);
    for (int l = config.depth - 1; l >= 0; --l) {
        const int ch = config.channels_at(l);
        DecoderLevel d;
        d.up = Conv2dLayer::make(cin, ch, 3, 1, 1, rng);
        d.res = ResBlock::make(2 * ch, ch, tdim, groups, rng);
        if (has_attention(l, nominal)) d.attn = AttentionBlock::make(ch, groups, rng);
        m.decoder.push_back(std::move(d));
        cin = ch;
    }
    m.out_norm = GroupNormLayer::make(config.channels_at(0), groups);
    m.conv_out = Conv2dLayer::make(config.channels_at(0), config.image_channels, 3, 1, 1, rng);

    auto& c = m.control;
    c.hint = Conv2dLayer::make(config.hint_source_channels, config.channels_at(0), 3, 1, 1, rng);
    expand_input_channels(c.hint, config.cond_channels);
    c.conv_in = Conv2dLayer::make(config.image_channels, config.channels_at(0), 3, 1, 1, rng);
    int ccin = config.channels_at(0);
    for (int l = 0; l < config.depth; ++l) {
        const int ch = config.channels_at(l);
        auto res = ResBlock::make(ccin, ch, tdim, groups, rng);
        c.levels.push_back({std::move(res), Conv2dLayer::zeros(ch, ch, 1, 0), Conv2dLayer::make(ch, ch, 3, 2, 1, rng)});
        ccin = ch;
    }
    c.mid = ResBlock::make(ccin, ccin, tdim, groups, rng);
    c.mid_zero = Conv2dLayer::zeros(ccin, ccin, 1, 0);

    if (config.lora_rank > 0) {
        for (auto* block : m.attention_blocks()) {
            auto projections = block->projections();
            for (std::size_t i = 0; i < projections.size(); ++i)
                if (config.lora_targets & (1u << i))
                    attach_lora(*projections[i], config.lora_rank, config.lora_scale, rng);
        }
    }
    return m;
}

/// Noise prediction eps_theta(x_t, t, cond). In `active` mode the control
/// branch's residuals are added to every encoder stage output and the
/// bottleneck; `zeroed` adds zeros in the same places; `off` skips them.
inline Tensor predict_noise(const Tensor& x_t, const std::vector<int>& t, const Tensor& cond, const Denoiser& model,
                            ControlMode mode = ControlMode::active) {
    const auto& cfg = model.config;
    if (x_t.ndim() != 4 || x_t.dim(1) != cfg.image_channels)
        throw DimensionError("x_t must be [N, " + std::to_string(cfg.image_channels) + ", H, W], got " +
                             to_string(x_t.shape()));
    if (static_cast<std::int64_t>(t.size()) != x_t.dim(0)) throw DimensionError("need one timestep per sample");
    cfg.check_spatial(x_t.dim(2), x_t.dim(3));
    auto temb = model.time_embedding(t);
    if (mode == ControlMode::off) return model.backbone(x_t, temb, nullptr);
    if (!cond.defined() || cond.ndim() != 4 || cond.dim(1) != cfg.cond_channels)
        throw DimensionError("condition must have " + std::to_string(cfg.cond_channels) + " channels");
    if (cond.dim(0) != x_t.dim(0) || cond.dim(2) != x_t.dim(2) || cond.dim(3) != x_t.dim(3))
        throw DimensionError("condition shape " + to_string(cond.shape()) + " does not match x_t " +
                             to_string(x_t.shape()));
    std::vector<Tensor> residuals;
    if (mode == ControlMode::active) {
        residuals = model.control.residuals(x_t, cond, temb);
    } else {
        std::int64_t h = x_t.dim(2), w = x_t.dim(3);
        for (int l = 0; l < cfg.depth; ++l, h /= 2, w /= 2)
            residuals.push_back(Tensor::zeros({x_t.dim(0), cfg.channels_at(l), h, w}));
        residuals.push_back(Tensor::zeros({x_t.dim(0), cfg.channels_at(cfg.depth - 1), h, w}));
    }
    return model.backbone(x_t, temb, &residuals);
}

enum class TrainMode { full, lora_and_control };

inline TrainMode parse_train_mode(const std::string& s) {
    if (s == "full") return TrainMode::full;
    if (s == "lora_and_control") return TrainMode::lora_and_control;
    throw ConfigError("unknown training mode '" + s + "'");
}
inline std::string to_string(TrainMode m) { return m == TrainMode::full ? "full" : "lora_and_control"; }

inline bool is_trainable(ParamGroup g, TrainMode mode) {
    return mode == TrainMode::full || g != ParamGroup::backbone;
}

/// Parameters optimized under `mode`. lora_and_control returns exactly the
/// adapter and control-branch tensors.
inline std::vector<NamedParam> trainable_parameters(Denoiser& model, TrainMode mode) {
    std::vector<NamedParam> out;
    for (auto& p : model.parameters())
        if (is_trainable(p.group, mode)) out.push_back(p);
    return out;
}

// Puts exactly the trainable set on the tape; everything else is frozen.
inline void apply_train_mode(Denoiser& model, TrainMode mode) {
    model.visit_parameters([&](const std::string&, Tensor& t, ParamGroup g) { t.set_requires_grad(is_trainable(g, mode)); });
}

inline std::int64_t lora_parameter_count(Denoiser& model) {
    std::int64_t n = 0;
    for (auto& p : model.parameters())
        if (p.group == ParamGroup::lora) n += p.tensor.numel();
    return n;
}

// Folds every adapter into its host weight; the model then describes itself
// as adapter-free.
inline void merge_all_lora(Denoiser& model) {
    for (auto* block : model.attention_blocks())
        for (auto* proj : block->projections()) merge_lora(*proj);
    model.config.lora_rank = 0;
}

} // namespace hye
