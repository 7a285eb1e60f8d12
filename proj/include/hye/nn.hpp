#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hye/ops.hpp"
#include "hye/rng.hpp"

namespace hye {

// Which part of the model a parameter belongs to; drives freezing.
enum class ParamGroup { backbone, control, lora };

inline const char* to_string(ParamGroup g) {
    switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::control: return "control";
    case ParamGroup::lora: return "lora";
    }
    return "?";
}

struct NamedParam {
    std::string name;
    Tensor tensor;
    ParamGroup group;
};

using ParamVisitor = std::function<void(const std::string&, Tensor&, ParamGroup)>;

inline Tensor init_normal(Shape shape, double stddev, Rng& rng) {
    std::vector<float> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.normal() * stddev);
    return Tensor(std::move(shape), std::move(v));
}

struct Conv2dLayer {
    Tensor weight;  // [C_out, C_in, k, k]
    Tensor bias;    // [C_out]
    std::int64_t stride = 1;
    std::int64_t padding = 0;

    static Conv2dLayer make(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride,
                            std::int64_t padding, Rng& rng, double gain = 1.0) {
        Conv2dLayer c;
        c.weight = init_normal({cout, cin, k, k}, gain / std::sqrt(static_cast<double>(cin * k * k)), rng);
        c.bias = Tensor::zeros({cout});
        c.stride = stride;
        c.padding = padding;
        return c;
    }

    static Conv2dLayer zeros(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t padding) {
        Conv2dLayer c;
        c.weight = Tensor::zeros({cout, cin, k, k});
        c.bias = Tensor::zeros({cout});
        c.padding = padding;
        return c;
    }

    std::int64_t in_channels() const { return weight.dim(1); }
    std::int64_t out_channels() const { return weight.dim(0); }

    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

    void visit(const std::string& prefix, ParamGroup g, const ParamVisitor& f) {
        f(prefix + ".weight", weight, g);
        f(prefix + ".bias", bias, g);
    }
};

/// Low-rank increment on a host linear layer: W' = W + scale * B A with
/// A: [r, k] and B: [d, r]. B starts at zero so attaching is output-neutral.
struct LoraAdapter {
    Tensor A;
    Tensor B;
    std::int64_t rank = 0;
    float scale = 1.0f;

    std::int64_t parameter_count() const { return A.numel() + B.numel(); }
};

struct LinearLayer {
    Tensor weight;  // [d_out, d_in]
    Tensor bias;    // [d_out] or undefined
    std::optional<LoraAdapter> lora;

    static LinearLayer make(std::int64_t din, std::int64_t dout, bool with_bias, Rng& rng, double gain = 1.0) {
        LinearLayer l;
        l.weight = init_normal({dout, din}, gain / std::sqrt(static_cast<double>(din)), rng);
        if (with_bias) l.bias = Tensor::zeros({dout});
        return l;
    }

    Tensor forward(const Tensor& x) const {
        auto y = linear(x, weight, bias);
        if (!lora) return y;
        auto delta = linear(linear(x, lora->A), lora->B);
        if (lora->scale != 1.0f) delta = scale(delta, lora->scale);
        return add(y, delta);
    }

    void visit(const std::string& prefix, ParamGroup g, const ParamVisitor& f) {
        f(prefix + ".weight", weight, g);
        if (bias.defined()) f(prefix + ".bias", bias, g);
        if (lora) {
            f(prefix + ".lora_A", lora->A, ParamGroup::lora);
            f(prefix + ".lora_B", lora->B, ParamGroup::lora);
        }
    }
};

/// Attaches a rank-r adapter to `layer`: B = 0, A ~ N(0, 1/k).
inline LoraAdapter& attach_lora(LinearLayer& layer, std::int64_t rank, float scale_factor, Rng& rng) {
    const std::int64_t d = layer.weight.dim(0), k = layer.weight.dim(1);
    if (rank < 1 || rank > std::min(d, k))
        throw ConfigError("LoRA rank " + std::to_string(rank) + " outside [1, " + std::to_string(std::min(d, k)) + "]");
    LoraAdapter a;
    a.rank = rank;
    a.scale = scale_factor;
    a.A = init_normal({rank, k}, 1.0 / std::sqrt(static_cast<double>(k)), rng);
    a.B = Tensor::zeros({d, rank});
    layer.lora = std::move(a);
    return *layer.lora;
}

/// Folds the adapter into the host weight (W += scale * B A) and removes it.
inline void merge_lora(LinearLayer& layer) {
    if (!layer.lora) return;
    const auto& a = *layer.lora;
    const std::int64_t d = layer.weight.dim(0), k = layer.weight.dim(1), r = a.rank;
    detail::CMapRM<float> bm(a.B.values().data(), d, r);
    detail::CMapRM<float> am(a.A.values().data(), r, k);
    detail::MatRM<double> delta = bm.cast<double>() * am.cast<double>();
    auto w = layer.weight.mutable_data();
    for (std::int64_t i = 0; i < d * k; ++i)
        w[i] = static_cast<float>(w[i] + static_cast<double>(a.scale) * delta.data()[i]);
    layer.lora.reset();
}

struct GroupNormLayer {
    Tensor gamma;
    Tensor beta;
    std::int64_t groups = 8;

    static GroupNormLayer make(std::int64_t channels, std::int64_t groups) {
        if (channels % groups != 0)
            throw ConfigError("group norm: " + std::to_string(channels) + " channels not divisible by " +
                              std::to_string(groups) + " groups");
        return {Tensor::ones({channels}), Tensor::zeros({channels}), groups};
    }

    Tensor forward(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }

    void visit(const std::string& prefix, ParamGroup g, const ParamVisitor& f) {
        f(prefix + ".gamma", gamma, g);
        f(prefix + ".beta", beta, g);
    }
};

// GN -> SiLU -> conv -> +time -> GN -> SiLU -> conv, plus a (projected) skip.
struct ResBlock {
    GroupNormLayer norm1;
    Conv2dLayer conv1;
    LinearLayer time_proj;
    GroupNormLayer norm2;
    Conv2dLayer conv2;
    std::optional<Conv2dLayer> skip;

    static ResBlock make(std::int64_t cin, std::int64_t cout, std::int64_t time_dim, std::int64_t groups, Rng& rng) {
        ResBlock b;
        b.norm1 = GroupNormLayer::make(cin, groups);
        b.conv1 = Conv2dLayer::make(cin, cout, 3, 1, 1, rng);
        b.time_proj = LinearLayer::make(time_dim, cout, true, rng);
        b.norm2 = GroupNormLayer::make(cout, groups);
        b.conv2 = Conv2dLayer::make(cout, cout, 3, 1, 1, rng, 0.1);
        if (cin != cout) b.skip = Conv2dLayer::make(cin, cout, 1, 1, 0, rng);
        return b;
    }

    Tensor forward(const Tensor& x, const Tensor& temb_act) const {
        auto h = conv1.forward(silu(norm1.forward(x)));
        h = add(h, time_proj.forward(temb_act));
        h = conv2.forward(silu(norm2.forward(h)));
        return add(skip ? skip->forward(x) : x, h);
    }

    void visit(const std::string& prefix, ParamGroup g, const ParamVisitor& f) {
        norm1.visit(prefix + ".norm1", g, f);
        conv1.visit(prefix + ".conv1", g, f);
        time_proj.visit(prefix + ".time_proj", g, f);
        norm2.visit(prefix + ".norm2", g, f);
        conv2.visit(prefix + ".conv2", g, f);
        if (skip) skip->visit(prefix + ".skip", g, f);
    }
};

// Single-head self-attention over spatial positions with a residual path.
// The four projections are the LoRA targets.
struct AttentionBlock {
    GroupNormLayer norm;
    LinearLayer q, k, v, out;

    static AttentionBlock make(std::int64_t channels, std::int64_t groups, Rng& rng) {
        AttentionBlock a;
        a.norm = GroupNormLayer::make(channels, groups);
        a.q = LinearLayer::make(channels, channels, false, rng);
        a.k = LinearLayer::make(channels, channels, false, rng);
        a.v = LinearLayer::make(channels, channels, false, rng);
        a.out = LinearLayer::make(channels, channels, true, rng, 0.1);
        return a;
    }

    Tensor forward(const Tensor& x) const {
        const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        auto tokens = transpose_last2(reshape(norm.forward(x), {n, c, h * w}));  // [N, HW, C]
        auto qt = q.forward(tokens);
        auto kt = k.forward(tokens);
        auto vt = v.forward(tokens);
        auto scores = scale(bmm(qt, transpose_last2(kt)), 1.0f / std::sqrt(static_cast<float>(c)));
        auto mixed = out.forward(bmm(softmax_last(scores), vt));
        return add(x, reshape(transpose_last2(mixed), {n, c, h, w}));
    }

    std::vector<LinearLayer*> projections() { return {&q, &k, &v, &out}; }

    void visit(const std::string& prefix, ParamGroup g, const ParamVisitor& f) {
        norm.visit(prefix + ".norm", g, f);
        q.visit(prefix + ".q", g, f);
        k.visit(prefix + ".k", g, f);
        v.visit(prefix + ".v", g, f);
        out.visit(prefix + ".out", g, f);
    }
};

} // namespace hye
