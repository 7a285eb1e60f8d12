#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "hye/errors.hpp"
#include "hye/rng.hpp"
#include "hye/tensor.hpp"

namespace hye {

enum class ScheduleKind { linear, cosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

inline ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown schedule kind '" + s + "'");
}

/// Per-step noise variances and their cumulative retention.
///
/// Index t runs over 0..T-1; alpha_bar[t] is the product of alpha[0..t].
/// All arrays are double precision; tensors are scaled in float.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::linear;
    double beta_min = 0.0;
    double beta_max = 0.0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    int steps() const { return static_cast<int>(beta.size()); }

    // alpha_bar at t-1, with the clean-signal convention alpha_bar[-1] = 1.
    double alpha_bar_prev(int t) const { return t > 0 ? alpha_bar[t - 1] : 1.0; }

    // True when the last step is close enough to pure noise for sampling to
    // start from a standard Gaussian.
    bool reaches_noise() const { return !alpha_bar.empty() && alpha_bar.back() < 0.01; }

    void check_index(int t) const {
        if (t < 0 || t >= steps())
            throw IndexError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
    }
};

// Builds a schedule directly from per-step betas, each in (0, 1).
inline NoiseSchedule schedule_from_betas(std::vector<double> betas, ScheduleKind kind = ScheduleKind::linear) {
    if (betas.size() < 2) throw ConfigError("noise schedule needs at least 2 steps");
    NoiseSchedule s;
    s.kind = kind;
    s.beta = std::move(betas);
    s.alpha.resize(s.beta.size());
    s.alpha_bar.resize(s.beta.size());
    double running = 1.0;
    for (std::size_t t = 0; t < s.beta.size(); ++t) {
        if (!(s.beta[t] > 0.0 && s.beta[t] < 1.0))
            throw ConfigError("beta[" + std::to_string(t) + "] = " + std::to_string(s.beta[t]) + " outside (0, 1)");
        s.alpha[t] = 1.0 - s.beta[t];
        running *= s.alpha[t];
        s.alpha_bar[t] = running;
    }
    s.beta_min = *std::min_element(s.beta.begin(), s.beta.end());
    s.beta_max = *std::max_element(s.beta.begin(), s.beta.end());
    return s;
}

/// Linear: beta ramps from beta_min to beta_max. Cosine: the squared-cosine
/// alpha_bar curve (offset 0.008) with betas clipped into [beta_min, beta_max].
inline NoiseSchedule build_schedule(ScheduleKind kind, int steps, double beta_min, double beta_max) {
    if (steps < 2) throw ConfigError("noise schedule needs T >= 2, got " + std::to_string(steps));
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        throw ConfigError("noise schedule needs 0 < beta_min <= beta_max < 1");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    if (kind == ScheduleKind::linear) {
        for (int t = 0; t < steps; ++t)
            betas[t] = beta_min + (beta_max - beta_min) * static_cast<double>(t) / static_cast<double>(steps - 1);
    } else {
        constexpr double offset = 0.008;
        auto f = [&](double u) {
            const double c = std::cos((u + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
            return c * c;
        };
        for (int t = 0; t < steps; ++t) {
            const double ratio = f(static_cast<double>(t + 1) / steps) / f(static_cast<double>(t) / steps);
            betas[t] = std::clamp(1.0 - ratio, beta_min, beta_max);
        }
    }
    auto s = schedule_from_betas(std::move(betas), kind);
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    return s;
}

/// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise.
inline Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& schedule) {
    schedule.check_index(t);
    if (noise.shape() != x0.shape())
        throw DimensionError("noise shape " + to_string(noise.shape()) + " differs from x0 " + to_string(x0.shape()));
    const double a = std::sqrt(schedule.alpha_bar[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
    std::vector<float> out(x0.values().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(a * x0.values()[i] + b * noise.values()[i]);
    return Tensor(x0.shape(), std::move(out));
}

// Batched variant: one timestep per sample along axis 0.
inline Tensor forward_diffuse(const Tensor& x0, const std::vector<int>& t, const Tensor& noise,
                              const NoiseSchedule& schedule) {
    if (noise.shape() != x0.shape()) throw DimensionError("noise shape differs from x0");
    if (static_cast<std::int64_t>(t.size()) != x0.dim(0))
        throw DimensionError("need one timestep per sample");
    const std::int64_t per = x0.numel() / x0.dim(0);
    std::vector<float> out(x0.values().size());
    for (std::size_t n = 0; n < t.size(); ++n) {
        schedule.check_index(t[n]);
        const double a = std::sqrt(schedule.alpha_bar[t[n]]);
        const double b = std::sqrt(1.0 - schedule.alpha_bar[t[n]]);
        for (std::int64_t j = 0; j < per; ++j) {
            const std::size_t i = n * per + j;
            out[i] = static_cast<float>(a * x0.values()[i] + b * noise.values()[i]);
        }
    }
    return Tensor(x0.shape(), std::move(out));
}

struct OffsetNoiseConfig {
    double gamma = 0.2;
    bool enabled = true;
    // One offset per sample instead of one per (sample, channel).
    bool per_sample_only = false;
};

inline Tensor standard_normal(const Shape& shape, Rng& rng) {
    std::vector<float> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return Tensor(shape, std::move(v));
}

/// eps' = eps + gamma * nu, where nu is drawn once per (sample, channel) and
/// held constant over the spatial axes. Disabled configs return plain eps.
inline Tensor sample_offset_noise(const Shape& shape, const OffsetNoiseConfig& config, Rng& rng) {
    if (shape.size() < 3) throw DimensionError("offset noise needs [N, C, spatial...] shape, got " + to_string(shape));
    if (config.gamma < 0.0) throw ConfigError("offset-noise gamma must be >= 0");
    Tensor eps = standard_normal(shape, rng);
    if (!config.enabled) return eps;
    const std::int64_t n = shape[0], c = shape[1];
    const std::int64_t spatial = numel(shape) / (n * c);
    auto v = eps.mutable_data();
    for (std::int64_t i = 0; i < n; ++i) {
        double nu = 0.0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
            if (!config.per_sample_only || ch == 0) nu = rng.normal();
            const float off = static_cast<float>(config.gamma * nu);
            float* plane = v.data() + (i * c + ch) * spatial;
            for (std::int64_t j = 0; j < spatial; ++j) plane[j] += off;
        }
    }
    return eps;
}

// Returned by snr() when alpha_bar is exactly 1: finite, positive, never NaN.
inline constexpr double kSaturatedSnr = 1e30;

/// alpha_bar_t / (1 - alpha_bar_t). Uses the cumulative product so the ratio
/// falls across the trajectory.
inline double snr(int t, const NoiseSchedule& schedule) {
    schedule.check_index(t);
    const double ab = schedule.alpha_bar[t];
    if (ab >= 1.0) return kSaturatedSnr;
    return ab / (1.0 - ab);
}

inline double min_snr_weight_from_snr(double snr_value, double gamma_snr) {
    if (!(gamma_snr > 0.0)) throw ConfigError("gamma_snr must be > 0");
    return std::min(snr_value, gamma_snr) / snr_value;
}

/// min(SNR(t), gamma_snr) / SNR(t): 1 where SNR <= gamma_snr, gamma_snr/SNR above.
inline double min_snr_weight(int t, double gamma_snr, const NoiseSchedule& schedule) {
    return min_snr_weight_from_snr(snr(t, schedule), gamma_snr);
}

enum class SamplerKind { ddpm, ddim };

inline SamplerKind parse_sampler_kind(const std::string& s) {
    if (s == "ddpm") return SamplerKind::ddpm;
    if (s == "ddim") return SamplerKind::ddim;
    throw ConfigError("unknown sampler '" + s + "'");
}
inline std::string to_string(SamplerKind k) { return k == SamplerKind::ddpm ? "ddpm" : "ddim"; }

// Scalars one reverse step needs. `alpha_bar_prev` is the retention at the
// step being moved to (1 at the end of the trajectory).
struct StepCoefficients {
    double alpha;
    double alpha_bar;
    double alpha_bar_prev;
    double beta;
};

/// Posterior mean under the epsilon parameterization:
/// (x_t - beta / sqrt(1 - alpha_bar) * eps) / sqrt(alpha), plus sigma * z with
/// sigma^2 the posterior variance. No noise is added when `last` is set.
inline Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_pred, const StepCoefficients& c, bool last, Rng& rng) {
    const double one_minus_ab = 1.0 - c.alpha_bar;
    // With alpha_bar = 1 nothing has been corrupted yet; the eps term vanishes.
    const double eps_coef = one_minus_ab > 0.0 ? c.beta / std::sqrt(one_minus_ab) : 0.0;
    const double inv_sqrt_alpha = 1.0 / std::sqrt(c.alpha);
    const double var = one_minus_ab > 0.0 ? (1.0 - c.alpha_bar_prev) / one_minus_ab * c.beta : 0.0;
    const double sigma = last ? 0.0 : std::sqrt(std::max(var, 0.0));
    std::vector<float> out(x_t.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double mu = (x_t.values()[i] - eps_coef * eps_pred.values()[i]) * inv_sqrt_alpha;
        if (sigma > 0.0) mu += sigma * rng.normal();
        out[i] = static_cast<float>(mu);
    }
    return Tensor(x_t.shape(), std::move(out));
}

/// Generalized (eta-controlled) implicit step; eta = 0 is deterministic.
inline Tensor ddim_step(const Tensor& x_t, const Tensor& eps_pred, const StepCoefficients& c, double eta, Rng& rng) {
    const double ab = c.alpha_bar, abp = c.alpha_bar_prev;
    const double sigma = eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / abp));
    const double dir = std::sqrt(std::max(0.0, 1.0 - abp - sigma * sigma));
    const double sab = std::sqrt(ab), s1ab = std::sqrt(1.0 - ab), sabp = std::sqrt(abp);
    std::vector<float> out(x_t.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double e = eps_pred.values()[i];
        const double x0_hat = (x_t.values()[i] - s1ab * e) / sab;
        double v = sabp * x0_hat + dir * e;
        if (sigma > 0.0) v += sigma * rng.normal();
        out[i] = static_cast<float>(v);
    }
    return Tensor(x_t.shape(), std::move(out));
}

/// One reverse step from t to `t_prev` (defaults to t - 1; -1 means the clean
/// end of the trajectory). DDPM always moves one step; DDIM may stride.
inline Tensor reverse_step(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& schedule,
                           SamplerKind sampler, double eta, Rng& rng, std::optional<int> t_prev = std::nullopt) {
    schedule.check_index(t);
    if (eps_pred.shape() != x_t.shape()) throw DimensionError("eps prediction shape differs from x_t");
    if (eta < 0.0 || eta > 1.0) throw ConfigError("eta must lie in [0, 1]");
    if (sampler == SamplerKind::ddpm) {
        StepCoefficients c{schedule.alpha[t], schedule.alpha_bar[t], schedule.alpha_bar_prev(t), schedule.beta[t]};
        return ddpm_step(x_t, eps_pred, c, t == 0, rng);
    }
    const int prev = t_prev.value_or(t - 1);
    if (prev >= t || prev < -1) throw IndexError("DDIM target step must lie in [-1, t)");
    const double abp = prev >= 0 ? schedule.alpha_bar[prev] : 1.0;
    StepCoefficients c{schedule.alpha[t], schedule.alpha_bar[t], abp, schedule.beta[t]};
    return ddim_step(x_t, eps_pred, c, eta, rng);
}

// Descending timesteps visited by a sampler using `count` steps out of T.
inline std::vector<int> sampling_timesteps(const NoiseSchedule& schedule, int count) {
    const int total = schedule.steps();
    if (count < 1 || count > total) throw ConfigError("sampling steps must lie in [1, T]");
    std::vector<int> ts;
    for (int i = count - 1; i >= 0; --i) {
        // Evenly spaced, always ending at t = 0 and starting at T - 1.
        const int t = count == 1 ? total - 1
                                 : static_cast<int>(std::lround(static_cast<double>(i) * (total - 1) / (count - 1)));
        if (ts.empty() || ts.back() != t) ts.push_back(t);
    }
    return ts;
}

} // namespace hye
