#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "hye/denoiser.hpp"
#include "hye/scheduler.hpp"

namespace hye {

struct SamplingConfig {
    SamplerKind sampler = SamplerKind::ddpm;
    int steps = 0; // 0 = every step of the schedule (DDPM always uses every step)
    double eta = 0.0;
    int batch_size = 8;

    void validate(const NoiseSchedule& schedule) const {
        if (steps < 0 || steps > schedule.steps()) throw ConfigError("sampling steps must lie in [0, T]");
        if (eta < 0.0 || eta > 1.0) throw ConfigError("eta must lie in [0, 1]");
        if (batch_size < 1) throw ConfigError("sampling batch_size must be >= 1");
        if (sampler == SamplerKind::ddpm && steps != 0 && steps != schedule.steps())
            throw ConfigError("DDPM sampling visits every step; set steps to 0 or T");
    }
};

/// Runs the reverse process from pure Gaussian noise for each condition in
/// `cond` [N, 65, H, W] and returns x_0 clamped to [-1, 1] as [N, C, H, W].
/// With ControlMode::off the condition only fixes the output shape.
inline Tensor generate(const Denoiser& model, const NoiseSchedule& schedule, const Tensor& cond,
                       const SamplingConfig& cfg, Rng& rng, ControlMode mode = ControlMode::active) {
    cfg.validate(schedule);
    NoGradGuard no_grad;
    if (cond.ndim() != 4 || cond.dim(1) != model.config.cond_channels)
        throw ConditionError("conditions must be [N, " + std::to_string(model.config.cond_channels) + ", H, W], got " +
                             to_string(cond.shape()));
    const auto n = cond.dim(0), h = cond.dim(2), w = cond.dim(3);
    model.config.check_spatial(h, w);
    const auto c = static_cast<std::int64_t>(model.config.image_channels);
    const auto per_cond = cond.numel() / n;
    const auto per_img = c * h * w;
    const auto timesteps = sampling_timesteps(schedule, cfg.sampler == SamplerKind::ddpm || cfg.steps == 0
                                                            ? schedule.steps()
                                                            : cfg.steps);

    std::vector<float> out(static_cast<std::size_t>(n * per_img));
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
        const auto b = std::min<std::int64_t>(cfg.batch_size, n - start);
        const Tensor cb(Shape{b, cond.dim(1), h, w},
                        std::vector<float>(cond.values().begin() + start * per_cond,
                                           cond.values().begin() + (start + b) * per_cond));
        auto x = standard_normal(Shape{b, c, h, w}, rng);
        for (std::size_t k = 0; k < timesteps.size(); ++k) {
            const int t = timesteps[k];
            const int prev = k + 1 < timesteps.size() ? timesteps[k + 1] : -1;
            const auto eps = predict_noise(x, std::vector<int>(static_cast<std::size_t>(b), t), cb, model, mode);
            x = reverse_step(x, eps, t, schedule, cfg.sampler, cfg.eta, rng, prev);
        }
        for (std::int64_t i = 0; i < b * per_img; ++i) {
            const float v = x.values()[static_cast<std::size_t>(i)];
            if (!std::isfinite(v)) throw NumericError("sampling produced a non-finite value");
            out[static_cast<std::size_t>(start * per_img + i)] = std::clamp(v, -1.0f, 1.0f);
        }
    }
    return Tensor(Shape{n, c, h, w}, std::move(out));
}

} // namespace hye
