#include <gtest/gtest.h>

#include <cmath>

#include "hye/scheduler.hpp"

using namespace hye;

namespace {

double rms(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += std::pow(double(a[i]) - double(b[i]), 2);
    return std::sqrt(acc / static_cast<double>(a.numel()));
}

struct Moments {
    double mean = 0.0, var = 0.0;
};

Moments moments(const std::vector<double>& v) {
    Moments m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    for (double x : v) m.var += (x - m.mean) * (x - m.mean);
    m.var /= static_cast<double>(v.size() - 1);
    return m;
}

} // namespace

TEST(BuildSchedule, LinearThousandStepsTerminalProduct) {
    auto s = build_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
    long double product = 1.0L;
    for (int t = 0; t < 1000; ++t) product *= 1.0L - (1e-4L + (0.02L - 1e-4L) * t / 999.0L);
    EXPECT_NEAR(s.alpha_bar[999], static_cast<double>(product), 1e-9 * static_cast<double>(product) + 1e-15);
    EXPECT_NEAR(s.alpha_bar[999], 4.0e-5, 0.05e-5);
    EXPECT_TRUE(s.reaches_noise());
}

TEST(BuildSchedule, TwoStepHandProduct) {
    auto s = build_schedule(ScheduleKind::linear, 2, 0.5, 0.5);
    EXPECT_DOUBLE_EQ(s.alpha_bar[0], 0.5);
    EXPECT_DOUBLE_EQ(s.alpha_bar[1], 0.25);
}

TEST(BuildSchedule, CosineIsMonotoneAndStartsNearOne) {
    auto s = build_schedule(ScheduleKind::cosine, 1000, 1e-5, 0.999);
    EXPECT_GT(s.alpha_bar[0], 0.99);
    for (int t = 1; t < 1000; ++t) EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    EXPECT_TRUE(s.reaches_noise());
}

TEST(BuildSchedule, InvalidBoundsAreConfigErrors) {
    EXPECT_THROW(build_schedule(ScheduleKind::linear, 1, 1e-4, 0.02), ConfigError);
    EXPECT_THROW(build_schedule(ScheduleKind::linear, 10, 0.0, 0.02), ConfigError);
    EXPECT_THROW(build_schedule(ScheduleKind::linear, 10, 0.03, 0.02), ConfigError);
    EXPECT_THROW(build_schedule(ScheduleKind::linear, 10, 1e-4, 1.0), ConfigError);
}

TEST(BuildSchedule, TypeInvariantsHoldForBothKinds) {
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine})
        for (int steps : {2, 50, 100, 1000}) {
            auto s = build_schedule(kind, steps, 1e-4 * 1000.0 / steps, std::min(0.999, 0.02 * 1000.0 / steps));
            for (int t = 0; t < steps; ++t) {
                EXPECT_GT(s.beta[t], 0.0);
                EXPECT_LT(s.beta[t], 1.0);
                if (t > 0) {
                    EXPECT_EQ(s.alpha_bar[t], s.alpha_bar[t - 1] * s.alpha[t]);
                    EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
                    if (kind == ScheduleKind::linear) {
                        EXPECT_GE(s.beta[t], s.beta[t - 1]);
                    }
                }
            }
        }
}

TEST(ForwardDiffuse, ReductionsAndErrors) {
    Rng rng(2);
    auto x0 = standard_normal({1, 1, 4, 4}, rng);
    auto noise = standard_normal({1, 1, 4, 4}, rng);
    NoiseSchedule clean;
    clean.beta = {0.0, 0.5};
    clean.alpha = {1.0, 0.5};
    clean.alpha_bar = {1.0, 0.5};
    auto same = forward_diffuse(x0, 0, noise, clean);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(same[i], x0[i]);

    auto s = build_schedule(ScheduleKind::linear, 100, 1e-3, 0.2);
    auto scaled = forward_diffuse(x0, 40, Tensor::zeros({1, 1, 4, 4}), s);
    for (int i = 0; i < 16; ++i) EXPECT_FLOAT_EQ(scaled[i], static_cast<float>(std::sqrt(s.alpha_bar[40]) * x0[i]));
    EXPECT_THROW(forward_diffuse(x0, 100, noise, s), IndexError);
    EXPECT_THROW(forward_diffuse(x0, -1, noise, s), IndexError);
}

// The closed form must agree in distribution with iterating the one-step
// recursion x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) eps_t.
TEST(ForwardDiffuse, ClosedFormMatchesStepwiseRecursion) {
    auto s = build_schedule(ScheduleKind::linear, 100, 1e-3, 0.2);
    const int draws = 10000;
    const double x0 = 0.7;
    for (int t : {0, 10, 50, 99}) {
        Rng rng_step(100 + t), rng_closed(200 + t);
        std::vector<double> stepwise(draws), closed(draws);
        for (int d = 0; d < draws; ++d) {
            double x = x0;
            for (int k = 0; k <= t; ++k) x = std::sqrt(s.alpha[k]) * x + std::sqrt(1.0 - s.alpha[k]) * rng_step.normal();
            stepwise[d] = x;
            Tensor x0t({1}, static_cast<float>(x0));
            Tensor n({1}, static_cast<float>(rng_closed.normal()));
            closed[d] = forward_diffuse(x0t, t, n, s)[0];
        }
        const auto ms = moments(stepwise), mc = moments(closed);
        const double var = 1.0 - s.alpha_bar[t];
        const double se_mean = std::sqrt(var / draws);
        const double se_var = var * std::sqrt(2.0 / (draws - 1));
        EXPECT_NEAR(ms.mean, std::sqrt(s.alpha_bar[t]) * x0, 3 * se_mean) << "t=" << t;
        EXPECT_NEAR(mc.mean, std::sqrt(s.alpha_bar[t]) * x0, 3 * se_mean) << "t=" << t;
        EXPECT_NEAR(ms.var, var, 3 * se_var) << "t=" << t;
        EXPECT_NEAR(mc.var, var, 3 * se_var) << "t=" << t;
    }
}

TEST(ForwardDiffuse, VariancePreservingForGaussianSignal) {
    auto s = build_schedule(ScheduleKind::linear, 100, 1e-3, 0.2);
    Rng rng(17);
    const int m = 20000;
    for (int t : {5, 30, 80}) {
        const double sx = 1.5;
        auto x0 = standard_normal({m}, rng);
        for (auto& v : x0.mutable_data()) v *= static_cast<float>(sx);
        auto xt = forward_diffuse(x0, t, standard_normal({m}, rng), s);
        std::vector<double> v(xt.data().begin(), xt.data().end());
        const double expected = s.alpha_bar[t] * sx * sx + (1.0 - s.alpha_bar[t]);
        EXPECT_NEAR(moments(v).var, expected, 3 * expected * std::sqrt(2.0 / (m - 1)));
    }
}

TEST(OffsetNoise, ZeroGammaIsStandardGaussian) {
    Rng a(5), b(5);
    auto plain = standard_normal({2, 3, 4, 4}, a);
    auto off = sample_offset_noise({2, 3, 4, 4}, OffsetNoiseConfig{0.2, false}, b);
    for (int i = 0; i < plain.numel(); ++i) EXPECT_EQ(plain[i], off[i]);

    Rng c(9);
    auto zero = sample_offset_noise({20000, 1, 1, 2}, OffsetNoiseConfig{0.0, true}, c);
    std::vector<double> v(zero.data().begin(), zero.data().end());
    const auto m = moments(v);
    EXPECT_NEAR(m.var, 1.0, 3 * std::sqrt(2.0 / v.size()));
    EXPECT_NEAR(m.mean, 0.0, 3 * std::sqrt(1.0 / v.size()));
}

// Per-pixel variance 1 + gamma^2 and same-plane covariance gamma^2.
TEST(OffsetNoise, CovarianceStructure) {
    const int m = 100000;
    Rng rng(123);
    auto eps = sample_offset_noise({m, 1, 1, 2}, OffsetNoiseConfig{0.2, true}, rng);
    double sp = 0.0, spp = 0.0, spq = 0.0;
    for (int i = 0; i < m; ++i) {
        const double p = eps[2 * i], q = eps[2 * i + 1];
        sp += p;
        spp += p * p;
        spq += p * q;
    }
    const double var = spp / m - std::pow(sp / m, 2);
    const double cov = spq / m;
    EXPECT_NEAR(var, 1.04, 3 * 1.04 * std::sqrt(2.0 / m));
    EXPECT_NEAR(cov, 0.04, 3 * std::sqrt((1.04 * 1.04 + 0.04 * 0.04) / m));

    // Distinct channels of one sample are independent in the default mode.
    Rng rng2(321);
    auto chans = sample_offset_noise({m, 2, 1, 1}, OffsetNoiseConfig{0.2, true}, rng2);
    double cross = 0.0;
    for (int i = 0; i < m; ++i) cross += double(chans[2 * i]) * chans[2 * i + 1];
    EXPECT_NEAR(cross / m, 0.0, 3 * 1.04 / std::sqrt(double(m)));

    Rng rng3(77);
    auto shared = sample_offset_noise({m, 2, 1, 1}, OffsetNoiseConfig{0.2, true, true}, rng3);
    cross = 0.0;
    for (int i = 0; i < m; ++i) cross += double(shared[2 * i]) * shared[2 * i + 1];
    EXPECT_NEAR(cross / m, 0.04, 3 * std::sqrt((1.04 * 1.04 + 0.04 * 0.04) / m));
}

TEST(OffsetNoise, SpatialMeanVariance) {
    const int m = 20000, h = 8, w = 8;
    Rng rng(55);
    auto eps = sample_offset_noise({m, 1, h, w}, OffsetNoiseConfig{0.2, true}, rng);
    std::vector<double> means(m);
    for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < h * w; ++j) acc += eps[i * h * w + j];
        means[i] = acc / (h * w);
    }
    const double expected = 0.04 + 1.0 / (h * w);
    EXPECT_NEAR(moments(means).var, expected, 3 * expected * std::sqrt(2.0 / (m - 1)));
}

TEST(Snr, ExamplesAndSaturation) {
    auto half = schedule_from_betas({0.5, 0.5});
    EXPECT_DOUBLE_EQ(snr(0, half), 1.0);
    auto eighty = schedule_from_betas({0.2, 0.5});
    EXPECT_NEAR(snr(0, eighty), 4.0, 1e-12);
    auto lin = build_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
    EXPECT_NEAR(snr(0, lin), (1.0 - 1e-4) / 1e-4, 1e-6);
    for (int t = 1; t < 1000; ++t) EXPECT_LT(snr(t, lin), snr(t - 1, lin));

    NoiseSchedule clean;
    clean.beta = {0.0, 0.5};
    clean.alpha = {1.0, 0.5};
    clean.alpha_bar = {1.0, 0.5};
    const double sat = snr(0, clean);
    EXPECT_TRUE(std::isfinite(sat));
    EXPECT_EQ(sat, kSaturatedSnr);
    const double w = min_snr_weight(0, 5.0, clean);
    EXPECT_GT(w, 0.0);
    EXPECT_LE(w, 1.0);
}

TEST(MinSnrWeight, Examples) {
    EXPECT_EQ(min_snr_weight_from_snr(2.0, 5.0), 1.0);
    EXPECT_EQ(min_snr_weight_from_snr(5.0, 5.0), 1.0);
    EXPECT_EQ(min_snr_weight_from_snr(10.0, 5.0), 0.5);
    EXPECT_THROW(min_snr_weight_from_snr(10.0, 0.0), ConfigError);
}

TEST(MinSnrWeight, NonDecreasingInTime) {
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
        auto s = build_schedule(kind, 1000, 1e-4, kind == ScheduleKind::linear ? 0.02 : 0.999);
        for (int t = 1; t < 1000; ++t) {
            const double w = min_snr_weight(t, 5.0, s);
            EXPECT_GE(w, min_snr_weight(t - 1, 5.0, s));
            EXPECT_GT(w, 0.0);
            EXPECT_LE(w, 1.0);
        }
    }
}

// With the exact injected noise as the prediction, deterministic DDIM walks
// back to x0 from x_T.
TEST(ReverseStep, DdimPerfectDenoiserRoundTrip) {
    for (int steps : {50, 100, 1000}) {
        auto s = build_schedule(ScheduleKind::linear, steps, 1e-4 * 1000.0 / steps, 0.02 * 1000.0 / steps);
        Rng rng(steps);
        auto x0 = standard_normal({2, 1, 8, 8}, rng);
        auto noise = standard_normal({2, 1, 8, 8}, rng);
        auto x = forward_diffuse(x0, steps - 1, noise, s);
        for (int t = steps - 1; t >= 0; --t) x = reverse_step(x, noise, t, s, SamplerKind::ddim, 0.0, rng);
        EXPECT_LT(rms(x, x0), 1e-4) << "T=" << steps;
    }
}

TEST(ReverseStep, DdimStridedRoundTrip) {
    auto s = build_schedule(ScheduleKind::linear, 100, 1e-3, 0.2);
    Rng rng(4);
    auto x0 = standard_normal({1, 1, 8, 8}, rng);
    auto noise = standard_normal({1, 1, 8, 8}, rng);
    auto ts = sampling_timesteps(s, 25);
    ASSERT_EQ(ts.front(), 99);
    ASSERT_EQ(ts.back(), 0);
    auto x = forward_diffuse(x0, ts.front(), noise, s);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int prev = i + 1 < ts.size() ? ts[i + 1] : -1;
        x = reverse_step(x, noise, ts[i], s, SamplerKind::ddim, 0.0, rng, prev);
    }
    EXPECT_LT(rms(x, x0), 1e-4);
}

TEST(ReverseStep, FinalDdpmStepAddsNoNoiseAndDdimIsDeterministic) {
    auto s = build_schedule(ScheduleKind::linear, 100, 1e-3, 0.2);
    Rng data(1);
    auto x = standard_normal({1, 1, 4, 4}, data);
    auto e = standard_normal({1, 1, 4, 4}, data);
    Rng r1(10), r2(20);
    auto a = reverse_step(x, e, 0, s, SamplerKind::ddpm, 0.0, r1);
    auto b = reverse_step(x, e, 0, s, SamplerKind::ddpm, 0.0, r2);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(a[i], b[i]);
    auto c = reverse_step(x, e, 50, s, SamplerKind::ddim, 0.0, r1);
    auto d = reverse_step(x, e, 50, s, SamplerKind::ddim, 0.0, r2);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(c[i], d[i]);
    auto f = reverse_step(x, e, 50, s, SamplerKind::ddpm, 0.0, r1);
    auto g = reverse_step(x, e, 50, s, SamplerKind::ddpm, 0.0, r2);
    EXPECT_GT(rms(f, g), 0.0);
}

TEST(ReverseStep, ZeroEpsAtCleanSignalRescalesByAlpha) {
    Rng rng(3);
    auto x = standard_normal({1, 1, 2, 2}, rng);
    StepCoefficients c{0.81, 1.0, 1.0, 0.19};
    auto y = ddpm_step(x, Tensor::zeros({1, 1, 2, 2}), c, false, rng);
    for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y[i], static_cast<float>(x[i] / 0.9));
}

TEST(ReverseStep, InvalidEtaAndIndex) {
    auto s = build_schedule(ScheduleKind::linear, 10, 1e-3, 0.2);
    Rng rng(0);
    auto x = Tensor::zeros({1, 1, 2, 2});
    EXPECT_THROW(reverse_step(x, x, 5, s, SamplerKind::ddim, 1.5, rng), ConfigError);
    EXPECT_THROW(reverse_step(x, x, 5, s, SamplerKind::ddim, -0.1, rng), ConfigError);
    EXPECT_THROW(reverse_step(x, x, 10, s, SamplerKind::ddpm, 0.0, rng), IndexError);
}
