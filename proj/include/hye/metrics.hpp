#pragma once

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <json.hpp>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hye/data_pipeline.hpp"
#include "hye/ops.hpp"
#include "hye/training.hpp"

namespace hye {

namespace detail {

struct Plane {
    std::int64_t h = 0, w = 0;
    std::vector<double> v;

    double& at(std::int64_t y, std::int64_t x) { return v[static_cast<std::size_t>(y * w + x)]; }
    double at(std::int64_t y, std::int64_t x) const { return v[static_cast<std::size_t>(y * w + x)]; }
};

// Splits [H, W] or [C, H, W] into single-channel planes.
inline std::vector<Plane> planes_of(const Tensor& t) {
    std::int64_t c = 1, h, w;
    if (t.ndim() == 2) h = t.dim(0), w = t.dim(1);
    else if (t.ndim() == 3) c = t.dim(0), h = t.dim(1), w = t.dim(2);
    else throw DimensionError("image metrics expect [H, W] or [C, H, W], got " + to_string(t.shape()));
    std::vector<Plane> out(static_cast<std::size_t>(c));
    const auto n = static_cast<std::size_t>(h * w);
    for (std::int64_t k = 0; k < c; ++k) {
        out[k] = {h, w, std::vector<double>(t.values().begin() + k * n, t.values().begin() + (k + 1) * n)};
    }
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                             " differ");
}

} // namespace detail

struct MeanStdSimilarity {
    double mean_sim = 0, std_sim = 0;
    bool degenerate = false; // real image is constant; the range floor was used
};

/// |mu_gen - mu_real| / D and |sigma_gen - sigma_real| / D with D the real
/// image's dynamic range (floored at 1e-6). Population moments.
inline MeanStdSimilarity mean_std_similarity(const Tensor& gen, const Tensor& real) {
    detail::require_same_shape(gen, real, "mean_std_similarity");
    const auto moments = [](const std::vector<float>& v) {
        double m = 0;
        for (float x : v) m += x;
        m /= static_cast<double>(v.size());
        double s = 0;
        for (float x : v) s += (x - m) * (x - m);
        return std::pair{m, std::sqrt(s / static_cast<double>(v.size()))};
    };
    const auto [mg, sg] = moments(gen.values());
    const auto [mr, sr] = moments(real.values());
    const auto [lo, hi] = std::minmax_element(real.values().begin(), real.values().end());
    const double range = double(*hi) - double(*lo);
    MeanStdSimilarity r;
    r.degenerate = range < 1e-6;
    const double d = std::max(range, 1e-6);
    r.mean_sim = std::abs(mg - mr) / d;
    r.std_sim = std::abs(sg - sr) / d;
    return r;
}

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01, k2 = 0.03;
    double data_range = 2.0; // [-1, 1] images
};

namespace detail {

inline std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> g(static_cast<std::size_t>(size));
    const double c = (size - 1) / 2.0;
    for (int i = 0; i < size; ++i) g[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    const double s = std::accumulate(g.begin(), g.end(), 0.0);
    for (auto& x : g) x /= s;
    return g;
}

// Separable 'valid' correlation.
inline Plane filter_valid(const Plane& p, const std::vector<double>& g) {
    const auto k = static_cast<std::int64_t>(g.size());
    Plane rows{p.h, p.w - k + 1, {}};
    rows.v.assign(static_cast<std::size_t>(rows.h * rows.w), 0.0);
    for (std::int64_t y = 0; y < rows.h; ++y)
        for (std::int64_t x = 0; x < rows.w; ++x) {
            double acc = 0;
            for (std::int64_t i = 0; i < k; ++i) acc += g[i] * p.at(y, x + i);
            rows.at(y, x) = acc;
        }
    Plane out{p.h - k + 1, rows.w, {}};
    out.v.assign(static_cast<std::size_t>(out.h * out.w), 0.0);
    for (std::int64_t y = 0; y < out.h; ++y)
        for (std::int64_t x = 0; x < out.w; ++x) {
            double acc = 0;
            for (std::int64_t i = 0; i < k; ++i) acc += g[i] * rows.at(y + i, x);
            out.at(y, x) = acc;
        }
    return out;
}

inline double ssim_plane(const Plane& a, const Plane& b, const SsimOptions& o) {
    const double c1 = (o.k1 * o.data_range) * (o.k1 * o.data_range);
    const double c2 = (o.k2 * o.data_range) * (o.k2 * o.data_range);
    const auto index = [&](double ma, double mb, double va, double vb, double cab) {
        return ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    };
    if (a.h < o.window || a.w < o.window) {
        const double n = static_cast<double>(a.v.size());
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < a.v.size(); ++i) ma += a.v[i], mb += b.v[i];
        ma /= n, mb /= n;
        double va = 0, vb = 0, cab = 0;
        for (std::size_t i = 0; i < a.v.size(); ++i) {
            va += (a.v[i] - ma) * (a.v[i] - ma);
            vb += (b.v[i] - mb) * (b.v[i] - mb);
            cab += (a.v[i] - ma) * (b.v[i] - mb);
        }
        return index(ma, mb, va / n, vb / n, cab / n);
    }
    const auto g = gaussian_kernel(o.window, o.sigma);
    Plane aa = a, bb = b, ab = a;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        aa.v[i] = a.v[i] * a.v[i];
        bb.v[i] = b.v[i] * b.v[i];
        ab.v[i] = a.v[i] * b.v[i];
    }
    const auto ma = filter_valid(a, g), mb = filter_valid(b, g);
    const auto saa = filter_valid(aa, g), sbb = filter_valid(bb, g), sab = filter_valid(ab, g);
    double total = 0;
    for (std::size_t i = 0; i < ma.v.size(); ++i) {
        const double mu_a = ma.v[i], mu_b = mb.v[i];
        total += index(mu_a, mu_b, saa.v[i] - mu_a * mu_a, sbb.v[i] - mu_b * mu_b, sab.v[i] - mu_a * mu_b);
    }
    return total / static_cast<double>(ma.v.size());
}

} // namespace detail

/// Mean local SSIM with a Gaussian window; multi-channel inputs average the
/// per-channel scores.
inline double ssim(const Tensor& a, const Tensor& b, const SsimOptions& o = {}) {
    detail::require_same_shape(a, b, "ssim");
    if (o.window < 1 || o.window % 2 == 0) throw ConfigError("SSIM window must be odd and positive");
    const auto pa = detail::planes_of(a), pb = detail::planes_of(b);
    double total = 0;
    for (std::size_t k = 0; k < pa.size(); ++k) total += detail::ssim_plane(pa[k], pb[k], o);
    return total / static_cast<double>(pa.size());
}

struct FsimOptions {
    int scales = 4;
    int orientations = 4;
    double min_wavelength = 6.0;
    double mult = 2.0;
    double sigma_onf = 0.55;
    double d_theta_on_sigma = 1.2;
    double noise_k = 2.0;
    double epsilon = 1e-4;
    double t1 = 0.85;
    double t2 = 160.0;
    // Inputs are mapped linearly from [value_low, value_high] onto [0, 255],
    // the scale the gradient constant t2 is calibrated for.
    double value_low = -1.0, value_high = 1.0;
};

namespace detail {

using Spectrum = std::vector<std::complex<double>>;

inline Spectrum fft2(const Spectrum& in, std::int64_t h, std::int64_t w, bool inverse) {
    Eigen::FFT<double> fft;
    Spectrum out = in;
    std::vector<std::complex<double>> line, res;
    for (std::int64_t y = 0; y < h; ++y) {
        line.assign(out.begin() + y * w, out.begin() + (y + 1) * w);
        if (inverse) fft.inv(res, line);
        else fft.fwd(res, line);
        std::copy(res.begin(), res.end(), out.begin() + y * w);
    }
    line.resize(static_cast<std::size_t>(h));
    for (std::int64_t x = 0; x < w; ++x) {
        for (std::int64_t y = 0; y < h; ++y) line[y] = out[y * w + x];
        if (inverse) fft.inv(res, line);
        else fft.fwd(res, line);
        for (std::int64_t y = 0; y < h; ++y) out[y * w + x] = res[y];
    }
    return out;
}

// Normalized frequency coordinate of FFT bin i along an axis of length n,
// laid out as after ifftshift.
inline double freq_coord(std::int64_t i, std::int64_t n) {
    const std::int64_t k = i < (n + 1) / 2 ? i : i - n;
    return n % 2 ? static_cast<double>(k) / static_cast<double>(n - 1) : static_cast<double>(k) / static_cast<double>(n);
}

// Phase congruency from a log-Gabor filter bank with per-orientation noise
// compensation.
inline Plane phase_congruency(const Plane& img, const FsimOptions& o) {
    const auto h = img.h, w = img.w;
    const auto n = static_cast<std::size_t>(h * w);
    Spectrum im(n);
    for (std::size_t i = 0; i < n; ++i) im[i] = img.v[i];
    const auto image_fft = fft2(im, h, w, false);

    std::vector<double> radius(n), sin_t(n), cos_t(n), lowpass(n);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            const double fx = freq_coord(x, w), fy = freq_coord(y, h);
            const auto i = static_cast<std::size_t>(y * w + x);
            radius[i] = std::sqrt(fx * fx + fy * fy);
            const double theta = std::atan2(-fy, fx);
            sin_t[i] = std::sin(theta);
            cos_t[i] = std::cos(theta);
            lowpass[i] = 1.0 / (1.0 + std::pow(radius[i] / 0.45, 2 * 15));
        }
    radius[0] = 1.0;

    std::vector<std::vector<double>> log_gabor(static_cast<std::size_t>(o.scales), std::vector<double>(n));
    const double log_sigma = std::log(o.sigma_onf);
    for (int s = 0; s < o.scales; ++s) {
        const double fo = 1.0 / (o.min_wavelength * std::pow(o.mult, s));
        for (std::size_t i = 0; i < n; ++i) {
            const double l = std::log(radius[i] / fo);
            log_gabor[s][i] = std::exp(-(l * l) / (2 * log_sigma * log_sigma)) * lowpass[i];
        }
        log_gabor[s][0] = 0.0;
    }

    const double theta_sigma = std::numbers::pi / o.orientations / o.d_theta_on_sigma;
    const double root_n = std::sqrt(static_cast<double>(n));
    std::vector<double> energy_all(n, 0.0), an_all(n, 0.0);
    std::vector<Spectrum> eo(static_cast<std::size_t>(o.scales));
    std::vector<std::vector<double>> spatial_filter(static_cast<std::size_t>(o.scales), std::vector<double>(n));
    std::vector<double> filter(n);

    for (int orient = 0; orient < o.orientations; ++orient) {
        const double angle = orient * std::numbers::pi / o.orientations;
        std::vector<double> spread(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double ds = sin_t[i] * std::cos(angle) - cos_t[i] * std::sin(angle);
            const double dc = cos_t[i] * std::cos(angle) + sin_t[i] * std::sin(angle);
            const double dtheta = std::abs(std::atan2(ds, dc));
            spread[i] = std::exp(-(dtheta * dtheta) / (2 * theta_sigma * theta_sigma));
        }
        std::vector<double> sum_e(n, 0.0), sum_o(n, 0.0), sum_an(n, 0.0);
        double em_n = 0;
        for (int s = 0; s < o.scales; ++s) {
            Spectrum f(n);
            for (std::size_t i = 0; i < n; ++i) {
                filter[i] = log_gabor[s][i] * spread[i];
                f[i] = filter[i];
            }
            const auto sf = fft2(f, h, w, true);
            for (std::size_t i = 0; i < n; ++i) spatial_filter[s][i] = sf[i].real() * root_n;
            Spectrum prod(n);
            for (std::size_t i = 0; i < n; ++i) prod[i] = image_fft[i] * filter[i];
            eo[s] = fft2(prod, h, w, true);
            for (std::size_t i = 0; i < n; ++i) {
                sum_an[i] += std::abs(eo[s][i]);
                sum_e[i] += eo[s][i].real();
                sum_o[i] += eo[s][i].imag();
            }
            if (s == 0)
                for (std::size_t i = 0; i < n; ++i) em_n += filter[i] * filter[i];
        }
        std::vector<double> energy(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double x_energy = std::sqrt(sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]) + o.epsilon;
            const double mean_e = sum_e[i] / x_energy, mean_o = sum_o[i] / x_energy;
            for (int s = 0; s < o.scales; ++s) {
                const double e = eo[s][i].real(), od = eo[s][i].imag();
                energy[i] += e * mean_e + od * mean_o - std::abs(e * mean_o - od * mean_e);
            }
        }

        // Noise threshold from the smallest-scale response, whose amplitude is
        // taken to be Rayleigh distributed.
        std::vector<double> e2(n);
        for (std::size_t i = 0; i < n; ++i) e2[i] = std::norm(eo[0][i]);
        std::vector<double> sorted = e2;
        std::sort(sorted.begin(), sorted.end());
        const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        const double mean_e2n = -median / std::log(0.5);
        const double noise_power = em_n > 0 ? mean_e2n / em_n : 0.0;
        double sum_an2 = 0, sum_aiaj = 0;
        for (std::size_t i = 0; i < n; ++i) {
            for (int s = 0; s < o.scales; ++s) {
                sum_an2 += spatial_filter[s][i] * spatial_filter[s][i];
                for (int t = s + 1; t < o.scales; ++t) sum_aiaj += spatial_filter[s][i] * spatial_filter[t][i];
            }
        }
        const double noise_energy2 = 2 * noise_power * sum_an2 + 4 * noise_power * sum_aiaj;
        const double tau = std::sqrt(noise_energy2 / 2);
        const double noise_energy = tau * std::sqrt(std::numbers::pi / 2);
        const double noise_sigma = std::sqrt((2 - std::numbers::pi / 2) * tau * tau);
        const double threshold = (noise_energy + o.noise_k * noise_sigma) / 1.7;
        for (std::size_t i = 0; i < n; ++i) {
            energy_all[i] += std::max(energy[i] - threshold, 0.0);
            an_all[i] += sum_an[i];
        }
    }
    Plane pc{h, w, std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) pc.v[i] = an_all[i] > 1e-12 ? energy_all[i] / an_all[i] : 0.0;
    return pc;
}

// Scharr gradient magnitude with zero padding ('same' convolution).
inline Plane gradient_magnitude(const Plane& p) {
    static constexpr double k[3][3] = {{3, 0, -3}, {10, 0, -10}, {3, 0, -3}};
    Plane g{p.h, p.w, std::vector<double>(p.v.size())};
    const auto px = [&](std::int64_t y, std::int64_t x) {
        return y < 0 || x < 0 || y >= p.h || x >= p.w ? 0.0 : p.at(y, x);
    };
    for (std::int64_t y = 0; y < p.h; ++y)
        for (std::int64_t x = 0; x < p.w; ++x) {
            double gx = 0, gy = 0;
            for (int i = -1; i <= 1; ++i)
                for (int j = -1; j <= 1; ++j) {
                    const double v = px(y - i, x - j);
                    gx += k[i + 1][j + 1] * v / 16.0;
                    gy += k[j + 1][i + 1] * v / 16.0;
                }
            g.at(y, x) = std::sqrt(gx * gx + gy * gy);
        }
    return g;
}

// F x F box average followed by decimation, F = max(1, round(min(H, W) / 256)).
inline Plane fsim_downsample(const Plane& p) {
    const auto f = std::max<std::int64_t>(1, std::llround(std::min(p.h, p.w) / 256.0));
    if (f == 1) return p;
    const std::int64_t h = (p.h + f - 1) / f, w = (p.w + f - 1) / f;
    const std::int64_t off = (f - 1) / 2;
    Plane out{h, w, std::vector<double>(static_cast<std::size_t>(h * w))};
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            double acc = 0;
            for (std::int64_t i = 0; i < f; ++i)
                for (std::int64_t j = 0; j < f; ++j) {
                    const auto yy = y * f + i - off, xx = x * f + j - off;
                    if (yy >= 0 && xx >= 0 && yy < p.h && xx < p.w) acc += p.at(yy, xx);
                }
            out.at(y, x) = acc / static_cast<double>(f * f);
        }
    return out;
}

} // namespace detail

/// Feature similarity: phase-congruency and gradient-magnitude similarity,
/// pooled with the larger phase congruency as weight.
inline double fsim(const Tensor& a, const Tensor& b, const FsimOptions& o = {}) {
    detail::require_same_shape(a, b, "fsim");
    auto pa = detail::planes_of(a), pb = detail::planes_of(b);
    if (pa.size() != 1) throw DimensionError("fsim expects a single-channel image, got " + to_string(a.shape()));
    if (!(o.value_high > o.value_low)) throw ConfigError("FSIM value range must be non-empty");
    const auto is_constant = [](const detail::Plane& p) {
        return std::all_of(p.v.begin(), p.v.end(), [&](double v) { return v == p.v.front(); });
    };
    if (is_constant(pa[0]) && is_constant(pb[0])) return 1.0;

    const double gain = 255.0 / (o.value_high - o.value_low);
    for (auto* p : {&pa[0], &pb[0]})
        for (auto& v : p->v) v = (v - o.value_low) * gain;
    const auto x = detail::fsim_downsample(pa[0]), y = detail::fsim_downsample(pb[0]);
    const auto pc1 = detail::phase_congruency(x, o), pc2 = detail::phase_congruency(y, o);
    const auto g1 = detail::gradient_magnitude(x), g2 = detail::gradient_magnitude(y);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < x.v.size(); ++i) {
        const double s_pc = (2 * pc1.v[i] * pc2.v[i] + o.t1) / (pc1.v[i] * pc1.v[i] + pc2.v[i] * pc2.v[i] + o.t1);
        const double s_g = (2 * g1.v[i] * g2.v[i] + o.t2) / (g1.v[i] * g1.v[i] + g2.v[i] * g2.v[i] + o.t2);
        const double pcm = std::max(pc1.v[i], pc2.v[i]);
        num += s_pc * s_g * pcm;
        den += pcm;
    }
    return den > 0 ? num / den : 1.0;
}

struct EnlEstimate {
    double value = 0;
    bool saturated = false; // zero variance: the estimator is unbounded
};

/// mean^2 / variance over a homogeneous linear-intensity region.
inline EnlEstimate enl(const Tensor& region) {
    const auto& v = region.values();
    if (v.size() < 256) throw DomainError("ENL needs at least 256 pixels, got " + std::to_string(v.size()));
    double m = 0;
    for (float x : v) {
        if (!(x > 0)) throw DomainError("ENL needs positive linear intensity");
        m += x;
    }
    m /= static_cast<double>(v.size());
    double var = 0;
    for (float x : v) var += (x - m) * (x - m);
    var /= static_cast<double>(v.size() - 1);
    if (var == 0) return {std::numeric_limits<double>::infinity(), true};
    return {m * m / var, false};
}

/// ENL of a normalized dB image: the median over non-overlapping 16 x 16
/// blocks of the linear intensity, so class boundaries affect few blocks.
inline double image_enl(const Tensor& normalized, DbWindow window = {}) {
    const auto db = denormalize_sar(normalized, window);
    const auto planes = detail::planes_of(db);
    const auto& p = planes.front();
    std::vector<double> values;
    for (std::int64_t by = 0; by + 16 <= p.h; by += 16)
        for (std::int64_t bx = 0; bx + 16 <= p.w; bx += 16) {
            std::vector<float> block;
            block.reserve(256);
            for (std::int64_t y = by; y < by + 16; ++y)
                for (std::int64_t x = bx; x < bx + 16; ++x) block.push_back(static_cast<float>(from_db(p.at(y, x))));
            const auto e = enl(Tensor(Shape{256}, std::move(block)));
            if (!e.saturated) values.push_back(e.value);
        }
    if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(values.begin(), values.end());
    const auto k = values.size();
    return k % 2 ? values[k / 2] : 0.5 * (values[k / 2 - 1] + values[k / 2]);
}

struct MetricsReport {
    double mean_sim = 0, std_sim = 0, ssim = 0, fsim = 0;
    double enl_gen = 0, enl_real = 0;
    int n_pairs = 0;
    int degenerate_pairs = 0;

    std::string to_json() const {
        return nlohmann::json{{"mean_sim", mean_sim}, {"std_sim", std_sim}, {"ssim", ssim},
                              {"fsim", fsim},         {"enl_gen", enl_gen}, {"enl_real", enl_real},
                              {"n_pairs", n_pairs},   {"degenerate_pairs", degenerate_pairs}}
            .dump();
    }

    std::string to_table() const {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(4);
        os << "metric          value\n"
           << "mean_sim (low)  " << mean_sim << "\n"
           << "std_sim (low)   " << std_sim << "\n"
           << "ssim (high)     " << ssim << "\n"
           << "fsim (high)     " << fsim << "\n"
           << "enl generated   " << enl_gen << "\n"
           << "enl real        " << enl_real << "\n"
           << "pairs           " << n_pairs << "\n";
        return os.str();
    }
};

/// Pairwise metrics averaged over pairs (gen[i], real[i]). Images are
/// normalized single-channel tiles.
inline MetricsReport evaluate_pairs(const std::vector<Tensor>& gen, const std::vector<Tensor>& real,
                                    DbWindow window = {}) {
    if (gen.size() != real.size())
        throw PairingError("evaluation needs matching counts, got " + std::to_string(gen.size()) + " generated and " +
                           std::to_string(real.size()) + " real images");
    if (gen.empty()) throw EvaluationError("no image pairs to evaluate");
    MetricsReport r;
    r.n_pairs = static_cast<int>(gen.size());
    double enl_g = 0, enl_r = 0;
    int enl_n = 0;
    for (std::size_t i = 0; i < gen.size(); ++i) {
        const auto ms = mean_std_similarity(gen[i], real[i]);
        r.mean_sim += ms.mean_sim;
        r.std_sim += ms.std_sim;
        r.degenerate_pairs += ms.degenerate;
        r.ssim += ssim(gen[i], real[i]);
        r.fsim += fsim(gen[i], real[i]);
        const double eg = image_enl(gen[i], window), er = image_enl(real[i], window);
        if (std::isfinite(eg) && std::isfinite(er)) enl_g += eg, enl_r += er, ++enl_n;
    }
    const double n = static_cast<double>(gen.size());
    r.mean_sim /= n, r.std_sim /= n, r.ssim /= n, r.fsim /= n;
    r.enl_gen = enl_n ? enl_g / enl_n : std::numeric_limits<double>::quiet_NaN();
    r.enl_real = enl_n ? enl_r / enl_n : std::numeric_limits<double>::quiet_NaN();
    return r;
}

struct LabeledSet {
    std::vector<Tensor> images; // [1, H, W] each
    std::vector<int> labels;

    void add(Tensor image, int label) {
        images.push_back(std::move(image));
        labels.push_back(label);
    }
    std::size_t size() const { return images.size(); }
};

struct ClassifierConfig {
    int width = 8;
    int epochs = 20;
    int batch_size = 16;
    double learning_rate = 5e-3;
    std::uint64_t seed = 7;
};

/// Two stride-2 convolutions, global average pooling and a linear head.
class SceneClassifier {
public:
    SceneClassifier(int channels, int classes, const ClassifierConfig& cfg) : cfg_(cfg) {
        Rng rng(cfg.seed);
        conv1_ = Conv2dLayer::make(channels, cfg.width, 3, 2, 1, rng);
        conv2_ = Conv2dLayer::make(cfg.width, 2 * cfg.width, 3, 2, 1, rng);
        head_ = LinearLayer::make(2 * cfg.width, classes, true, rng);
    }

    Tensor logits(const Tensor& x) const {
        auto h = silu(conv1_.forward(x));
        h = silu(conv2_.forward(h));
        return head_.forward(mean_spatial(h));
    }

    void fit(const LabeledSet& data) {
        std::vector<NamedParam> params;
        const auto add = [&](const char* name, Tensor& t) { params.push_back({name, t, ParamGroup::backbone}); };
        add("conv1.weight", conv1_.weight);
        add("conv1.bias", conv1_.bias);
        add("conv2.weight", conv2_.weight);
        add("conv2.bias", conv2_.bias);
        add("head.weight", head_.weight);
        add("head.bias", head_.bias);
        for (auto& p : params) p.tensor.set_requires_grad(true);
        AdamW opt;
        Rng order_rng(cfg_.seed ^ 0x5A5A5A5Aull);
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), order_rng.engine());
            for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
                const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg_.batch_size));
                std::vector<const Tensor*> xs;
                std::vector<int> ys;
                for (std::size_t i = start; i < end; ++i) {
                    xs.push_back(&data.images[order[i]]);
                    ys.push_back(data.labels[order[i]]);
                }
                for (auto& p : params) p.tensor.clear_grad();
                cross_entropy(logits(stack(xs)), ys).backward();
                opt.step(params, cfg_.learning_rate);
            }
        }
        for (auto& p : params) {
            p.tensor.clear_grad();
            p.tensor.set_requires_grad(false);
        }
    }

    std::vector<int> predict(const std::vector<Tensor>& images) const {
        std::vector<const Tensor*> xs;
        for (const auto& im : images) xs.push_back(&im);
        const auto l = logits(stack(xs));
        const auto k = l.dim(1);
        std::vector<int> out(images.size());
        for (std::size_t i = 0; i < images.size(); ++i) {
            const auto* row = l.values().data() + static_cast<std::int64_t>(i) * k;
            out[i] = static_cast<int>(std::max_element(row, row + k) - row);
        }
        return out;
    }

    double accuracy(const LabeledSet& data) const {
        const auto pred = predict(data.images);
        int hit = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
        return static_cast<double>(hit) / static_cast<double>(pred.size());
    }

private:
    ClassifierConfig cfg_;
    Conv2dLayer conv1_, conv2_;
    LinearLayer head_;
};

struct DownstreamResult {
    double acc_real = 0, acc_augmented = 0;
};

/// Trains the same fixed classifier on the real and on the augmented training
/// set and reports both test accuracies.
inline DownstreamResult downstream_classify(const LabeledSet& real_train, const LabeledSet& augmented_train,
                                            const LabeledSet& test, const ClassifierConfig& cfg = {}) {
    if (real_train.size() == 0 || augmented_train.size() == 0 || test.size() == 0)
        throw EvaluationError("downstream evaluation needs non-empty training and test sets");
    std::set<int> train_classes(real_train.labels.begin(), real_train.labels.end());
    train_classes.insert(augmented_train.labels.begin(), augmented_train.labels.end());
    const std::set<int> test_classes(test.labels.begin(), test.labels.end());
    for (int c : train_classes)
        if (!test_classes.count(c))
            throw EvaluationError("class " + std::to_string(c) + " is absent from the test set");
    if (*train_classes.begin() < 0) throw EvaluationError("class labels must be non-negative");
    const int classes = std::max(*train_classes.rbegin(), *test_classes.rbegin()) + 1;
    const int channels = static_cast<int>(test.images.front().dim(0));

    DownstreamResult r;
    SceneClassifier a(channels, classes, cfg);
    a.fit(real_train);
    r.acc_real = a.accuracy(test);
    SceneClassifier b(channels, classes, cfg);
    b.fit(augmented_train);
    r.acc_augmented = b.accuracy(test);
    return r;
}

} // namespace hye
