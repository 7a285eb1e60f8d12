#pragma once

// Independent direct-formula references for SSIM and FSIM plus the image
// fixtures they are checked on.

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>

#include "hye/metrics.hpp"

namespace hye::oracle {

using cd = std::complex<double>;

inline Tensor image(int h, int w, const std::function<double(int, int)>& f) {
    std::vector<float> v(static_cast<std::size_t>(h * w));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) v[y * w + x] = static_cast<float>(f(y, x));
    return Tensor(Shape{h, w}, std::move(v));
}

inline Tensor structured(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> noise(static_cast<std::size_t>(n * n));
    for (auto& v : noise) v = 0.1 * rng.normal();
    return image(n, n, [&](int y, int x) {
        const double bars = std::sin(x * 0.6) * 0.4 + (y > n / 2 ? 0.3 : -0.3);
        const double disc = (y - n / 3) * (y - n / 3) + (x - n / 3) * (x - n / 3) < n * n / 25 ? 0.4 : 0.0;
        return std::clamp(bars + disc + noise[y * n + x], -1.0, 1.0);
    });
}

inline Tensor gaussian_blur(const Tensor& t, double sigma) {
    const int h = static_cast<int>(t.dim(0)), w = static_cast<int>(t.dim(1));
    const int r = static_cast<int>(std::ceil(3 * sigma));
    return image(h, w, [&](int y, int x) {
        double acc = 0, wsum = 0;
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                const int yy = std::clamp(y + dy, 0, h - 1), xx = std::clamp(x + dx, 0, w - 1);
                const double k = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                acc += k * t.values()[yy * w + xx];
                wsum += k;
            }
        return acc / wsum;
    });
}

inline Tensor mix(const Tensor& a, const Tensor& b, double alpha) {
    std::vector<float> v(a.values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((1 - alpha) * a.values()[i] + alpha * b.values()[i]);
    return Tensor(a.shape(), std::move(v));
}

// Direct windowed SSIM: explicit 2-D Gaussian weights per window position.
inline double ssim_oracle(const Tensor& a, const Tensor& b) {
    const int h = static_cast<int>(a.dim(0)), w = static_cast<int>(a.dim(1));
    const double c1 = 0.02 * 0.02, c2 = 0.06 * 0.06;
    double wts[11][11], z = 0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) z += wts[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
    double total = 0;
    int count = 0;
    for (int y = 0; y + 11 <= h; ++y)
        for (int x = 0; x + 11 <= w; ++x) {
            double ma = 0, mb = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    ma += wts[i][j] / z * a.values()[(y + i) * w + x + j];
                    mb += wts[i][j] / z * b.values()[(y + i) * w + x + j];
                }
            double va = 0, vb = 0, cab = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double da = a.values()[(y + i) * w + x + j] - ma, db = b.values()[(y + i) * w + x + j] - mb;
                    va += wts[i][j] / z * da * da;
                    vb += wts[i][j] / z * db * db;
                    cab += wts[i][j] / z * da * db;
                }
            total += (2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / count;
}

// Naive 2-D DFT; sign -1 forward, +1 inverse (scaled by 1/N).
inline std::vector<cd> dft2(const std::vector<cd>& in, int h, int w, int sign) {
    std::vector<cd> out(in.size());
    for (int u = 0; u < h; ++u)
        for (int v = 0; v < w; ++v) {
            cd acc = 0;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    acc += in[y * w + x] *
                           std::polar(1.0, sign * 2 * std::numbers::pi * (double(u * y) / h + double(v * x) / w));
            out[u * w + v] = sign > 0 ? acc / double(h * w) : acc;
        }
    return out;
}

inline std::vector<double> pc_oracle(const std::vector<double>& img, int h, int w) {
    const int n = h * w;
    std::vector<cd> im(img.begin(), img.end());
    const auto F = dft2(im, h, w, -1);
    // Frequency grid in unshifted layout: bin k maps to k or k - n.
    auto coord = [](int i, int len) {
        const int k = i < (len + 1) / 2 ? i : i - len;
        return len % 2 ? double(k) / (len - 1) : double(k) / len;
    };
    std::vector<double> rad(n), th(n), lp(n);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double fx = coord(x, w), fy = coord(y, h);
            rad[y * w + x] = std::hypot(fx, fy);
            th[y * w + x] = std::atan2(-fy, fx);
            lp[y * w + x] = 1.0 / (1.0 + std::pow(rad[y * w + x] / 0.45, 30));
        }
    rad[0] = 1;
    const double thsig = std::numbers::pi / 4 / 1.2;
    std::vector<double> e_all(n, 0), a_all(n, 0);
    for (int o = 0; o < 4; ++o) {
        const double ang = o * std::numbers::pi / 4;
        std::vector<std::vector<cd>> eo(4);
        std::vector<std::vector<double>> spatial(4, std::vector<double>(n));
        std::vector<double> se(n, 0), so(n, 0), sa(n, 0);
        double emn = 0;
        for (int s = 0; s < 4; ++s) {
            const double fo = 1.0 / (6.0 * std::pow(2.0, s));
            std::vector<cd> filt(n), prod(n);
            for (int i = 0; i < n; ++i) {
                const double lg = i == 0 ? 0.0
                                         : std::exp(-std::pow(std::log(rad[i] / fo), 2) /
                                                    (2 * std::pow(std::log(0.55), 2))) * lp[i];
                const double d = std::abs(std::remainder(th[i] - ang, 2 * std::numbers::pi));
                const double f = lg * std::exp(-d * d / (2 * thsig * thsig));
                filt[i] = f;
                prod[i] = F[i] * f;
                if (s == 0) emn += f * f;
            }
            const auto sf = dft2(filt, h, w, +1);
            for (int i = 0; i < n; ++i) spatial[s][i] = sf[i].real() * std::sqrt(double(n));
            eo[s] = dft2(prod, h, w, +1);
            for (int i = 0; i < n; ++i) se[i] += eo[s][i].real(), so[i] += eo[s][i].imag(), sa[i] += std::abs(eo[s][i]);
        }
        std::vector<double> mags;
        for (int i = 0; i < n; ++i) mags.push_back(std::norm(eo[0][i]));
        std::sort(mags.begin(), mags.end());
        const double med = n % 2 ? mags[n / 2] : (mags[n / 2 - 1] + mags[n / 2]) / 2;
        const double np = (-med / std::log(0.5)) / emn;
        double an2 = 0, aiaj = 0;
        for (int i = 0; i < n; ++i)
            for (int s = 0; s < 4; ++s) {
                an2 += spatial[s][i] * spatial[s][i];
                for (int t = s + 1; t < 4; ++t) aiaj += spatial[s][i] * spatial[t][i];
            }
        const double tau = std::sqrt((2 * np * an2 + 4 * np * aiaj) / 2);
        const double T = (tau * std::sqrt(std::numbers::pi / 2) + 2 * std::sqrt((2 - std::numbers::pi / 2) * tau * tau)) / 1.7;
        for (int i = 0; i < n; ++i) {
            const double xe = std::hypot(se[i], so[i]) + 1e-4;
            double en = 0;
            for (int s = 0; s < 4; ++s) {
                const double e = eo[s][i].real(), od = eo[s][i].imag();
                en += e * se[i] / xe + od * so[i] / xe - std::abs(e * so[i] / xe - od * se[i] / xe);
            }
            e_all[i] += std::max(en - T, 0.0);
            a_all[i] += sa[i];
        }
    }
    std::vector<double> pc(n);
    for (int i = 0; i < n; ++i) pc[i] = e_all[i] / a_all[i];
    return pc;
}

inline double fsim_oracle(const Tensor& a, const Tensor& b) {
    const int h = static_cast<int>(a.dim(0)), w = static_cast<int>(a.dim(1));
    std::vector<double> x(a.values().begin(), a.values().end()), y(b.values().begin(), b.values().end());
    for (auto& v : x) v = (v + 1) * 127.5;
    for (auto& v : y) v = (v + 1) * 127.5;
    const auto p1 = pc_oracle(x, h, w), p2 = pc_oracle(y, h, w);
    auto grad = [&](const std::vector<double>& im, int r, int c) {
        auto at = [&](int rr, int cc) { return rr < 0 || cc < 0 || rr >= h || cc >= w ? 0.0 : im[rr * w + cc]; };
        // Scharr derivatives written out as central differences.
        const double gx = (3 * (at(r - 1, c + 1) - at(r - 1, c - 1)) + 10 * (at(r, c + 1) - at(r, c - 1)) +
                           3 * (at(r + 1, c + 1) - at(r + 1, c - 1))) / 16;
        const double gy = (3 * (at(r + 1, c - 1) - at(r - 1, c - 1)) + 10 * (at(r + 1, c) - at(r - 1, c)) +
                           3 * (at(r + 1, c + 1) - at(r - 1, c + 1))) / 16;
        return std::hypot(gx, gy);
    };
    double num = 0, den = 0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const int i = r * w + c;
            const double g1 = grad(x, r, c), g2 = grad(y, r, c);
            const double spc = (2 * p1[i] * p2[i] + 0.85) / (p1[i] * p1[i] + p2[i] * p2[i] + 0.85);
            const double sg = (2 * g1 * g2 + 160) / (g1 * g1 + g2 * g2 + 160);
            num += spc * sg * std::max(p1[i], p2[i]);
            den += std::max(p1[i], p2[i]);
        }
    return num / den;
}

inline Tensor checkerboard(int n, bool invert_quadrant) {
    return image(n, n, [&](int y, int x) {
        double v = ((y / 2 + x / 2) % 2) ? 0.8 : -0.8;
        if (invert_quadrant && y < n / 2 && x < n / 2) v = -v;
        return v;
    });
}

} // namespace hye::oracle
