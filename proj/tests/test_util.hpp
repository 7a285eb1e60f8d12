#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hye/ops.hpp"
#include "hye/rng.hpp"

namespace hye::testing {

template <class T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
    return BasicTensor<T>(std::move(shape), std::move(v));
}

struct GradCheckResult {
    bool ok = true;
    double worst_abs = 0.0;
    std::string detail;
};

// Central finite differences against the tape's gradient for every element of
// every input. Passes when |analytic - numeric| <= max(abs_floor, rel * scale).
template <class T>
GradCheckResult grad_check(const std::function<BasicTensor<T>(const std::vector<BasicTensor<T>>&)>& f,
                           std::vector<BasicTensor<T>> inputs, double h = 1e-3, double rel = 1e-3,
                           double abs_floor = 1e-4) {
    for (auto& x : inputs) x.set_requires_grad(true);
    auto loss = f(inputs);
    loss.backward();
    GradCheckResult result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& x = inputs[k];
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const T orig = x.data()[i];
            double plus, minus;
            {
                NoGradGuard ng;
                x.mutable_data()[i] = static_cast<T>(orig + h);
                plus = static_cast<double>(f(inputs).item());
                x.mutable_data()[i] = static_cast<T>(orig - h);
                minus = static_cast<double>(f(inputs).item());
                x.mutable_data()[i] = orig;
            }
            const double numeric = (plus - minus) / (2.0 * h);
            const double analytic = static_cast<double>(x.grad()[i]);
            const double err = std::abs(analytic - numeric);
            const double tol = std::max(abs_floor, rel * std::max(std::abs(analytic), std::abs(numeric)));
            result.worst_abs = std::max(result.worst_abs, err);
            if (err > tol && result.ok) {
                result.ok = false;
                result.detail = "input " + std::to_string(k) + " element " + std::to_string(i) +
                                ": analytic " + std::to_string(analytic) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return result;
}

// Reduces an op's output to a scalar through a fixed random projection so
// every output element contributes a distinct weight.
template <class T>
BasicTensor<T> project(const BasicTensor<T>& y, std::uint64_t seed) {
    Rng rng(seed);
    auto w = random_tensor<T>(y.shape(), rng);
    return sum(mul(y, w));
}

// Direct nested-loop cross-correlation, the reference for conv2d.
inline std::vector<double> conv_reference(const Tensor& x, const Tensor& k, int stride, int pad) {
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int co = k.dim(0), ks = k.dim(2);
    const int ho = (h + 2 * pad - ks) / stride + 1, wo = (w + 2 * pad - ks) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(n * co * ho * wo), 0.0);
    for (int b = 0; b < n; ++b)
        for (int o = 0; o < co; ++o)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = 0.0;
                    for (int c = 0; c < ci; ++c)
                        for (int ky = 0; ky < ks; ++ky)
                            for (int kx = 0; kx < ks; ++kx) {
                                const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += double(x.data()[((b * ci + c) * h + iy) * w + ix]) *
                                       double(k.data()[((o * ci + c) * ks + ky) * ks + kx]);
                            }
                    out[((b * co + o) * ho + oy) * wo + ox] = acc;
                }
    return out;
}

} // namespace hye::testing
