#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "hye/tensor.hpp"

// Differentiable tensor operations. Every op computes its forward value
// eagerly and, when an input is on the tape, records a closure that maps the
// output gradient back onto its inputs.
namespace hye {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

inline bool is_prefix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.begin());
}

// Operand `x` broadcast against `out`: equal shape, a single element, or a
// leading-dimension prefix of `out`. Returns the repetition factor.
inline std::int64_t broadcast_factor(const Shape& x, const Shape& out) {
    if (x == out) return 1;
    if (numel(x) == 1) return numel(out);
    if (is_prefix(x, out)) return numel(out) / numel(x);
    throw DimensionError("cannot broadcast " + to_string(x) + " against " + to_string(out));
}

// Calls f(i, ia, ib) over the output index space with broadcast indices.
template <class F>
void for_each_broadcast(std::int64_t n, std::int64_t div_a, std::int64_t div_b, F&& f) {
    if (div_a == 1 && div_b == 1) {
        for (std::int64_t i = 0; i < n; ++i) f(i, i, i);
    } else if (div_a == 1) {
        for (std::int64_t j = 0; j < n / div_b; ++j)
            for (std::int64_t r = 0; r < div_b; ++r) f(j * div_b + r, j * div_b + r, j);
    } else {
        for (std::int64_t j = 0; j < n / div_a; ++j)
            for (std::int64_t r = 0; r < div_a; ++r) f(j * div_a + r, j, j * div_a + r);
    }
}

// Elementwise exp through fixed-width packets, so every element takes the same
// code path whatever the buffer's address.
template <class T>
void vexp(const T* src, T* dst, std::int64_t n, T shift = T(0)) {
    constexpr int P = 16;
    using Block = Eigen::Array<T, P, 1>;
    std::int64_t i = 0;
    for (; i + P <= n; i += P)
        Eigen::Map<Block>(dst + i) = (Eigen::Map<const Block>(src + i) - shift).exp();
    if (i < n) {
        Block tail = Block::Zero();
        std::copy(src + i, src + n, tail.data());
        Block e = (tail - shift).exp();
        std::copy(e.data(), e.data() + (n - i), dst + i);
    }
}

} // namespace detail

enum class ElementwiseOp { add, sub, mul, silu };

template <class T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return elementwise(ElementwiseOp::add, a, b);
}
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return elementwise(ElementwiseOp::sub, a, b);
}
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return elementwise(ElementwiseOp::mul, a, b);
}

template <class T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <class T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <class T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
    const auto& xv = x.values();
    const auto n = static_cast<std::int64_t>(xv.size());
    std::vector<T> out(xv.size());
    for (std::int64_t i = 0; i < n; ++i) out[i] = -xv[i];
    detail::vexp(out.data(), out.data(), n);
    for (std::int64_t i = 0; i < n; ++i) out[i] = xv[i] / (T(1) + out[i]);
    return detail::make_result<T>("silu", x.shape(), std::move(out), {&x},
        [x](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            const auto& xv = x.values();
            const auto n = static_cast<std::int64_t>(xv.size());
            std::vector<T> e(xv.size());
            for (std::int64_t i = 0; i < n; ++i) e[i] = -xv[i];
            detail::vexp(e.data(), e.data(), n);
            for (std::int64_t i = 0; i < n; ++i) {
                const T s = T(1) / (T(1) + e[i]);
                (*gx)[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
            }
        });
}

template <class T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (op == ElementwiseOp::silu) return silu(a);
    const Shape out_shape = a.numel() >= b.numel() ? a.shape() : b.shape();
    const std::int64_t da = detail::broadcast_factor(a.shape(), out_shape);
    const std::int64_t db = detail::broadcast_factor(b.shape(), out_shape);
    const std::int64_t n = numel(out_shape);
    const T* av = a.values().data();
    const T* bv = b.values().data();
    std::vector<T> out(static_cast<std::size_t>(n));
    const char* name = "add";
    switch (op) {
    case ElementwiseOp::add:
        detail::for_each_broadcast(n, da, db, [&](auto i, auto ia, auto ib) { out[i] = av[ia] + bv[ib]; });
        break;
    case ElementwiseOp::sub:
        name = "sub";
        detail::for_each_broadcast(n, da, db, [&](auto i, auto ia, auto ib) { out[i] = av[ia] - bv[ib]; });
        break;
    case ElementwiseOp::mul:
        name = "mul";
        detail::for_each_broadcast(n, da, db, [&](auto i, auto ia, auto ib) { out[i] = av[ia] * bv[ib]; });
        break;
    default:
        break;
    }
    return detail::make_result<T>(name, out_shape, std::move(out), {&a, &b},
        [a, b, op, n, da, db](const std::vector<T>& g) {
            auto* ga = detail::sink(a);
            auto* gb = detail::sink(b);
            const T* av = a.values().data();
            const T* bv = b.values().data();
            detail::for_each_broadcast(n, da, db, [&](auto i, auto ia, auto ib) {
                switch (op) {
                case ElementwiseOp::add:
                    if (ga) (*ga)[ia] += g[i];
                    if (gb) (*gb)[ib] += g[i];
                    break;
                case ElementwiseOp::sub:
                    if (ga) (*ga)[ia] += g[i];
                    if (gb) (*gb)[ib] -= g[i];
                    break;
                case ElementwiseOp::mul:
                    if (ga) (*ga)[ia] += g[i] * bv[ib];
                    if (gb) (*gb)[ib] += g[i] * av[ia];
                    break;
                default:
                    break;
                }
            });
        });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
    std::vector<T> out(x.values());
    for (auto& v : out) v *= factor;
    return detail::make_result<T>("scale", x.shape(), std::move(out), {&x},
        [x, factor](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * factor;
        });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value) {
    std::vector<T> out(x.values());
    for (auto& v : out) v += value;
    return detail::make_result<T>("add_scalar", x.shape(), std::move(out), {&x},
        [x](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        });
}

template <class T>
BasicTensor<T> square(const BasicTensor<T>& x) { return mul(x, x); }

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    T acc = T(0);
    for (const T& v : x.values()) acc += v;
    return detail::make_result<T>("sum", Shape{1}, std::vector<T>{acc}, {&x},
        [x](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (auto& v : *gx) v += g[0];
        });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    T acc = T(0);
    for (const T& v : x.values()) acc += v;
    return detail::make_result<T>("mean", Shape{1}, std::vector<T>{acc * inv}, {&x},
        [x, inv](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (auto& v : *gx) v += g[0] * inv;
        });
}

// Mean over every axis but the first: [N, ...] -> [N].
template <class T>
BasicTensor<T> mean_per_sample(const BasicTensor<T>& x) {
    const std::int64_t n = x.dim(0);
    const std::int64_t m = x.numel() / n;
    const T inv = T(1) / static_cast<T>(m);
    std::vector<T> out(static_cast<std::size_t>(n), T(0));
    const auto& xv = x.values();
    for (std::int64_t i = 0; i < n; ++i) {
        T acc = T(0);
        for (std::int64_t j = 0; j < m; ++j) acc += xv[i * m + j];
        out[i] = acc * inv;
    }
    return detail::make_result<T>("mean_per_sample", Shape{n}, std::move(out), {&x},
        [x, n, m, inv](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < m; ++j) (*gx)[i * m + j] += g[i] * inv;
        });
}

// Mean over trailing spatial axes: [N, C, ...] -> [N, C].
template <class T>
BasicTensor<T> mean_spatial(const BasicTensor<T>& x) {
    if (x.ndim() < 3) throw DimensionError("mean_spatial expects [N, C, ...], got " + to_string(x.shape()));
    const std::int64_t nc = x.dim(0) * x.dim(1);
    const std::int64_t s = x.numel() / nc;
    const T inv = T(1) / static_cast<T>(s);
    std::vector<T> out(static_cast<std::size_t>(nc), T(0));
    const auto& xv = x.values();
    for (std::int64_t i = 0; i < nc; ++i) {
        T acc = T(0);
        for (std::int64_t j = 0; j < s; ++j) acc += xv[i * s + j];
        out[i] = acc * inv;
    }
    return detail::make_result<T>("mean_spatial", Shape{x.dim(0), x.dim(1)}, std::move(out), {&x},
        [x, nc, s, inv](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (std::int64_t i = 0; i < nc; ++i)
                for (std::int64_t j = 0; j < s; ++j) (*gx)[i * s + j] += g[i] * inv;
        });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel())
        throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
    return detail::make_result<T>("reshape", std::move(shape), x.values(), {&x},
        [x](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        });
}

// Swaps the last two axes: [..., M, N] -> [..., N, M].
template <class T>
BasicTensor<T> transpose_last2(const BasicTensor<T>& x) {
    if (x.ndim() < 2) throw DimensionError("transpose_last2 needs at least 2 axes");
    Shape shape = x.shape();
    const std::int64_t m = shape[shape.size() - 2];
    const std::int64_t n = shape[shape.size() - 1];
    const std::int64_t batch = x.numel() / (m * n);
    std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
    std::vector<T> out(x.values().size());
    const auto& xv = x.values();
    for (std::int64_t b = 0; b < batch; ++b) {
        detail::CMapRM<T> src(xv.data() + b * m * n, m, n);
        detail::MapRM<T> dst(out.data() + b * m * n, n, m);
        dst = src.transpose();
    }
    return detail::make_result<T>("transpose", std::move(shape), std::move(out), {&x},
        [x, batch, m, n](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (std::int64_t b = 0; b < batch; ++b) {
                detail::CMapRM<T> gsrc(g.data() + b * m * n, n, m);
                detail::MapRM<T> dst(gx->data() + b * m * n, m, n);
                dst += gsrc.transpose();
            }
        });
}

// Concatenates along axis 1: [N, Ca, ...] ++ [N, Cb, ...] -> [N, Ca+Cb, ...].
template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.ndim() != b.ndim() || a.ndim() < 2 || a.dim(0) != b.dim(0) ||
        !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2))
        throw DimensionError("concat_channels shape mismatch " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    const std::int64_t n = a.dim(0);
    const std::int64_t sa = a.numel() / n;
    const std::int64_t sb = b.numel() / n;
    Shape shape = a.shape();
    shape[1] += b.dim(1);
    std::vector<T> out(static_cast<std::size_t>(n * (sa + sb)));
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(a.values().data() + i * sa, sa, out.data() + i * (sa + sb));
        std::copy_n(b.values().data() + i * sb, sb, out.data() + i * (sa + sb) + sa);
    }
    return detail::make_result<T>("concat", std::move(shape), std::move(out), {&a, &b},
        [a, b, n, sa, sb](const std::vector<T>& g) {
            auto* ga = detail::sink(a);
            auto* gb = detail::sink(b);
            for (std::int64_t i = 0; i < n; ++i) {
                const T* src = g.data() + i * (sa + sb);
                if (ga)
                    for (std::int64_t j = 0; j < sa; ++j) (*ga)[i * sa + j] += src[j];
                if (gb)
                    for (std::int64_t j = 0; j < sb; ++j) (*gb)[i * sb + j] += src[sa + j];
            }
        });
}

template <class T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x) {
    if (x.ndim() != 4) throw DimensionError("upsample expects [N, C, H, W]");
    const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<T> out(static_cast<std::size_t>(planes * 4 * h * w));
    const auto& xv = x.values();
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < 2 * h; ++y)
            for (std::int64_t xx = 0; xx < 2 * w; ++xx)
                out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
    return detail::make_result<T>("upsample", Shape{x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {&x},
        [x, planes, h, w](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (std::int64_t p = 0; p < planes; ++p)
                for (std::int64_t y = 0; y < 2 * h; ++y)
                    for (std::int64_t xx = 0; xx < 2 * w; ++xx)
                        (*gx)[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
        });
}

// Softmax over the last axis.
template <class T>
BasicTensor<T> softmax_last(const BasicTensor<T>& x) {
    const std::int64_t n = x.shape().back();
    const std::int64_t rows = x.numel() / n;
    std::vector<T> out(x.values().size());
    const auto& xv = x.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* src = xv.data() + r * n;
        T* dst = out.data() + r * n;
        detail::vexp(src, dst, n, *std::max_element(src, src + n));
        T total = T(0);
        for (std::int64_t j = 0; j < n; ++j) total += dst[j];
        for (std::int64_t j = 0; j < n; ++j) dst[j] /= total;
    }
    auto y = std::make_shared<std::vector<T>>(out);
    return detail::make_result<T>("softmax", x.shape(), std::move(out), {&x},
        [x, y, rows, n](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* yr = y->data() + r * n;
                const T* gr = g.data() + r * n;
                T dot = T(0);
                for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                for (std::int64_t j = 0; j < n; ++j) (*gx)[r * n + j] += yr[j] * (gr[j] - dot);
            }
        });
}

// Batched matrix product: [B, M, K] x [B, K, N] -> [B, M, N].
template <class T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimensionError("bmm shape mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<T> out(static_cast<std::size_t>(batch * m * n));
    for (std::int64_t i = 0; i < batch; ++i) {
        detail::CMapRM<T> am(a.values().data() + i * m * k, m, k);
        detail::CMapRM<T> bm(b.values().data() + i * k * n, k, n);
        detail::MapRM<T> om(out.data() + i * m * n, m, n);
        om.noalias() = am * bm;
    }
    return detail::make_result<T>("bmm", Shape{batch, m, n}, std::move(out), {&a, &b},
        [a, b, batch, m, k, n](const std::vector<T>& g) {
            auto* ga = detail::sink(a);
            auto* gb = detail::sink(b);
            for (std::int64_t i = 0; i < batch; ++i) {
                detail::CMapRM<T> gm(g.data() + i * m * n, m, n);
                if (ga) {
                    detail::CMapRM<T> bm(b.values().data() + i * k * n, k, n);
                    detail::MapRM<T>(ga->data() + i * m * k, m, k).noalias() += gm * bm.transpose();
                }
                if (gb) {
                    detail::CMapRM<T> am(a.values().data() + i * m * k, m, k);
                    detail::MapRM<T>(gb->data() + i * k * n, k, n).noalias() += am.transpose() * gm;
                }
            }
        });
}

/// Fully connected layer: out[n, j] = sum_i input[n, i] * weight[j, i] + bias[j].
///
/// Leading axes of `input` are flattened, so [B, S, d_in] works as well as
/// [N, d_in]. `bias` may be an undefined tensor.
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias = {}) {
    if (weight.ndim() != 2 || input.shape().back() != weight.dim(1))
        throw DimensionError("linear: input " + to_string(input.shape()) + " incompatible with weight " +
                             to_string(weight.shape()));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0)))
        throw DimensionError("linear: bias shape " + to_string(bias.shape()));
    const std::int64_t din = weight.dim(1), dout = weight.dim(0);
    const std::int64_t rows = input.numel() / din;
    std::vector<T> out(static_cast<std::size_t>(rows * dout));
    detail::CMapRM<T> x(input.values().data(), rows, din);
    detail::CMapRM<T> w(weight.values().data(), dout, din);
    detail::MapRM<T> o(out.data(), rows, dout);
    o.noalias() = x * w.transpose();
    if (bias.defined())
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < dout; ++j) o(r, j) += bias[j];
    Shape shape = input.shape();
    shape.back() = dout;
    return detail::make_result<T>("linear", std::move(shape), std::move(out), {&input, &weight, &bias},
        [input, weight, bias, rows, din, dout](const std::vector<T>& g) {
            detail::CMapRM<T> gm(g.data(), rows, dout);
            if (auto* gx = detail::sink(input)) {
                detail::CMapRM<T> w(weight.values().data(), dout, din);
                detail::MapRM<T>(gx->data(), rows, din).noalias() += gm * w;
            }
            if (auto* gw = detail::sink(weight)) {
                detail::CMapRM<T> x(input.values().data(), rows, din);
                detail::MapRM<T>(gw->data(), dout, din).noalias() += gm.transpose() * x;
            }
            if (auto* gb = detail::sink(bias))
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < dout; ++j) (*gb)[j] += gm(r, j);
        });
}

namespace detail {

struct ConvGeometry {
    std::int64_t n, c, h, w, k, stride, pad, ho, wo;
    std::int64_t patch() const { return ho * wo; }
    std::int64_t cols() const { return n * ho * wo; }
    std::int64_t rows() const { return c * k * k; }
};

// Per-thread reusable buffers for the im2col matrices; contents are
// overwritten by every user.
template <class T>
std::vector<T>& scratch(int slot, std::int64_t size) {
    thread_local std::vector<T> buffers[2];
    auto& b = buffers[slot];
    if (static_cast<std::int64_t>(b.size()) < size) b.resize(static_cast<std::size_t>(size));
    return b;
}

// Output columns ox whose input column ox*s - p + kj lies inside [0, w).
inline std::pair<std::int64_t, std::int64_t> valid_span(std::int64_t kj, const ConvGeometry& g) {
    const std::int64_t lo_num = g.pad - kj;
    std::int64_t lo = lo_num <= 0 ? 0 : (lo_num + g.stride - 1) / g.stride;
    const std::int64_t hi_num = g.w - 1 + g.pad - kj;
    std::int64_t hi = hi_num < 0 ? -1 : std::min(g.wo - 1, hi_num / g.stride);
    return {std::min(lo, g.wo), std::max(hi + 1, std::min(lo, g.wo))};
}

// cols[(c*k + ki)*k + kj, n*P + oy*Wo + ox] = x[n, c, oy*s - p + ki, ox*s - p + kj]
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const std::int64_t np = g.cols(), p = g.patch();
    for (std::int64_t c = 0; c < g.c; ++c)
        for (std::int64_t ki = 0; ki < g.k; ++ki)
            for (std::int64_t kj = 0; kj < g.k; ++kj) {
                T* row = cols + ((c * g.k + ki) * g.k + kj) * np;
                const auto [lo, hi] = valid_span(kj, g);
                for (std::int64_t n = 0; n < g.n; ++n) {
                    const T* src = x + (n * g.c + c) * g.h * g.w;
                    T* dst = row + n * p;
                    for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                        const std::int64_t iy = oy * g.stride - g.pad + ki;
                        T* d = dst + oy * g.wo;
                        if (iy < 0 || iy >= g.h) {
                            std::fill_n(d, g.wo, T(0));
                            continue;
                        }
                        const T* s = src + iy * g.w;
                        const std::int64_t off = kj - g.pad;
                        std::fill_n(d, lo, T(0));
                        if (g.stride == 1) {
                            std::copy(s + (lo + off), s + (hi + off), d + lo);
                        } else {
                            for (std::int64_t ox = lo; ox < hi; ++ox) d[ox] = s[ox * g.stride + off];
                        }
                        std::fill(d + hi, d + g.wo, T(0));
                    }
                }
            }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* x) {
    const std::int64_t np = g.cols(), p = g.patch();
    for (std::int64_t c = 0; c < g.c; ++c)
        for (std::int64_t ki = 0; ki < g.k; ++ki)
            for (std::int64_t kj = 0; kj < g.k; ++kj) {
                const T* row = cols + ((c * g.k + ki) * g.k + kj) * np;
                const auto [lo, hi] = valid_span(kj, g);
                for (std::int64_t n = 0; n < g.n; ++n) {
                    T* dst = x + (n * g.c + c) * g.h * g.w;
                    const T* src = row + n * p;
                    for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                        const std::int64_t iy = oy * g.stride - g.pad + ki;
                        if (iy < 0 || iy >= g.h) continue;
                        T* d = dst + iy * g.w;
                        const T* s = src + oy * g.wo;
                        const std::int64_t off = kj - g.pad;
                        if (g.stride == 1) {
                            for (std::int64_t ox = lo; ox < hi; ++ox) d[ox + off] += s[ox];
                        } else {
                            for (std::int64_t ox = lo; ox < hi; ++ox) d[ox * g.stride + off] += s[ox];
                        }
                    }
                }
            }
}

// Unit-stride convolution without an im2col matrix. Each sample is zero
// padded to [C, Hp*Wp] (plus k spare entries) and the output is built in a
// "wide" [C_out, Ho*Wp] layout as a sum of k*k GEMMs against shifted views;
// the last Wp - Wo columns of every wide row are discarded.
struct WideGeometry {
    std::int64_t hp, wp, span, padded;
    explicit WideGeometry(const ConvGeometry& g)
        : hp(g.h + 2 * g.pad), wp(g.w + 2 * g.pad), span(g.ho * (g.w + 2 * g.pad)),
          padded((g.h + 2 * g.pad) * (g.w + 2 * g.pad) + g.k) {}
};

template <class T>
void pad_sample(const T* x, const ConvGeometry& g, const WideGeometry& wg, T* xp) {
    std::fill_n(xp, g.c * wg.padded, T(0));
    for (std::int64_t c = 0; c < g.c; ++c)
        for (std::int64_t y = 0; y < g.h; ++y)
            std::copy_n(x + (c * g.h + y) * g.w, g.w, xp + c * wg.padded + (y + g.pad) * wg.wp + g.pad);
}

// Kernel [C_out, C_in, k, k] -> k*k contiguous [C_out, C_in] taps.
template <class T>
std::vector<T> split_taps(const std::vector<T>& kernel, std::int64_t cout, std::int64_t cin, std::int64_t k) {
    std::vector<T> taps(kernel.size());
    const std::int64_t kk = k * k;
    for (std::int64_t o = 0; o < cout; ++o)
        for (std::int64_t i = 0; i < cin; ++i)
            for (std::int64_t t = 0; t < kk; ++t) taps[(t * cout + o) * cin + i] = kernel[(o * cin + i) * kk + t];
    return taps;
}

template <class T>
using StridedMap = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedMap = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;

template <class T>
BasicTensor<T> conv2d_unit_stride(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                  const BasicTensor<T>& bias, const ConvGeometry& geo) {
    const std::int64_t cout = kernel.dim(0), cin = geo.c, k = geo.k, p = geo.patch();
    const WideGeometry wg(geo);
    const auto taps = split_taps(kernel.values(), cout, cin, k);
    auto& xp = scratch<T>(0, cin * wg.padded);
    auto& wide = scratch<T>(1, cout * wg.span);
    std::vector<T> out(static_cast<std::size_t>(geo.n * cout * p));
    for (std::int64_t n = 0; n < geo.n; ++n) {
        pad_sample(input.values().data() + n * cin * geo.h * geo.w, geo, wg, xp.data());
        MapRM<T> wm(wide.data(), cout, wg.span);
        wm.setZero();
        for (std::int64_t ki = 0; ki < k; ++ki)
            for (std::int64_t kj = 0; kj < k; ++kj) {
                CMapRM<T> tap(taps.data() + (ki * k + kj) * cout * cin, cout, cin);
                CStridedMap<T> view(xp.data() + ki * wg.wp + kj, cin, wg.span, Eigen::OuterStride<>(wg.padded));
                wm.noalias() += tap * view;
            }
        for (std::int64_t o = 0; o < cout; ++o) {
            const T b = bias.defined() ? bias[o] : T(0);
            T* dst = out.data() + (n * cout + o) * p;
            for (std::int64_t y = 0; y < geo.ho; ++y) {
                const T* src = wide.data() + o * wg.span + y * wg.wp;
                for (std::int64_t x = 0; x < geo.wo; ++x) dst[y * geo.wo + x] = src[x] + b;
            }
        }
    }

    return make_result<T>("conv2d", Shape{geo.n, cout, geo.ho, geo.wo}, std::move(out), {&input, &kernel, &bias},
        [input, kernel, bias, geo, cout](const std::vector<T>& g) {
            const std::int64_t cin = geo.c, k = geo.k, p = geo.patch();
            const WideGeometry wg(geo);
            if (auto* gb = sink(bias))
                for (std::int64_t n = 0; n < geo.n; ++n)
                    for (std::int64_t o = 0; o < cout; ++o)
                        for (std::int64_t i = 0; i < p; ++i) (*gb)[o] += g[(n * cout + o) * p + i];
            auto* gw = sink(kernel);
            auto* gx = sink(input);
            if (!gw && !gx) return;
            const auto taps = split_taps(kernel.values(), cout, cin, k);
            std::vector<T> tap_grads(gw ? taps.size() : 0, T(0));
            auto& xp = scratch<T>(0, cin * wg.padded);
            auto& wide = scratch<T>(1, cout * wg.span);
            std::vector<T> dxp(gx ? static_cast<std::size_t>(cin * wg.padded) : 0);
            for (std::int64_t n = 0; n < geo.n; ++n) {
                // Output gradient in the wide layout, zero in the discarded columns.
                std::fill_n(wide.data(), cout * wg.span, T(0));
                for (std::int64_t o = 0; o < cout; ++o)
                    for (std::int64_t y = 0; y < geo.ho; ++y)
                        std::copy_n(g.data() + (n * cout + o) * p + y * geo.wo, geo.wo,
                                    wide.data() + o * wg.span + y * wg.wp);
                CMapRM<T> gm(wide.data(), cout, wg.span);
                if (gw) pad_sample(input.values().data() + n * cin * geo.h * geo.w, geo, wg, xp.data());
                if (gx) std::fill(dxp.begin(), dxp.end(), T(0));
                for (std::int64_t ki = 0; ki < k; ++ki)
                    for (std::int64_t kj = 0; kj < k; ++kj) {
                        const std::int64_t t = ki * k + kj, off = ki * wg.wp + kj;
                        if (gw) {
                            CStridedMap<T> view(xp.data() + off, cin, wg.span, Eigen::OuterStride<>(wg.padded));
                            MapRM<T>(tap_grads.data() + t * cout * cin, cout, cin).noalias() += gm * view.transpose();
                        }
                        if (gx) {
                            CMapRM<T> tap(taps.data() + t * cout * cin, cout, cin);
                            StridedMap<T> view(dxp.data() + off, cin, wg.span, Eigen::OuterStride<>(wg.padded));
                            view.noalias() += tap.transpose() * gm;
                        }
                    }
                if (gx) {
                    T* dst = gx->data() + n * cin * geo.h * geo.w;
                    for (std::int64_t c = 0; c < cin; ++c)
                        for (std::int64_t y = 0; y < geo.h; ++y) {
                            const T* src = dxp.data() + c * wg.padded + (y + geo.pad) * wg.wp + geo.pad;
                            T* d = dst + (c * geo.h + y) * geo.w;
                            for (std::int64_t x = 0; x < geo.w; ++x) d[x] += src[x];
                        }
                }
            }
            if (gw) {
                const std::int64_t kk = k * k;
                for (std::int64_t o = 0; o < cout; ++o)
                    for (std::int64_t i = 0; i < cin; ++i)
                        for (std::int64_t t = 0; t < kk; ++t)
                            (*gw)[(o * cin + i) * kk + t] += tap_grads[(t * cout + o) * cin + i];
            }
        });
}

} // namespace detail

/// 2-D cross-correlation over NCHW input with an [C_out, C_in, k, k] kernel.
/// `bias` ([C_out]) is optional.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::int64_t stride, std::int64_t padding) {
    if (input.ndim() != 4 || kernel.ndim() != 4)
        throw DimensionError("conv2d expects 4-D input and kernel");
    if (kernel.dim(1) != input.dim(1))
        throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                             " input channels, got " + std::to_string(input.dim(1)));
    if (kernel.dim(2) != kernel.dim(3)) throw DimensionError("conv2d: kernel must be square");
    if (stride < 1) throw UsageError("conv2d: stride must be >= 1");
    if (padding < 0) throw UsageError("conv2d: padding must be >= 0");
    const std::int64_t k = kernel.dim(2);
    if (k > input.dim(2) + 2 * padding || k > input.dim(3) + 2 * padding)
        throw DimensionError("conv2d: kernel larger than padded input");
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != kernel.dim(0)))
        throw DimensionError("conv2d: bias must have one entry per output channel");

    detail::ConvGeometry geo{input.dim(0), input.dim(1), input.dim(2), input.dim(3), k, stride, padding,
                             (input.dim(2) + 2 * padding - k) / stride + 1,
                             (input.dim(3) + 2 * padding - k) / stride + 1};
    if (stride == 1) return detail::conv2d_unit_stride(input, kernel, bias, geo);
    const std::int64_t cout = kernel.dim(0), p = geo.patch(), rows = geo.rows();
    auto& cols = detail::scratch<T>(0, rows * geo.cols());
    detail::im2col(input.values().data(), geo, cols.data());
    detail::CMapRM<T> wm(kernel.values().data(), cout, rows);
    detail::CMapRM<T> cm(cols.data(), rows, geo.cols());
    std::vector<T> out(static_cast<std::size_t>(geo.n * cout * p));
    for (std::int64_t n = 0; n < geo.n; ++n) {
        detail::MapRM<T> om(out.data() + n * cout * p, cout, p);
        om.noalias() = wm * cm.middleCols(n * p, p);
        if (bias.defined())
            for (std::int64_t o = 0; o < cout; ++o) om.row(o).array() += bias[o];
    }

    return detail::make_result<T>("conv2d", Shape{geo.n, cout, geo.ho, geo.wo}, std::move(out),
        {&input, &kernel, &bias},
        [input, kernel, bias, geo, cout](const std::vector<T>& g) {
            const std::int64_t p = geo.patch(), rows = geo.rows();
            auto grad_block = [&](std::int64_t n) { return detail::CMapRM<T>(g.data() + n * cout * p, cout, p); };
            if (auto* gb = detail::sink(bias))
                for (std::int64_t n = 0; n < geo.n; ++n)
                    for (std::int64_t o = 0; o < cout; ++o)
                        for (std::int64_t i = 0; i < p; ++i) (*gb)[o] += g[(n * cout + o) * p + i];
            if (auto* gw = detail::sink(kernel)) {
                auto& cols = detail::scratch<T>(0, rows * geo.cols());
                detail::im2col(input.values().data(), geo, cols.data());
                detail::CMapRM<T> cm(cols.data(), rows, geo.cols());
                detail::MapRM<T> gwm(gw->data(), cout, rows);
                for (std::int64_t n = 0; n < geo.n; ++n)
                    gwm.noalias() += grad_block(n) * cm.middleCols(n * p, p).transpose();
            }
            if (auto* gx = detail::sink(input)) {
                detail::CMapRM<T> wm(kernel.values().data(), cout, rows);
                auto& dcols = detail::scratch<T>(1, rows * geo.cols());
                detail::MapRM<T> dm(dcols.data(), rows, geo.cols());
                for (std::int64_t n = 0; n < geo.n; ++n)
                    dm.middleCols(n * p, p).noalias() = wm.transpose() * grad_block(n);
                detail::col2im_add(dcols.data(), geo, gx->data());
            }
        });
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::int64_t stride,
                      std::int64_t padding) {
    return conv2d(input, kernel, BasicTensor<T>{}, stride, padding);
}

/// Group normalization over [N, C, ...] followed by a per-channel affine map.
/// Throws NumericError when a group has zero variance and eps is 0.
template <class T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::int64_t groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5)) {
    if (x.ndim() < 2) throw DimensionError("group_norm expects [N, C, ...]");
    const std::int64_t n = x.dim(0), c = x.dim(1);
    if (groups < 1 || c % groups != 0)
        throw DimensionError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                             std::to_string(groups) + " groups");
    if (gamma.numel() != c || beta.numel() != c)
        throw DimensionError("group_norm: affine parameters must have one entry per channel");
    const std::int64_t spatial = x.numel() / (n * c);
    const std::int64_t cg = c / groups;
    const std::int64_t m = cg * spatial;
    const auto& xv = x.values();
    auto xhat = std::make_shared<std::vector<T>>(xv.size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * groups));
    std::vector<T> out(xv.size());
    const T* gm = gamma.values().data();
    const T* bt = beta.values().data();
    for (std::int64_t i = 0; i < n * groups; ++i) {
        const T* src = xv.data() + i * m;
        double mu = 0.0;
        for (std::int64_t j = 0; j < m; ++j) mu += src[j];
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::int64_t j = 0; j < m; ++j) {
            const double d = src[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(m);
        if (var + static_cast<double>(eps) <= 0.0)
            throw NumericError("group_norm: zero-variance group with eps = 0");
        const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        const T mu_t = static_cast<T>(mu);
        (*inv_std)[i] = is;
        const std::int64_t ch0 = (i % groups) * cg;
        for (std::int64_t cc = 0; cc < cg; ++cc) {
            const T ga = gm[ch0 + cc], be = bt[ch0 + cc];
            const std::int64_t base = i * m + cc * spatial;
            T* hx = xhat->data() + base;
            T* o = out.data() + base;
            const T* sx = xv.data() + base;
            for (std::int64_t j = 0; j < spatial; ++j) {
                const T h = (sx[j] - mu_t) * is;
                hx[j] = h;
                o[j] = h * ga + be;
            }
        }
    }
    return detail::make_result<T>("group_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
        [x, gamma, beta, xhat, inv_std, n, groups, cg, spatial, m](const std::vector<T>& g) {
            auto* gx = detail::sink(x);
            auto* gg = detail::sink(gamma);
            auto* gbeta = detail::sink(beta);
            const T* gm = gamma.values().data();
            const T inv_m = T(1) / static_cast<T>(m);
            for (std::int64_t i = 0; i < n * groups; ++i) {
                const std::int64_t ch0 = (i % groups) * cg;
                T sum_d = T(0), sum_dh = T(0);
                for (std::int64_t cc = 0; cc < cg; ++cc) {
                    const std::int64_t base = i * m + cc * spatial;
                    const T* gy = g.data() + base;
                    const T* h = xhat->data() + base;
                    T s_gh = T(0), s_g = T(0);
                    for (std::int64_t j = 0; j < spatial; ++j) {
                        s_gh += gy[j] * h[j];
                        s_g += gy[j];
                    }
                    if (gg) (*gg)[ch0 + cc] += s_gh;
                    if (gbeta) (*gbeta)[ch0 + cc] += s_g;
                    sum_d += s_g * gm[ch0 + cc];
                    sum_dh += s_gh * gm[ch0 + cc];
                }
                if (!gx) continue;
                const T is = (*inv_std)[i];
                for (std::int64_t cc = 0; cc < cg; ++cc) {
                    const std::int64_t base = i * m + cc * spatial;
                    const T* gy = g.data() + base;
                    const T* h = xhat->data() + base;
                    T* dx = gx->data() + base;
                    const T ga = gm[ch0 + cc];
                    for (std::int64_t j = 0; j < spatial; ++j)
                        dx[j] += is * (gy[j] * ga - sum_d * inv_m - h[j] * sum_dh * inv_m);
                }
            }
        });
}

/// Mean softmax cross-entropy of [N, K] logits against integer labels.
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size()))
        throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    const std::int64_t n = logits.dim(0), k = logits.dim(1);
    auto probs = std::make_shared<std::vector<T>>(logits.values().size());
    T loss = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= k) throw IndexError("cross_entropy: label out of range");
        const T* z = logits.values().data() + i * k;
        const T mx = *std::max_element(z, z + k);
        T total = T(0);
        for (std::int64_t j = 0; j < k; ++j) total += ((*probs)[i * k + j] = std::exp(z[j] - mx));
        for (std::int64_t j = 0; j < k; ++j) (*probs)[i * k + j] /= total;
        loss -= z[labels[i]] - mx - std::log(total);
    }
    loss /= static_cast<T>(n);
    return detail::make_result<T>("cross_entropy", Shape{1}, std::vector<T>{loss}, {&logits},
        [logits, labels, probs, n, k](const std::vector<T>& g) {
            auto* gz = detail::sink(logits);
            const T s = g[0] / static_cast<T>(n);
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < k; ++j)
                    (*gz)[i * k + j] += s * ((*probs)[i * k + j] - (j == labels[i] ? T(1) : T(0)));
        });
}

} // namespace hye
