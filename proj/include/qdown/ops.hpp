#pragma once

// Differentiable operator set. Every function records one node on the
// graph that owns its first argument and returns the handle to it.
//
// Layout convention: feature maps are NCHW, convolution weights are
// [out, in, k, k], biases are [out].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "qdown/tensor.hpp"

namespace qdown {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Gradient slot of a parent, or nullptr when the parent is not tracked.
inline double* gslot(Graph& g, std::size_t id)
{
    auto& v = g.grad_of(id);
    return v.empty() ? nullptr : v.data();
}

inline void same_shape(const char* op, const Var& a, const Var& b)
{
    if (a.shape() != b.shape())
        fail(ErrorKind::shape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                   shape_str(b.shape()));
}

inline void need_rank(const char* op, const Var& a, std::size_t r)
{
    if (a.value().rank() != r)
        fail(ErrorKind::shape, std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                   shape_str(a.shape()));
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x)
{
    if (x >= 0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Column matrix for a same-padded, stride-1 convolution, batched along columns:
// row (ci*k + ki)*k + kj, column n*H*W + h*W + w.
inline void im2col(const double* x, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
                   std::size_t k, RowMat& cols)
{
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t HW = H * W;
    cols.resize(static_cast<Eigen::Index>(C * k * k), static_cast<Eigen::Index>(N * HW));
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
                double* row = cols.row(static_cast<Eigen::Index>((c * k + ki) * k + kj)).data();
                const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(ki) - pad;
                const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kj) - pad;
                for (std::size_t n = 0; n < N; ++n) {
                    const double* xc = x + (n * C + c) * HW;
                    double* out = row + n * HW;
                    for (std::size_t h = 0; h < H; ++h) {
                        const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h) + di;
                        double* o = out + h * W;
                        if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H)) {
                            std::fill(o, o + W, 0.0);
                            continue;
                        }
                        const double* xr = xc + static_cast<std::size_t>(sh) * W;
                        for (std::size_t w = 0; w < W; ++w) {
                            const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(w) + dj;
                            o[w] = (sw < 0 || sw >= static_cast<std::ptrdiff_t>(W))
                                       ? 0.0
                                       : xr[static_cast<std::size_t>(sw)];
                        }
                    }
                }
            }
}

inline void col2im_add(const RowMat& cols, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
                       std::size_t k, double* dx)
{
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t HW = H * W;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
                const double* row = cols.row(static_cast<Eigen::Index>((c * k + ki) * k + kj)).data();
                const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(ki) - pad;
                const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kj) - pad;
                for (std::size_t n = 0; n < N; ++n) {
                    double* xc = dx + (n * C + c) * HW;
                    const double* in = row + n * HW;
                    for (std::size_t h = 0; h < H; ++h) {
                        const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h) + di;
                        if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H))
                            continue;
                        double* xr = xc + static_cast<std::size_t>(sh) * W;
                        const double* r = in + h * W;
                        for (std::size_t w = 0; w < W; ++w) {
                            const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(w) + dj;
                            if (sw >= 0 && sw < static_cast<std::ptrdiff_t>(W))
                                xr[static_cast<std::size_t>(sw)] += r[w];
                        }
                    }
                }
            }
}

// Direct same-padded convolution kernels. Used instead of im2col + GEMM when
// there are few output channels and the column matrix would be mostly copying.
struct ConvGeom {
    std::size_t N, C, H, W, Co, k;
};

// Valid output range [lo, hi) along an axis of length n for tap offset d.
inline void tap_range(std::ptrdiff_t d, std::size_t n, std::size_t& lo, std::size_t& hi)
{
    lo = d < 0 ? static_cast<std::size_t>(-d) : 0;
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(n) - std::max<std::ptrdiff_t>(d, 0);
    hi = h > 0 ? static_cast<std::size_t>(h) : 0;
}

using Block2 = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CBlock2 = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Calls f(di, dj, h0, h1, w0, w1) for every kernel tap with a non-empty
// valid output window.
template <class F>
inline void for_each_tap(const ConvGeom& g, F&& f)
{
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.k / 2);
    for (std::size_t ki = 0; ki < g.k; ++ki)
        for (std::size_t kj = 0; kj < g.k; ++kj) {
            const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(ki) - pad;
            const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kj) - pad;
            std::size_t h0, h1, w0, w1;
            tap_range(di, g.H, h0, h1);
            tap_range(dj, g.W, w0, w1);
            if (h1 > h0 && w1 > w0)
                f(ki * g.k + kj, di, dj, h0, h1, w0, w1);
        }
}

inline void direct_conv_forward(const ConvGeom& g, const double* x, const double* w, const double* b, double* out)
{
    const std::size_t HW = g.H * g.W;
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(g.W));
    for (std::size_t n = 0; n < g.N; ++n)
        for (std::size_t co = 0; co < g.Co; ++co) {
            double* o = out + (n * g.Co + co) * HW;
            std::fill(o, o + HW, b[co]);
            for (std::size_t ci = 0; ci < g.C; ++ci) {
                const double* xc = x + (n * g.C + ci) * HW;
                const double* wk = w + (co * g.C + ci) * g.k * g.k;
                for_each_tap(g, [&](std::size_t t, std::ptrdiff_t di, std::ptrdiff_t dj, std::size_t h0,
                                    std::size_t h1, std::size_t w0, std::size_t w1) {
                    const auto rows = static_cast<Eigen::Index>(h1 - h0);
                    const auto cols = static_cast<Eigen::Index>(w1 - w0);
                    const std::ptrdiff_t src = (static_cast<std::ptrdiff_t>(h0) + di) * static_cast<std::ptrdiff_t>(g.W) +
                                               static_cast<std::ptrdiff_t>(w0) + dj;
                    Block2(o + h0 * g.W + w0, rows, cols, stride) += wk[t] * CBlock2(xc + src, rows, cols, stride);
                });
            }
        }
}

inline void direct_conv_backward(const ConvGeom& g, const double* x, const double* w, const double* go, double* gx,
                                 double* gw)
{
    const std::size_t HW = g.H * g.W;
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(g.W));
    for (std::size_t n = 0; n < g.N; ++n)
        for (std::size_t co = 0; co < g.Co; ++co) {
            const double* gor = go + (n * g.Co + co) * HW;
            for (std::size_t ci = 0; ci < g.C; ++ci) {
                const double* xc = x + (n * g.C + ci) * HW;
                double* gxc = gx ? gx + (n * g.C + ci) * HW : nullptr;
                const double* wk = w + (co * g.C + ci) * g.k * g.k;
                double* gwk = gw ? gw + (co * g.C + ci) * g.k * g.k : nullptr;
                for_each_tap(g, [&](std::size_t t, std::ptrdiff_t di, std::ptrdiff_t dj, std::size_t h0,
                                    std::size_t h1, std::size_t w0, std::size_t w1) {
                    const auto rows = static_cast<Eigen::Index>(h1 - h0);
                    const auto cols = static_cast<Eigen::Index>(w1 - w0);
                    const std::ptrdiff_t src = (static_cast<std::ptrdiff_t>(h0) + di) * static_cast<std::ptrdiff_t>(g.W) +
                                               static_cast<std::ptrdiff_t>(w0) + dj;
                    CBlock2 gblk(gor + h0 * g.W + w0, rows, cols, stride);
                    if (gwk)
                        gwk[t] += gblk.cwiseProduct(CBlock2(xc + src, rows, cols, stride)).sum();
                    if (gxc)
                        Block2(gxc + src, rows, cols, stride) += wk[t] * gblk;
                });
            }
        }
}

// Source taps for half-pixel-centred bilinear upsampling along one axis.
struct Taps {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w1;
};

inline Taps bilinear_taps(std::size_t in, std::size_t factor)
{
    Taps t;
    const std::size_t out = in * factor;
    t.i0.resize(out);
    t.i1.resize(out);
    t.w1.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(std::floor(src));
        const std::size_t hi = std::min(lo + 1, in - 1);
        t.i0[o] = lo;
        t.i1[o] = hi;
        t.w1[o] = src - static_cast<double>(lo);
    }
    return t;
}

} // namespace detail

/// Elementwise map with a caller-supplied derivative df(x, y).
template <class F, class DF>
Var elementwise(Var x, F f, DF df)
{
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i)
        out[i] = f(xv[i]);
    const std::size_t xi = x.id;
    return x.graph->record(std::move(out), {x}, [xi, df](Graph& g, std::size_t self) {
        double* gx = detail::gslot(g, xi);
        if (!gx)
            return;
        const auto& go = g.grad_of(self);
        const Tensor& xv = g.value(xi);
        const Tensor& yv = g.value(self);
        for (std::size_t i = 0; i < go.size(); ++i)
            gx[i] += go[i] * df(xv[i], yv[i]);
    });
}

inline Var add(Var a, Var b)
{
    detail::same_shape("add", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.value()[i] + b.value()[i];
    const std::size_t ai = a.id, bi = b.id;
    return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph& g, std::size_t self) {
        const auto& go = g.grad_of(self);
        for (std::size_t id : {ai, bi})
            if (double* gp = detail::gslot(g, id))
                for (std::size_t i = 0; i < go.size(); ++i)
                    gp[i] += go[i];
    });
}

inline Var sub(Var a, Var b)
{
    detail::same_shape("sub", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.value()[i] - b.value()[i];
    const std::size_t ai = a.id, bi = b.id;
    return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph& g, std::size_t self) {
        const auto& go = g.grad_of(self);
        if (double* ga = detail::gslot(g, ai))
            for (std::size_t i = 0; i < go.size(); ++i)
                ga[i] += go[i];
        if (double* gb = detail::gslot(g, bi))
            for (std::size_t i = 0; i < go.size(); ++i)
                gb[i] -= go[i];
    });
}

inline Var mul(Var a, Var b)
{
    detail::same_shape("mul", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.value()[i] * b.value()[i];
    const std::size_t ai = a.id, bi = b.id;
    return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph& g, std::size_t self) {
        const auto& go = g.grad_of(self);
        const Tensor& av = g.value(ai);
        const Tensor& bv = g.value(bi);
        if (double* ga = detail::gslot(g, ai))
            for (std::size_t i = 0; i < go.size(); ++i)
                ga[i] += go[i] * bv[i];
        if (double* gb = detail::gslot(g, bi))
            for (std::size_t i = 0; i < go.size(); ++i)
                gb[i] += go[i] * av[i];
    });
}

/// Elementwise max; on ties the gradient goes to the second argument.
inline Var maximum(Var a, Var b)
{
    detail::same_shape("maximum", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::max(a.value()[i], b.value()[i]);
    const std::size_t ai = a.id, bi = b.id;
    return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph& g, std::size_t self) {
        const auto& go = g.grad_of(self);
        const Tensor& av = g.value(ai);
        const Tensor& bv = g.value(bi);
        double* ga = detail::gslot(g, ai);
        double* gb = detail::gslot(g, bi);
        for (std::size_t i = 0; i < go.size(); ++i) {
            if (av[i] > bv[i]) {
                if (ga)
                    ga[i] += go[i];
            } else if (gb) {
                gb[i] += go[i];
            }
        }
    });
}

inline Var scale(Var x, double s)
{
    return elementwise(
        x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var x, double s)
{
    return elementwise(
        x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Var softplus(Var x)
{
    return elementwise(
        x, [](double v) { return detail::softplus(v); }, [](double v, double) { return detail::sigmoid(v); });
}

inline Var tanh(Var x)
{
    return elementwise(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var abs(Var x)
{
    return elementwise(
        x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline Var clip(Var x, double lo, double hi)
{
    require(lo <= hi, ErrorKind::config, "clip: lower bound above upper bound");
    return elementwise(
        x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

inline Var sum(Var x)
{
    double s = 0.0;
    for (double v : x.value().values())
        s += v;
    const std::size_t xi = x.id;
    return x.graph->record(Tensor::scalar(s), {x}, [xi](Graph& g, std::size_t self) {
        double* gx = detail::gslot(g, xi);
        const double go = g.grad_of(self)[0];
        for (std::size_t i = 0; i < g.value(xi).size(); ++i)
            gx[i] += go;
    });
}

inline Var mean(Var x)
{
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Per-sample masked mean over all non-batch axes, averaged over the batch.
/// The mask either matches x exactly or matches one sample and is broadcast.
inline Var masked_mean(Var x, const Tensor& mask)
{
    const Tensor& xv = x.value();
    require(xv.rank() >= 2, ErrorKind::shape, "masked_mean: need a batch axis, got " + shape_str(xv.shape()));
    const std::size_t N = xv.dim(0);
    const std::size_t per = xv.size() / N;
    const bool broadcast = mask.size() == per && mask.size() != xv.size();
    require(mask.size() == xv.size() || broadcast, ErrorKind::shape,
            "masked_mean: mask " + shape_str(mask.shape()) + " incompatible with " + shape_str(xv.shape()));
    std::vector<double> inv_count(N);
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        const double* m = mask.data() + (broadcast ? 0 : n * per);
        const double* v = xv.data() + n * per;
        double cnt = 0.0, s = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            cnt += m[i];
            s += m[i] * v[i];
        }
        require(cnt > 0.0, ErrorKind::data, "masked_mean: sample " + std::to_string(n) + " has an empty mask");
        inv_count[n] = 1.0 / cnt;
        total += s * inv_count[n];
    }
    const std::size_t xi = x.id;
    return x.graph->record(Tensor::scalar(total / static_cast<double>(N)), {x},
                           [xi, mask, broadcast, per, N, inv_count](Graph& g, std::size_t self) {
                               double* gx = detail::gslot(g, xi);
                               const double go = g.grad_of(self)[0] / static_cast<double>(N);
                               for (std::size_t n = 0; n < N; ++n) {
                                   const double* m = mask.data() + (broadcast ? 0 : n * per);
                                   for (std::size_t i = 0; i < per; ++i)
                                       gx[n * per + i] += go * m[i] * inv_count[n];
                               }
                           });
}

inline Var matmul(Var a, Var b)
{
    detail::need_rank("matmul", a, 2);
    detail::need_rank("matmul", b, 2);
    const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
    if (b.value().dim(0) != k)
        fail(ErrorKind::shape, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                   shape_str(b.shape()));
    using Map = Eigen::Map<const detail::RowMat>;
    using MutMap = Eigen::Map<detail::RowMat>;
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
               Nn = static_cast<Eigen::Index>(n);
    Tensor out({m, n});
    MutMap(out.data(), M, Nn).noalias() = Map(a.value().data(), M, K) * Map(b.value().data(), K, Nn);
    const std::size_t ai = a.id, bi = b.id;
    return a.graph->record(std::move(out), {a, b}, [ai, bi, M, K, Nn](Graph& g, std::size_t self) {
        Map go(g.grad_of(self).data(), M, Nn);
        if (double* ga = detail::gslot(g, ai))
            MutMap(ga, M, K).noalias() += go * Map(g.value(bi).data(), K, Nn).transpose();
        if (double* gb = detail::gslot(g, bi))
            MutMap(gb, K, Nn).noalias() += Map(g.value(ai).data(), M, K).transpose() * go;
    });
}

/// Stride-1 convolution with zero same-padding; odd square kernels only.
inline Var conv2d(Var x, Var w, Var b)
{
    detail::need_rank("conv2d", x, 4);
    detail::need_rank("conv2d", w, 4);
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t Co = ws[0], k = ws[2];
    if (ws[1] != C || ws[3] != k || k % 2 == 0)
        fail(ErrorKind::shape, "conv2d: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
    if (b.value().size() != Co)
        fail(ErrorKind::shape, "conv2d: bias " + shape_str(b.shape()) + " for " + std::to_string(Co) +
                                   " output channels");
    const std::size_t HW = H * W;
    const auto rows = static_cast<Eigen::Index>(C * k * k);
    const auto cols_n = static_cast<Eigen::Index>(N * HW);
    const auto Co_i = static_cast<Eigen::Index>(Co);
    const std::size_t xi = x.id, wi = w.id, bi = b.id;

    if (Co <= 8) {
        const detail::ConvGeom geom{N, C, H, W, Co, k};
        Tensor out({N, Co, H, W});
        detail::direct_conv_forward(geom, x.value().data(), w.value().data(), b.value().data(), out.data());
        return x.graph->record(std::move(out), {x, w, b}, [=](Graph& g, std::size_t self) {
            const auto& go = g.grad_of(self);
            if (double* gb = detail::gslot(g, bi))
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t co = 0; co < Co; ++co)
                        for (std::size_t p = 0; p < HW; ++p)
                            gb[co] += go[(n * Co + co) * HW + p];
            double* gw = detail::gslot(g, wi);
            double* gx = detail::gslot(g, xi);
            if (gw || gx)
                detail::direct_conv_backward(geom, g.value(xi).data(), g.value(wi).data(), go.data(), gx, gw);
        });
    }

    detail::RowMat cols;
    detail::im2col(x.value().data(), N, C, H, W, k, cols);
    Eigen::Map<const detail::RowMat> wm(w.value().data(), Co_i, rows);
    detail::RowMat res = wm * cols;

    Tensor out({N, Co, H, W});
    const double* bias = b.value().data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co) {
            const double* src = res.row(static_cast<Eigen::Index>(co)).data() + n * HW;
            double* dst = out.data() + (n * Co + co) * HW;
            for (std::size_t p = 0; p < HW; ++p)
                dst[p] = src[p] + bias[co];
        }

    return x.graph->record(std::move(out), {x, w, b},
                           [=](Graph& g, std::size_t self) {
                               const auto& go = g.grad_of(self);
                               detail::RowMat gr(Co_i, cols_n);
                               for (std::size_t n = 0; n < N; ++n)
                                   for (std::size_t co = 0; co < Co; ++co)
                                       std::memcpy(gr.row(static_cast<Eigen::Index>(co)).data() + n * HW,
                                                   go.data() + (n * Co + co) * HW, HW * sizeof(double));
                               if (double* gb = detail::gslot(g, bi))
                                   for (std::size_t co = 0; co < Co; ++co)
                                       gb[co] += gr.row(static_cast<Eigen::Index>(co)).sum();
                               double* gw = detail::gslot(g, wi);
                               double* gx = detail::gslot(g, xi);
                               if (!gw && !gx)
                                   return;
                               detail::RowMat cols;
                               detail::im2col(g.value(xi).data(), N, C, H, W, k, cols);
                               if (gw)
                                   Eigen::Map<detail::RowMat>(gw, Co_i, rows).noalias() += gr * cols.transpose();
                               if (gx) {
                                   Eigen::Map<const detail::RowMat> wm(g.value(wi).data(), Co_i, rows);
                                   cols.noalias() = wm.transpose() * gr;
                                   detail::col2im_add(cols, N, C, H, W, k, gx);
                               }
                           });
}

/// Parametric rectifier with one learnable negative slope per channel.
inline Var prelu(Var x, Var alpha)
{
    const Tensor& xv = x.value();
    require(xv.rank() >= 2, ErrorKind::shape, "prelu: need NC... input, got " + shape_str(xv.shape()));
    const std::size_t N = xv.dim(0), C = xv.dim(1);
    if (alpha.value().size() != C)
        fail(ErrorKind::shape, "prelu: slope " + shape_str(alpha.shape()) + " for input " + shape_str(xv.shape()));
    const std::size_t inner = xv.size() / (N * C);
    Tensor out(xv.shape());
    const double* a = alpha.value().data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                const double v = xv[off + i];
                out[off + i] = v > 0 ? v : a[c] * v;
            }
        }
    const std::size_t xi = x.id, ai = alpha.id;
    return x.graph->record(std::move(out), {x, alpha}, [=](Graph& g, std::size_t self) {
        const auto& go = g.grad_of(self);
        const Tensor& xv = g.value(xi);
        const double* a = g.value(ai).data();
        double* gx = detail::gslot(g, xi);
        double* ga = detail::gslot(g, ai);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t off = (n * C + c) * inner;
                double acc = 0.0;
                for (std::size_t i = 0; i < inner; ++i) {
                    const double v = xv[off + i];
                    if (v > 0) {
                        if (gx)
                            gx[off + i] += go[off + i];
                    } else {
                        if (gx)
                            gx[off + i] += go[off + i] * a[c];
                        acc += go[off + i] * v;
                    }
                }
                if (ga)
                    ga[c] += acc;
            }
    });
}

/// Bilinear upsampling of an NCHW map by integer row/column factors
/// (half-pixel centres, edge clamped).
inline Var upsample_bilinear(Var x, std::size_t fr, std::size_t fc)
{
    detail::need_rank("upsample_bilinear", x, 4);
    require(fr >= 1 && fc >= 1, ErrorKind::config, "upsample_bilinear: factors must be >= 1");
    const Shape& s = x.shape();
    const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
    const std::size_t Ho = H * fr, Wo = W * fc;
    auto tr = detail::bilinear_taps(H, fr);
    auto tc = detail::bilinear_taps(W, fc);
    Tensor out({N, C, Ho, Wo});
    const Tensor& xv = x.value();
    for (std::size_t p = 0; p < N * C; ++p) {
        const double* src = xv.data() + p * H * W;
        double* dst = out.data() + p * Ho * Wo;
        for (std::size_t i = 0; i < Ho; ++i) {
            const double* r0 = src + tr.i0[i] * W;
            const double* r1 = src + tr.i1[i] * W;
            const double a = tr.w1[i];
            for (std::size_t j = 0; j < Wo; ++j) {
                const double b = tc.w1[j];
                const double top = (1 - b) * r0[tc.i0[j]] + b * r0[tc.i1[j]];
                const double bot = (1 - b) * r1[tc.i0[j]] + b * r1[tc.i1[j]];
                dst[i * Wo + j] = (1 - a) * top + a * bot;
            }
        }
    }
    const std::size_t xi = x.id;
    return x.graph->record(std::move(out), {x}, [=](Graph& g, std::size_t self) {
        double* gx = detail::gslot(g, xi);
        const auto& go = g.grad_of(self);
        for (std::size_t p = 0; p < N * C; ++p) {
            double* dsrc = gx + p * H * W;
            const double* gd = go.data() + p * Ho * Wo;
            for (std::size_t i = 0; i < Ho; ++i) {
                const double a = tr.w1[i];
                for (std::size_t j = 0; j < Wo; ++j) {
                    const double b = tc.w1[j];
                    const double v = gd[i * Wo + j];
                    dsrc[tr.i0[i] * W + tc.i0[j]] += (1 - a) * (1 - b) * v;
                    dsrc[tr.i0[i] * W + tc.i1[j]] += (1 - a) * b * v;
                    dsrc[tr.i1[i] * W + tc.i0[j]] += a * (1 - b) * v;
                    dsrc[tr.i1[i] * W + tc.i1[j]] += a * b * v;
                }
            }
        }
    });
}

namespace detail {

// Index map for the channel-to-space rearrangement: entry i of the output
// (shape [N, C, H*fr, W*fc]) reads entry map[i] of the input
// (shape [N, C*fr*fc, H, W]).
inline std::vector<std::size_t> shuffle_map(std::size_t N, std::size_t C, std::size_t H, std::size_t W,
                                            std::size_t fr, std::size_t fc)
{
    const std::size_t Ho = H * fr, Wo = W * fc;
    std::vector<std::size_t> m(N * C * Ho * Wo);
    std::size_t i = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ho = 0; ho < Ho; ++ho)
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    const std::size_t ci = c * fr * fc + (ho % fr) * fc + (wo % fc);
                    m[i++] = ((n * C * fr * fc + ci) * H + ho / fr) * W + wo / fc;
                }
    return m;
}

inline Var gather(Var x, Shape out_shape, std::vector<std::size_t> map)
{
    Tensor out(std::move(out_shape));
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < map.size(); ++i)
        out[i] = xv[map[i]];
    const std::size_t xi = x.id;
    return x.graph->record(std::move(out), {x}, [xi, map = std::move(map)](Graph& g, std::size_t self) {
        double* gx = gslot(g, xi);
        const auto& go = g.grad_of(self);
        for (std::size_t i = 0; i < map.size(); ++i)
            gx[map[i]] += go[i];
    });
}

} // namespace detail

/// Channel-to-space rearrangement [N, C*fr*fc, H, W] -> [N, C, H*fr, W*fc].
inline Var pixel_shuffle(Var x, std::size_t fr, std::size_t fc)
{
    detail::need_rank("pixel_shuffle", x, 4);
    const Shape& s = x.shape();
    if (fr == 0 || fc == 0 || s[1] % (fr * fc) != 0)
        fail(ErrorKind::shape, "pixel_shuffle: channels of " + shape_str(s) + " not divisible by " +
                                   std::to_string(fr) + "x" + std::to_string(fc));
    const std::size_t C = s[1] / (fr * fc);
    return detail::gather(x, {s[0], C, s[2] * fr, s[3] * fc}, detail::shuffle_map(s[0], C, s[2], s[3], fr, fc));
}

/// Inverse of pixel_shuffle: [N, C, H*fr, W*fc] -> [N, C*fr*fc, H, W].
inline Var pixel_unshuffle(Var x, std::size_t fr, std::size_t fc)
{
    detail::need_rank("pixel_unshuffle", x, 4);
    const Shape& s = x.shape();
    if (fr == 0 || fc == 0 || s[2] % fr != 0 || s[3] % fc != 0)
        fail(ErrorKind::shape, "pixel_unshuffle: " + shape_str(s) + " not divisible by " + std::to_string(fr) +
                                   "x" + std::to_string(fc));
    const std::size_t N = s[0], C = s[1], H = s[2] / fr, W = s[3] / fc;
    const auto fwd = detail::shuffle_map(N, C, H, W, fr, fc);
    std::vector<std::size_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i)
        inv[fwd[i]] = i;
    return detail::gather(x, {N, C * fr * fc, H, W}, std::move(inv));
}

/// Zeroes whole channels with probability `rate` (inverted scaling) when the
/// graph is in training mode; the identity otherwise.
inline Var spatial_dropout(Var x, double rate)
{
    require(rate >= 0.0 && rate < 1.0, ErrorKind::config, "spatial_dropout: rate must be in [0,1)");
    if (!x.graph->training() || rate == 0.0)
        return x;
    const Tensor& xv = x.value();
    require(xv.rank() >= 2, ErrorKind::shape, "spatial_dropout: need NC... input");
    const std::size_t NC = xv.dim(0) * xv.dim(1);
    const std::size_t inner = xv.size() / NC;
    std::bernoulli_distribution keep(1.0 - rate);
    std::vector<double> factor(NC);
    for (auto& f : factor)
        f = keep(x.graph->rng()) ? 1.0 / (1.0 - rate) : 0.0;
    Tensor out(xv.shape());
    for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t i = 0; i < inner; ++i)
            out[p * inner + i] = xv[p * inner + i] * factor[p];
    const std::size_t xi = x.id;
    return x.graph->record(std::move(out), {x}, [xi, factor, inner](Graph& g, std::size_t self) {
        double* gx = detail::gslot(g, xi);
        const auto& go = g.grad_of(self);
        for (std::size_t p = 0; p < factor.size(); ++p)
            for (std::size_t i = 0; i < inner; ++i)
                gx[p * inner + i] += go[p * inner + i] * factor[p];
    });
}

/// Concatenation along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis)
{
    require(!parts.empty(), ErrorKind::shape, "concat: no inputs");
    Shape s = parts[0].shape();
    require(axis < s.size(), ErrorKind::shape, "concat: axis out of range for " + shape_str(s));
    std::size_t total = 0;
    for (const Var& p : parts) {
        Shape t = p.shape();
        if (t.size() != s.size())
            fail(ErrorKind::shape, "concat: rank mismatch " + shape_str(s) + " vs " + shape_str(t));
        for (std::size_t d = 0; d < s.size(); ++d)
            if (d != axis && t[d] != s[d])
                fail(ErrorKind::shape, "concat: shape mismatch " + shape_str(s) + " vs " + shape_str(t));
        total += t[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d)
        outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d)
        inner *= s[d];
    s[axis] = total;
    Tensor out(s);
    std::vector<std::size_t> ids, widths;
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const std::size_t width = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * total * inner + offset, p.value().data() + o * width,
                        width * sizeof(double));
        ids.push_back(p.id);
        widths.push_back(width);
        offset += width;
    }
    const std::size_t row = total * inner;
    return parts[0].graph->record(std::move(out), parts, [ids, widths, outer, row](Graph& g, std::size_t self) {
        const auto& go = g.grad_of(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (double* gp = detail::gslot(g, ids[k]))
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < widths[k]; ++i)
                        gp[o * widths[k] + i] += go[o * row + offset + i];
            offset += widths[k];
        }
    });
}

/// Slice [begin, begin+count) along `axis`.
inline Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t count)
{
    Shape s = x.shape();
    require(axis < s.size() && begin + count <= s[axis] && count > 0, ErrorKind::shape,
            "slice: [" + std::to_string(begin) + "," + std::to_string(begin + count) + ") out of range for axis " +
                std::to_string(axis) + " of " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d)
        outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d)
        inner *= s[d];
    const std::size_t row = s[axis] * inner;
    const std::size_t off = begin * inner;
    const std::size_t width = count * inner;
    s[axis] = count;
    Tensor out(s);
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * width, x.value().data() + o * row + off, width * sizeof(double));
    const std::size_t xi = x.id;
    return x.graph->record(std::move(out), {x}, [=](Graph& g, std::size_t self) {
        double* gx = detail::gslot(g, xi);
        const auto& go = g.grad_of(self);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < width; ++i)
                gx[o * row + off + i] += go[o * width + i];
    });
}

/// Ascending sort along the channel axis of an NCHW tensor, independently at
/// every (n, h, w). When `perm` is non-null it receives, per pixel, the source
/// channel of each sorted position (layout [N, C, H, W], same as the output).
inline Var sort_channels(Var x, std::vector<std::uint8_t>* perm = nullptr)
{
    detail::need_rank("sort_channels", x, 4);
    const Shape& s = x.shape();
    const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
    require(C <= 255, ErrorKind::shape, "sort_channels: too many channels");
    const Tensor& xv = x.value();
    Tensor out(s);
    std::vector<std::uint8_t> p(xv.size());
    std::vector<std::uint8_t> idx(C);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t q = 0; q < HW; ++q) {
            const double* base = xv.data() + n * C * HW + q;
            for (std::size_t c = 0; c < C; ++c)
                idx[c] = static_cast<std::uint8_t>(c);
            std::stable_sort(idx.begin(), idx.end(),
                             [&](std::uint8_t a, std::uint8_t b) { return base[a * HW] < base[b * HW]; });
            for (std::size_t c = 0; c < C; ++c) {
                out[n * C * HW + c * HW + q] = base[idx[c] * HW];
                p[n * C * HW + c * HW + q] = idx[c];
            }
        }
    if (perm)
        *perm = p;
    const std::size_t xi = x.id;
    return x.graph->record(std::move(out), {x}, [=, p = std::move(p)](Graph& g, std::size_t self) {
        double* gx = detail::gslot(g, xi);
        const auto& go = g.grad_of(self);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t q = 0; q < HW; ++q) {
                    const std::size_t i = n * C * HW + c * HW + q;
                    gx[n * C * HW + p[i] * HW + q] += go[i];
                }
    });
}

} // namespace qdown
