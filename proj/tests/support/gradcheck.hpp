#pragma once

// Finite-difference oracle for the autodiff engine and the catalogue of
// differentiable operators it is applied to. Shared by the unit tests and
// the acceptance runner.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "qdown/loss.hpp"
#include "qdown/model.hpp"
#include "qdown/ops.hpp"
#include "qdown/stats.hpp"

namespace qdown::testing {

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCase {
    std::vector<Tensor> inputs;
    Builder build;
    bool training = false; // graph mode (dropout)
    std::uint64_t graph_seed = 0;
};

inline Tensor random_tensor(Stream& s, Shape shape, double lo = -1.0, double hi = 1.0)
{
    Tensor t(std::move(shape));
    for (double& v : t.values())
        v = lo + (hi - lo) * s.uniform();
    return t;
}

/// Uniform in +-[margin, 1]: keeps samples off a kink at zero.
inline Tensor signed_away_from_zero(Stream& s, Shape shape, double margin = 0.05)
{
    Tensor t(std::move(shape));
    for (double& v : t.values()) {
        const double m = margin + (1.0 - margin) * s.uniform();
        v = s.uniform() < 0.5 ? -m : m;
    }
    return t;
}

/// Scalarizes f's output with fixed random weights so every output element
/// contributes to the gradient.
inline double probe_loss(const GradCase& c, const std::vector<Tensor>& inputs, const Tensor& weights,
                         std::vector<std::vector<double>>* grads)
{
    Graph g(c.training, c.graph_seed);
    std::vector<Var> in;
    for (const Tensor& t : inputs)
        in.push_back(g.input(t));
    Var out = c.build(g, in);
    Var loss = out.value().size() == 1 ? out : sum(mul(out, g.constant(weights)));
    if (grads) {
        g.backward(loss);
        grads->clear();
        for (const Var& v : in)
            grads->push_back(g.grad(v));
    }
    return loss.value().item();
}

struct GradCheckResult {
    double max_rel_error = 0.0; // max over inputs of |a - n|_inf / max(|a|_inf, |n|_inf)
};

/// Central differences with step h against reverse mode, per input tensor.
inline GradCheckResult gradcheck(const GradCase& c, std::uint64_t weight_seed, double h = 1e-5)
{
    Tensor weights;
    {
        Graph g(c.training, c.graph_seed);
        std::vector<Var> in;
        for (const Tensor& t : c.inputs)
            in.push_back(g.input(t));
        Stream s(weight_seed);
        weights = random_tensor(s, c.build(g, in).shape(), 0.5, 1.5);
    }
    std::vector<std::vector<double>> analytic;
    probe_loss(c, c.inputs, weights, &analytic);
    GradCheckResult r;
    std::vector<Tensor> x = c.inputs;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double num_inf = 0.0, ana_inf = 0.0, diff_inf = 0.0;
        for (std::size_t k = 0; k < x[i].size(); ++k) {
            const double orig = x[i][k];
            x[i][k] = orig + h;
            const double fp = probe_loss(c, x, weights, nullptr);
            x[i][k] = orig - h;
            const double fm = probe_loss(c, x, weights, nullptr);
            x[i][k] = orig;
            const double n = (fp - fm) / (2.0 * h);
            const double a = analytic[i].empty() ? 0.0 : analytic[i][k];
            num_inf = std::max(num_inf, std::abs(n));
            ana_inf = std::max(ana_inf, std::abs(a));
            diff_inf = std::max(diff_inf, std::abs(a - n));
        }
        const double denom = std::max({num_inf, ana_inf, 1e-12});
        r.max_rel_error = std::max(r.max_rel_error, diff_inf / denom);
    }
    return r;
}

struct OpEntry {
    std::string name;
    std::function<GradCase(Stream&)> make;
};

/// One entry per differentiable operator; each make() draws a random case.
inline std::vector<OpEntry> op_catalogue()
{
    auto dim = [](Stream& s, std::size_t lo, std::size_t hi) {
        return lo + static_cast<std::size_t>(s.uniform() * static_cast<double>(hi - lo + 1));
    };
    std::vector<OpEntry> ops;
    ops.push_back({"add", [=](Stream& s) {
                       Shape sh{dim(s, 1, 3), dim(s, 1, 4)};
                       return GradCase{{random_tensor(s, sh), random_tensor(s, sh)},
                                       [](Graph&, const std::vector<Var>& v) { return add(v[0], v[1]); }};
                   }});
    ops.push_back({"sub", [=](Stream& s) {
                       Shape sh{dim(s, 1, 3), dim(s, 1, 4)};
                       return GradCase{{random_tensor(s, sh), random_tensor(s, sh)},
                                       [](Graph&, const std::vector<Var>& v) { return sub(v[0], v[1]); }};
                   }});
    ops.push_back({"mul", [=](Stream& s) {
                       Shape sh{dim(s, 1, 3), dim(s, 1, 4)};
                       return GradCase{{random_tensor(s, sh), random_tensor(s, sh)},
                                       [](Graph&, const std::vector<Var>& v) { return mul(v[0], v[1]); }};
                   }});
    ops.push_back({"maximum", [=](Stream& s) {
                       Shape sh{dim(s, 1, 3), dim(s, 1, 4)};
                       Tensor a = random_tensor(s, sh), d = signed_away_from_zero(s, sh);
                       Tensor b(sh);
                       for (std::size_t i = 0; i < b.size(); ++i)
                           b[i] = a[i] + d[i];
                       return GradCase{{a, b}, [](Graph&, const std::vector<Var>& v) { return maximum(v[0], v[1]); }};
                   }});
    ops.push_back({"scale", [=](Stream& s) {
                       const double k = 4.0 * s.uniform() - 2.0;
                       return GradCase{{random_tensor(s, {dim(s, 1, 6)})},
                                       [k](Graph&, const std::vector<Var>& v) { return scale(v[0], k); }};
                   }});
    ops.push_back({"add_scalar", [=](Stream& s) {
                       const double k = 4.0 * s.uniform() - 2.0;
                       return GradCase{{random_tensor(s, {dim(s, 1, 6)})},
                                       [k](Graph&, const std::vector<Var>& v) { return add_scalar(v[0], k); }};
                   }});
    ops.push_back({"softplus", [=](Stream& s) {
                       return GradCase{{random_tensor(s, {dim(s, 1, 6)}, -4, 4)},
                                       [](Graph&, const std::vector<Var>& v) { return softplus(v[0]); }};
                   }});
    ops.push_back({"tanh", [=](Stream& s) {
                       return GradCase{{random_tensor(s, {dim(s, 1, 6)}, -3, 3)},
                                       [](Graph&, const std::vector<Var>& v) { return qdown::tanh(v[0]); }};
                   }});
    ops.push_back({"abs", [=](Stream& s) {
                       return GradCase{{signed_away_from_zero(s, {dim(s, 1, 6)})},
                                       [](Graph&, const std::vector<Var>& v) { return qdown::abs(v[0]); }};
                   }});
    ops.push_back({"clip", [=](Stream& s) {
                       // Values kept at least 0.05 from both bounds.
                       Tensor t({dim(s, 2, 8)});
                       for (double& x : t.values()) {
                           if (s.uniform() < 0.5)
                               x = 0.9 * s.uniform() - 0.45;
                           else
                               x = (s.uniform() < 0.5 ? -1.0 : 1.0) * (0.55 + s.uniform());
                       }
                       return GradCase{{t}, [](Graph&, const std::vector<Var>& v) { return clip(v[0], -0.5, 0.5); }};
                   }});
    ops.push_back({"sum", [=](Stream& s) {
                       return GradCase{{random_tensor(s, {dim(s, 1, 3), dim(s, 1, 4)})},
                                       [](Graph&, const std::vector<Var>& v) { return sum(v[0]); }};
                   }});
    ops.push_back({"mean", [=](Stream& s) {
                       return GradCase{{random_tensor(s, {dim(s, 1, 3), dim(s, 1, 4)})},
                                       [](Graph&, const std::vector<Var>& v) { return mean(v[0]); }};
                   }});
    ops.push_back({"masked_mean", [=](Stream& s) {
                       const std::size_t N = dim(s, 1, 3), H = dim(s, 2, 4), W = dim(s, 2, 4);
                       Tensor mask({H, W});
                       for (double& m : mask.values())
                           m = s.uniform() < 0.6 ? 1.0 : 0.0;
                       mask[0] = 1.0;
                       return GradCase{{random_tensor(s, {N, 1, H, W})},
                                       [mask](Graph&, const std::vector<Var>& v) { return masked_mean(v[0], mask); }};
                   }});
    ops.push_back({"matmul", [=](Stream& s) {
                       const std::size_t m = dim(s, 1, 4), k = dim(s, 1, 4), n = dim(s, 1, 4);
                       return GradCase{{random_tensor(s, {m, k}), random_tensor(s, {k, n})},
                                       [](Graph&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }};
                   }});
    ops.push_back({"conv2d", [=](Stream& s) {
                       const std::size_t ks[] = {1, 3, 5};
                       const std::size_t k = ks[dim(s, 0, 2)];
                       // Output counts on both sides of the direct/GEMM switch.
                       const std::size_t co = s.uniform() < 0.5 ? dim(s, 1, 3) : dim(s, 9, 10);
                       const std::size_t N = dim(s, 1, 2), C = dim(s, 1, 3), H = dim(s, 2, 5), W = dim(s, 2, 5);
                       return GradCase{{random_tensor(s, {N, C, H, W}), random_tensor(s, {co, C, k, k}),
                                        random_tensor(s, {co})},
                                       [](Graph&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2]); }};
                   }});
    ops.push_back({"prelu", [=](Stream& s) {
                       const std::size_t C = dim(s, 1, 3);
                       return GradCase{{signed_away_from_zero(s, {dim(s, 1, 2), C, dim(s, 1, 3), dim(s, 1, 3)}),
                                        random_tensor(s, {C}, 0.0, 0.5)},
                                       [](Graph&, const std::vector<Var>& v) { return prelu(v[0], v[1]); }};
                   }});
    ops.push_back({"upsample_bilinear", [=](Stream& s) {
                       const std::size_t fr = dim(s, 1, 3), fc = dim(s, 1, 3);
                       return GradCase{{random_tensor(s, {dim(s, 1, 2), dim(s, 1, 2), dim(s, 1, 4), dim(s, 1, 4)})},
                                       [fr, fc](Graph&, const std::vector<Var>& v) {
                                           return upsample_bilinear(v[0], fr, fc);
                                       }};
                   }});
    ops.push_back({"pixel_shuffle", [=](Stream& s) {
                       const std::size_t fr = dim(s, 1, 3), fc = dim(s, 1, 3);
                       return GradCase{
                           {random_tensor(s, {dim(s, 1, 2), dim(s, 1, 2) * fr * fc, dim(s, 1, 3), dim(s, 1, 3)})},
                           [fr, fc](Graph&, const std::vector<Var>& v) { return pixel_shuffle(v[0], fr, fc); }};
                   }});
    ops.push_back({"pixel_unshuffle", [=](Stream& s) {
                       const std::size_t fr = dim(s, 1, 3), fc = dim(s, 1, 3);
                       return GradCase{
                           {random_tensor(s, {dim(s, 1, 2), dim(s, 1, 2), dim(s, 1, 3) * fr, dim(s, 1, 3) * fc})},
                           [fr, fc](Graph&, const std::vector<Var>& v) { return pixel_unshuffle(v[0], fr, fc); }};
                   }});
    ops.push_back({"spatial_dropout", [=](Stream& s) {
                       GradCase c{{random_tensor(s, {dim(s, 1, 3), dim(s, 2, 6), dim(s, 1, 3), dim(s, 1, 3)})},
                                  [](Graph&, const std::vector<Var>& v) { return spatial_dropout(v[0], 0.3); }};
                       c.training = true;
                       c.graph_seed = s.bits();
                       return c;
                   }});
    ops.push_back({"concat", [=](Stream& s) {
                       const std::size_t axis = dim(s, 0, 2);
                       Shape a{dim(s, 1, 3), dim(s, 1, 3), dim(s, 1, 3)}, b = a;
                       b[axis] = dim(s, 1, 3);
                       return GradCase{{random_tensor(s, a), random_tensor(s, b)},
                                       [axis](Graph&, const std::vector<Var>& v) {
                                           return concat({v[0], v[1]}, axis);
                                       }};
                   }});
    ops.push_back({"slice", [=](Stream& s) {
                       const std::size_t axis = dim(s, 0, 2);
                       Shape sh{dim(s, 1, 4), dim(s, 1, 4), dim(s, 1, 4)};
                       const std::size_t begin = dim(s, 0, sh[axis] - 1);
                       const std::size_t count = dim(s, 1, sh[axis] - begin);
                       return GradCase{{random_tensor(s, sh)}, [=](Graph&, const std::vector<Var>& v) {
                                           return slice(v[0], axis, begin, count);
                                       }};
                   }});
    ops.push_back({"sort_channels", [=](Stream& s) {
                       // Distinct channel values per pixel, at least 0.05 apart.
                       const std::size_t N = dim(s, 1, 2), K = dim(s, 2, 4), H = dim(s, 1, 3), W = dim(s, 1, 3);
                       Tensor t({N, K, H, W});
                       for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t p = 0; p < H * W; ++p) {
                               std::vector<double> v(K);
                               double acc = s.uniform() - 0.5;
                               for (double& x : v) {
                                   x = acc;
                                   acc += 0.05 + 0.5 * s.uniform();
                               }
                               for (std::size_t i = K; i > 1; --i)
                                   std::swap(v[i - 1], v[static_cast<std::size_t>(s.uniform() * static_cast<double>(i))]);
                               for (std::size_t k = 0; k < K; ++k)
                                   t[(n * K + k) * H * W + p] = v[k];
                           }
                       return GradCase{{t}, [](Graph&, const std::vector<Var>& v) { return sort_channels(v[0]); }};
                   }});
    ops.push_back({"increment_bound", [=](Stream& s) {
                       return GradCase{{random_tensor(s, {dim(s, 1, 2), dim(s, 1, 4), dim(s, 1, 3), dim(s, 1, 3)}, -4, 4)},
                                       [](Graph&, const std::vector<Var>& v) { return increment_bound(v[0]); }};
                   }});
    ops.push_back({"pinball", [=](Stream& s) {
                       const double tau = 0.01 + 0.98 * s.uniform();
                       return GradCase{{signed_away_from_zero(s, {dim(s, 1, 6)})},
                                       [tau](Graph&, const std::vector<Var>& v) { return pinball(v[0], tau); }};
                   }});
    ops.push_back({"masked_quantile_loss", [=](Stream& s) {
                       const std::size_t N = dim(s, 1, 2), H = dim(s, 2, 3), W = dim(s, 2, 3);
                       QuantileLevels lv;
                       Tensor y = random_tensor(s, {N, 1, H, W}, -1, 2);
                       Tensor pred({N, lv.size(), H, W});
                       // Residuals kept off zero.
                       const Tensor d = signed_away_from_zero(s, pred.shape());
                       for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t k = 0; k < lv.size(); ++k)
                               for (std::size_t p = 0; p < H * W; ++p) {
                                   const std::size_t i = (n * lv.size() + k) * H * W + p;
                                   pred[i] = y[n * H * W + p] + d[i];
                               }
                       Tensor mask({H, W}, 1.0);
                       mask[H * W - 1] = 0.0;
                       return GradCase{{pred}, [=](Graph&, const std::vector<Var>& v) {
                                           return masked_quantile_loss(v[0], y, mask, lv, EventWeightConfig{});
                                       }};
                   }});
    ops.push_back({"weighted_mae", [=](Stream& s) {
                       const std::size_t N = dim(s, 1, 2), H = dim(s, 2, 3), W = dim(s, 2, 3);
                       Tensor mm = random_tensor(s, {N, 1, H, W}, 0, 40);
                       Tensor z(mm.shape());
                       for (std::size_t i = 0; i < z.size(); ++i)
                           z[i] = std::log1p(mm[i]);
                       Tensor pred = signed_away_from_zero(s, mm.shape());
                       for (std::size_t i = 0; i < z.size(); ++i)
                           pred[i] += z[i];
                       Tensor mask({H, W}, 1.0);
                       return GradCase{{pred}, [=](Graph&, const std::vector<Var>& v) {
                                           return weighted_mae(v[0], z, mm, mask, MaeWeightConfig{});
                                       }};
                   }});
    return ops;
}

} // namespace qdown::testing
