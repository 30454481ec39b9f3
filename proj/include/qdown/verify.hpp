#pragma once

// Verification of fine-grid precipitation forecasts: bulk fit, contingency
// scores at a threshold, histogram divergence, the pinball CRPS proxy,
// calibration, interval coverage and sharpness.
//
// Everything operates on a PixelSet: the masked pixel-days of an evaluation
// split, flattened, with one prediction column per channel.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qdown/stats.hpp"
#include "qdown/tensor.hpp"

namespace qdown {

struct ContingencyTable {
    std::uint64_t a = 0; // hits
    std::uint64_t b = 0; // false alarms
    std::uint64_t c = 0; // misses
    std::uint64_t d = 0; // correct rejections
    double threshold = 0.0;

    std::uint64_t total() const noexcept { return a + b + c + d; }

    ContingencyTable& operator+=(const ContingencyTable& o)
    {
        a += o.a;
        b += o.b;
        c += o.c;
        d += o.d;
        return *this;
    }
    friend ContingencyTable operator+(ContingencyTable x, const ContingencyTable& y) { return x += y; }
    friend bool operator==(const ContingencyTable&, const ContingencyTable&) = default;
};

/// Strict exceedance on both sides: hit when pred > T and obs > T.
inline ContingencyTable contingency(std::span<const double> pred, std::span<const double> obs, double T)
{
    require(pred.size() == obs.size(), ErrorKind::shape,
            "contingency: " + std::to_string(pred.size()) + " predictions vs " + std::to_string(obs.size()) +
                " observations");
    ContingencyTable t;
    t.threshold = T;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool f = pred[i] > T, o = obs[i] > T;
        if (f && o)
            ++t.a;
        else if (f)
            ++t.b;
        else if (o)
            ++t.c;
        else
            ++t.d;
    }
    return t;
}

/// Field version: pred and obs share a shape whose trailing [H, W] matches
/// the mask; pixels with mask 0 are skipped.
inline ContingencyTable contingency(const Tensor& pred, const Tensor& obs, const Tensor& mask, double T)
{
    require(pred.shape() == obs.shape(), ErrorKind::shape,
            "contingency: prediction " + shape_str(pred.shape()) + " vs observation " + shape_str(obs.shape()));
    require(mask.size() > 0 && pred.size() % mask.size() == 0, ErrorKind::shape,
            "contingency: mask " + shape_str(mask.shape()) + " does not tile " + shape_str(pred.shape()));
    ContingencyTable t;
    t.threshold = T;
    const std::size_t P = mask.size();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask[i % P] <= 0)
            continue;
        const bool f = pred[i] > T, o = obs[i] > T;
        if (f && o)
            ++t.a;
        else if (f)
            ++t.b;
        else if (o)
            ++t.c;
        else
            ++t.d;
    }
    return t;
}

inline double pod(const ContingencyTable& t)
{
    const auto n = t.a + t.c;
    return n ? static_cast<double>(t.a) / static_cast<double>(n) : nan_value;
}

inline double far(const ContingencyTable& t)
{
    const auto n = t.a + t.b;
    return n ? static_cast<double>(t.b) / static_cast<double>(n) : nan_value;
}

enum class SediPolicy {
    clamp, // H, F clamped to [eps, 1 - eps] with eps = 1 / (2 (a+b+c+d))
    none   // not-a-value whenever H or F is 0 or 1
};

inline double sedi(const ContingencyTable& t, SediPolicy policy = SediPolicy::clamp)
{
    if (t.a + t.c == 0 || t.b + t.d == 0)
        return nan_value;
    double H = static_cast<double>(t.a) / static_cast<double>(t.a + t.c);
    double F = static_cast<double>(t.b) / static_cast<double>(t.b + t.d);
    if (policy == SediPolicy::clamp) {
        const double eps = 1.0 / (2.0 * static_cast<double>(t.total()));
        H = std::clamp(H, eps, 1.0 - eps);
        F = std::clamp(F, eps, 1.0 - eps);
    } else if (H <= 0.0 || H >= 1.0 || F <= 0.0 || F >= 1.0) {
        return nan_value;
    }
    const double lf = std::log(F), lh = std::log(H), l1h = std::log1p(-H), l1f = std::log1p(-F);
    return (lf - lh + l1h - l1f) / (lf + lh + l1h + l1f);
}

// ---------------------------------------------------------------------------
// Histogram divergence

/// Bin 0 holds [0, lo]; bins 1..n split (lo, hi] into log-spaced intervals.
/// Values above hi land in the last bin, negative values in bin 0.
struct Binning {
    double lo = 0.1;
    double hi = 1200.0;
    std::size_t log_bins = 50;

    std::size_t size() const noexcept { return log_bins + 1; }

    std::size_t index(double y) const
    {
        if (!(y > lo))
            return 0;
        if (y >= hi)
            return log_bins;
        const double u = std::log(y / lo) / std::log(hi / lo);
        const auto k = static_cast<std::size_t>(std::ceil(u * static_cast<double>(log_bins)));
        return std::clamp<std::size_t>(k, 1, log_bins);
    }

    double upper_edge(std::size_t k) const
    {
        if (k == 0)
            return lo;
        return lo * std::pow(hi / lo, static_cast<double>(k) / static_cast<double>(log_bins));
    }
};

inline std::vector<double> histogram(std::span<const double> v, const Binning& bins)
{
    std::vector<double> h(bins.size(), 0.0);
    for (double y : v)
        h[bins.index(y)] += 1.0;
    return h;
}

/// KL(p || q) between two count vectors after normalizing each to a
/// probability vector, adding eps per bin and renormalizing.
inline double kl_from_counts(std::span<const double> p, std::span<const double> q, double eps = 1e-6)
{
    require(p.size() == q.size() && !p.empty(), ErrorKind::shape, "kl: histogram sizes differ");
    auto smooth = [eps](std::span<const double> c) {
        double n = 0.0;
        for (double x : c)
            n += x;
        std::vector<double> out(c.size());
        double z = 0.0;
        for (std::size_t i = 0; i < c.size(); ++i) {
            out[i] = (n > 0 ? c[i] / n : 0.0) + eps;
            z += out[i];
        }
        for (double& x : out)
            x /= z;
        return out;
    };
    const auto ps = smooth(p), qs = smooth(q);
    double kl = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i)
        kl += ps[i] * std::log(ps[i] / qs[i]);
    return kl;
}

/// KL(observed || predicted) between the binned marginals.
inline double kl_divergence(std::span<const double> pred, std::span<const double> obs, const Binning& bins = {},
                            double eps = 1e-6)
{
    require(!pred.empty() && !obs.empty(), ErrorKind::data, "kl: empty sample");
    const auto hp = histogram(pred, bins), ho = histogram(obs, bins);
    return kl_from_counts(ho, hp, eps);
}

// ---------------------------------------------------------------------------
// Probabilistic scores over the masked pixel-days of a split

struct PixelSet {
    std::vector<double> taus;           // one per column; empty for a point forecast
    std::vector<std::vector<double>> q; // q[k][i], mm/day
    std::vector<double> y;              // y[i], mm/day

    std::size_t size() const noexcept { return y.size(); }
    std::size_t channels() const noexcept { return q.size(); }

    /// Column for tau, or nullopt.
    std::optional<std::size_t> level(double tau) const
    {
        for (std::size_t k = 0; k < taus.size(); ++k)
            if (std::abs(taus[k] - tau) < 1e-12)
                return k;
        return std::nullopt;
    }
};

/// Flattens pred [N, K, H, W] and obs [N, H, W] (or [N, 1, H, W]) over the
/// pixels where mask [H, W] is set.
inline PixelSet collect(const Tensor& pred, const Tensor& obs, const Tensor& mask, std::vector<double> taus)
{
    require(pred.rank() == 4, ErrorKind::shape, "collect: prediction must be [N,K,H,W], got " + shape_str(pred.shape()));
    const std::size_t N = pred.dim(0), K = pred.dim(1), HW = pred.dim(2) * pred.dim(3);
    require(obs.size() == N * HW, ErrorKind::shape,
            "collect: observation " + shape_str(obs.shape()) + " vs prediction " + shape_str(pred.shape()));
    require(mask.size() == HW, ErrorKind::shape,
            "collect: mask " + shape_str(mask.shape()) + " vs prediction " + shape_str(pred.shape()));
    require(taus.empty() || taus.size() == K, ErrorKind::shape, "collect: level count differs from channel count");
    PixelSet s;
    s.taus = std::move(taus);
    s.q.assign(K, {});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) {
            if (mask[p] <= 0)
                continue;
            s.y.push_back(obs[n * HW + p]);
            for (std::size_t k = 0; k < K; ++k)
                s.q[k].push_back(pred[(n * K + k) * HW + p]);
        }
    return s;
}

inline void append(PixelSet& dst, const PixelSet& src)
{
    if (dst.q.empty()) {
        dst = src;
        return;
    }
    require(dst.channels() == src.channels() && dst.taus == src.taus, ErrorKind::shape,
            "pixel sets have different channels");
    dst.y.insert(dst.y.end(), src.y.begin(), src.y.end());
    for (std::size_t k = 0; k < dst.channels(); ++k)
        dst.q[k].insert(dst.q[k].end(), src.q[k].begin(), src.q[k].end());
}

/// Intensity bands on observed y, as [lo, hi) intervals.
inline const std::vector<double>& default_band_edges()
{
    static const std::vector<double> e{0, 1, 10, 50, 100, 200, std::numeric_limits<double>::infinity()};
    return e;
}

inline std::size_t band_of(double y, const std::vector<double>& edges)
{
    for (std::size_t b = 0; b + 1 < edges.size(); ++b)
        if (y >= edges[b] && y < edges[b + 1])
            return b;
    return edges.size(); // outside every band
}

inline double crps_term(const PixelSet& s, std::size_t i)
{
    double acc = 0.0;
    for (std::size_t k = 0; k < s.channels(); ++k) {
        const double e = s.y[i] - s.q[k][i], t = s.taus[k];
        acc += std::max(t * e, (t - 1.0) * e);
    }
    return acc / static_cast<double>(s.channels());
}

/// Mean over pixel-days of (1/K) sum_k rho_{tau_k}(y - q_k).
inline double crps_proxy(const PixelSet& s)
{
    require(!s.taus.empty() && s.taus.size() == s.channels(), ErrorKind::config, "crps proxy needs quantile levels");
    if (s.size() == 0)
        return nan_value;
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        acc += crps_term(s, i);
    return acc / static_cast<double>(s.size());
}

inline std::vector<double> crps_by_band(const PixelSet& s, const std::vector<double>& edges = default_band_edges())
{
    require(!s.taus.empty() && s.taus.size() == s.channels(), ErrorKind::config, "crps proxy needs quantile levels");
    const std::size_t B = edges.size() - 1;
    std::vector<double> sum(B, 0.0), cnt(B, 0.0);
    for (std::size_t i = 0; i < s.size(); ++i) {
        const std::size_t b = band_of(s.y[i], edges);
        if (b < B) {
            sum[b] += crps_term(s, i);
            cnt[b] += 1.0;
        }
    }
    for (std::size_t b = 0; b < B; ++b)
        sum[b] = cnt[b] > 0 ? sum[b] / cnt[b] : nan_value;
    return sum;
}

inline double crps_skill(double base, double aug)
{
    if (!(base != 0.0) || std::isnan(aug))
        return nan_value;
    return (base - aug) / base;
}

struct LevelCalibration {
    double tau = 0.0;
    double exceedance = nan_value; // Pr(y > q), all pixel-days
    double ratio = nan_value;      // exceedance / (1 - tau)
    double wet_exceedance = nan_value;
    double wet_ratio = nan_value;
    std::uint64_t n = 0;
    std::uint64_t n_wet = 0;
};

inline std::vector<LevelCalibration> calibration(const PixelSet& s, double wet_threshold = 1.0)
{
    require(!s.taus.empty(), ErrorKind::config, "calibration needs quantile levels");
    std::vector<LevelCalibration> out;
    for (std::size_t k = 0; k < s.channels(); ++k) {
        LevelCalibration c;
        c.tau = s.taus[k];
        std::uint64_t ex = 0, ex_wet = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const bool above = s.y[i] > s.q[k][i];
            ex += above;
            if (s.y[i] > wet_threshold) {
                ++c.n_wet;
                ex_wet += above;
            }
        }
        c.n = s.size();
        if (c.n) {
            c.exceedance = static_cast<double>(ex) / static_cast<double>(c.n);
            c.ratio = c.exceedance / (1.0 - c.tau);
        }
        if (c.n_wet) {
            c.wet_exceedance = static_cast<double>(ex_wet) / static_cast<double>(c.n_wet);
            c.wet_ratio = c.wet_exceedance / (1.0 - c.tau);
        }
        out.push_back(c);
    }
    return out;
}

/// Relative reduction of the calibration gap |r - 1| from base to aug.
inline double gap_closure(double r_base, double r_aug)
{
    if (std::isnan(r_base) || std::isnan(r_aug) || r_base == 1.0)
        return nan_value;
    return 1.0 - (r_aug - 1.0) / (r_base - 1.0);
}

/// Fraction of pixel-days with q_lower < y <= q_upper.
inline double interval_coverage(const PixelSet& s, double lower, double upper)
{
    require(lower < upper, ErrorKind::config, "interval coverage: lower level must be below upper level");
    const auto lo = s.level(lower), hi = s.level(upper);
    require(lo && hi, ErrorKind::config, "interval coverage: levels not present in the prediction");
    if (s.size() == 0)
        return nan_value;
    std::size_t in = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        in += s.q[*lo][i] < s.y[i] && s.y[i] <= s.q[*hi][i];
    return static_cast<double>(in) / static_cast<double>(s.size());
}

struct Sharpness {
    std::vector<double> p99_p50;  // per band
    std::vector<double> p999_p95; // per band
};

/// Per-band medians of the P99-P50 and P999-P95 spreads. A spread whose
/// levels are absent comes back as not-a-value.
inline Sharpness sharpness(const PixelSet& s, const std::vector<double>& edges = default_band_edges())
{
    require(edges.size() >= 2, ErrorKind::config, "sharpness: need at least one band");
    const std::size_t B = edges.size() - 1;
    auto spread = [&](double hi, double lo) {
        std::vector<double> med(B, nan_value);
        const auto h = s.level(hi), l = s.level(lo);
        if (!h || !l)
            return med;
        std::vector<std::vector<double>> by(B);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const std::size_t b = band_of(s.y[i], edges);
            if (b < B)
                by[b].push_back(s.q[*h][i] - s.q[*l][i]);
        }
        for (std::size_t b = 0; b < B; ++b)
            med[b] = median(std::move(by[b]));
        return med;
    };
    return {spread(0.99, 0.50), spread(0.999, 0.95)};
}

struct BulkFit {
    double rmse = nan_value;
    double pearson = nan_value;
};

inline BulkFit bulk(std::span<const double> pred, std::span<const double> obs)
{
    require(pred.size() == obs.size(), ErrorKind::shape, "bulk: size mismatch");
    BulkFit r;
    const std::size_t n = pred.size();
    if (n == 0)
        return r;
    double mp = 0, mo = 0, se = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mp += pred[i];
        mo += obs[i];
        se += (pred[i] - obs[i]) * (pred[i] - obs[i]);
    }
    mp /= static_cast<double>(n);
    mo /= static_cast<double>(n);
    r.rmse = std::sqrt(se / static_cast<double>(n));
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (pred[i] - mp) * (obs[i] - mo);
        sxx += (pred[i] - mp) * (pred[i] - mp);
        syy += (obs[i] - mo) * (obs[i] - mo);
    }
    if (sxx > 0 && syy > 0)
        r.pearson = sxy / std::sqrt(sxx * syy);
    return r;
}

} // namespace qdown
