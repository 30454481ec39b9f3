#pragma once

// Synthetic downscaling world. Each fine pixel's precipitation follows a
// three-branch mixture conditioned on bilinearly interpolated coarse fields:
//
//   0                          with probability p_dry
//   L                          with probability (1 - p_dry)(1 - q)
//   L * P                      with probability (1 - p_dry) q
//
// where ln L ~ N(mu, sigma^2) and P ~ Pareto(scale x_m, index alpha). The
// mixture CDF is explicit, so exact conditional quantiles are available.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>
#include <string>
#include <vector>

#include "qdown/model.hpp"
#include "qdown/norm.hpp"
#include "qdown/ops.hpp"
#include "qdown/stats.hpp"

namespace qdown {

struct PixelLaw {
    double p_dry = 0.0;
    double mu = 0.0;
    double sigma = 1.0;
    double q_ext = 0.0;
    double alpha_tail = 2.5;
    double tail_scale = 2.0;

    double sample(Stream& s) const
    {
        const double u = s.uniform();
        const double z = s.normal();
        const double body = std::exp(mu + sigma * z);
        if (u < p_dry)
            return 0.0;
        const double v = s.uniform_open();
        if (s.uniform() < q_ext)
            return body * tail_scale * std::pow(v, -1.0 / alpha_tail);
        return body;
    }

    /// P(L * P <= y) for the extreme branch.
    double extreme_cdf(double y) const
    {
        if (y <= 0.0)
            return 0.0;
        const double zp = (std::log(y / tail_scale) - mu) / sigma;
        const double shifted = zp - alpha_tail * sigma;
        if (shifted < -37.0)
            return 0.0;
        const double lead = normal_cdf(zp);
        const double corr = std::exp(-alpha_tail * sigma * zp + 0.5 * alpha_tail * alpha_tail * sigma * sigma) *
                            normal_cdf(shifted);
        return std::clamp(lead - corr, 0.0, 1.0);
    }

    double cdf(double y) const
    {
        if (y < 0.0)
            return 0.0;
        if (y == 0.0)
            return p_dry;
        const double body = normal_cdf((std::log(y) - mu) / sigma);
        return p_dry + (1.0 - p_dry) * ((1.0 - q_ext) * body + q_ext * extreme_cdf(y));
    }

    /// Density for y > 0 (the atom at zero excluded).
    double pdf(double y) const
    {
        if (y <= 0.0)
            return 0.0;
        const double z = (std::log(y) - mu) / sigma;
        const double body = std::exp(-0.5 * z * z) / (std::sqrt(2.0 * std::numbers::pi) * sigma * y);
        double ext = 0.0;
        if (q_ext > 0.0) {
            const double zp = (std::log(y / tail_scale) - mu) / sigma;
            const double shifted = zp - alpha_tail * sigma;
            if (shifted > -37.0)
                ext = alpha_tail *
                      std::exp(-alpha_tail * sigma * zp + 0.5 * alpha_tail * alpha_tail * sigma * sigma) *
                      normal_cdf(shifted) / y;
        }
        return (1.0 - p_dry) * ((1.0 - q_ext) * body + q_ext * ext);
    }

    /// Inverse of cdf() to 1e-9 mm/day; 0 when tau <= p_dry. Bracketed
    /// bisection, with Newton steps taken whenever they stay inside the
    /// bracket.
    double quantile(double tau) const
    {
        if (tau <= p_dry)
            return 0.0;
        double lo = 0.0, hi = 1.0;
        while (cdf(hi) < tau) {
            lo = hi;
            hi *= 2.0;
            if (hi > 1e300)
                return hi;
        }
        double x = 0.5 * (lo + hi);
        while (hi - lo > 1e-9) {
            const double f = cdf(x) - tau;
            (f < 0.0 ? lo : hi) = x;
            const double d = pdf(x);
            double next = d > 0.0 ? x - f / d : lo - 1.0;
            if (!(next > lo && next < hi))
                next = 0.5 * (lo + hi);
            if (std::abs(next - x) <= 1e-12 * std::max(1.0, x)) {
                // Converged: confirm the bracket around the Newton root.
                const double a = std::max(lo, next - 5e-10), b = std::min(hi, next + 5e-10);
                if (cdf(a) < tau)
                    lo = a;
                if (cdf(b) >= tau)
                    hi = b;
                if (hi - lo <= 1e-9)
                    break;
                next = 0.5 * (lo + hi);
            }
            x = next;
        }
        return hi;
    }
};

inline double oracle_quantile(const PixelLaw& law, double tau)
{
    require(tau > 0.0 && tau < 1.0, ErrorKind::config, "oracle_quantile: tau must lie in (0,1)");
    return law.quantile(tau);
}

struct WorldConfig {
    std::size_t coarse_rows = 12;
    std::size_t coarse_cols = 12;
    std::size_t up_rows = 4;
    std::size_t up_cols = 4;
    std::size_t channels = 3; // storm, moisture, background (+ extra background)

    double storm_day_sigma = 1.0;  // day-to-day storm strength
    double storm_local_sigma = 0.7;
    std::size_t smooth_passes = 2;
    double moisture_corr = 0.6;

    double dry_bias = 0.9;
    double dry_storm = -1.6;
    double dry_moisture = -0.5;

    double mu_bias = 1.0;
    double mu_storm = 0.6;
    double mu_moisture = 0.3;
    double sigma_body = 0.8;

    double ext_bias = -4.5;
    double ext_storm = 1.5;
    double alpha_tail = 2.5;
    double tail_scale = 2.0;

    double pixel_noise = 0.3;
    double land_fraction = 0.6;
    std::size_t mask_smooth_passes = 6;
    std::uint64_t seed = 11;

    std::size_t fine_rows() const { return coarse_rows * up_rows; }
    std::size_t fine_cols() const { return coarse_cols * up_cols; }

    template <class F>
    void visit(F&& f)
    {
        f("coarse_rows", coarse_rows);
        f("coarse_cols", coarse_cols);
        f("up_rows", up_rows);
        f("up_cols", up_cols);
        f("channels", channels);
        f("storm_day_sigma", storm_day_sigma);
        f("storm_local_sigma", storm_local_sigma);
        f("smooth_passes", smooth_passes);
        f("moisture_corr", moisture_corr);
        f("dry_bias", dry_bias);
        f("dry_storm", dry_storm);
        f("dry_moisture", dry_moisture);
        f("mu_bias", mu_bias);
        f("mu_storm", mu_storm);
        f("mu_moisture", mu_moisture);
        f("sigma_body", sigma_body);
        f("ext_bias", ext_bias);
        f("ext_storm", ext_storm);
        f("alpha_tail", alpha_tail);
        f("tail_scale", tail_scale);
        f("pixel_noise", pixel_noise);
        f("land_fraction", land_fraction);
        f("mask_smooth_passes", mask_smooth_passes);
        f("seed", seed);
    }

    void validate() const
    {
        require(coarse_rows >= 2 && coarse_cols >= 2, ErrorKind::config, "world: coarse grid must be at least 2x2");
        require(up_rows >= 1 && up_cols >= 1, ErrorKind::config, "world: upsample factors must be >= 1");
        require(channels >= 2, ErrorKind::config, "world: need at least storm and moisture channels");
        require(storm_day_sigma > 0.0 || storm_local_sigma > 0.0, ErrorKind::data,
                "world: storm channel has zero variance");
        require(moisture_corr > -1.0 && moisture_corr < 1.0, ErrorKind::data,
                "world: |moisture_corr| must be < 1 (zero-variance moisture otherwise)");
        require(sigma_body > 0.0, ErrorKind::config, "world: sigma_body must be > 0");
        require(alpha_tail > 1.0, ErrorKind::config, "world: alpha_tail must exceed 1");
        require(tail_scale > 0.0, ErrorKind::config, "world: tail_scale must be > 0");
        require(pixel_noise >= 0.0, ErrorKind::config, "world: pixel_noise must be >= 0");
        require(land_fraction > 0.0 && land_fraction <= 1.0, ErrorKind::config, "world: land_fraction must be in (0,1]");
    }
};

struct SampleRecord {
    std::size_t index = 0;
    bool synthetic = false;
    Tensor coarse;                // [C, H, W], z-normalized per channel
    Tensor target;                // [H', W'], mm/day
    std::optional<Tensor> oracle; // [K, H', W'], mm/day
};

struct Dataset {
    WorldConfig world;
    QuantileLevels levels;
    NormStats stats;
    Tensor mask; // [H', W'], shared by every sample
    std::vector<SampleRecord> train;
    std::vector<SampleRecord> test;
    std::vector<double> marginal_levels;     // levels of the oracle marginal thresholds
    std::vector<double> marginal_thresholds; // mm/day, over masked test pixel-days

    double land_fraction() const
    {
        double s = 0.0;
        for (double m : mask.values())
            s += m;
        return s / static_cast<double>(mask.size());
    }
    bool has_oracle() const { return !test.empty() && test.front().oracle.has_value(); }
};

namespace world_detail {

enum : std::uint64_t { tag_sample = 0x53414d50, tag_mask = 0x4d41534b, tag_aug = 0x41554747 };

// In-place 3x3 box blur with clamped edges.
inline void box_blur(std::vector<double>& f, std::size_t H, std::size_t W, std::size_t passes)
{
    std::vector<double> tmp(f.size());
    for (std::size_t p = 0; p < passes; ++p) {
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                double s = 0.0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const auto ii = static_cast<std::size_t>(
                            std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(i) + di, 0,
                                                       static_cast<std::ptrdiff_t>(H) - 1));
                        const auto jj = static_cast<std::size_t>(
                            std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(j) + dj, 0,
                                                       static_cast<std::ptrdiff_t>(W) - 1));
                        s += f[ii * W + jj];
                    }
                tmp[i * W + j] = s / 9.0;
            }
        f.swap(tmp);
    }
}

inline std::vector<double> smooth_field(Stream& s, std::size_t H, std::size_t W, std::size_t passes)
{
    std::vector<double> f(H * W);
    for (double& v : f)
        v = s.normal();
    box_blur(f, H, W, passes);
    double m = 0.0, v2 = 0.0;
    for (double v : f)
        m += v;
    m /= static_cast<double>(f.size());
    for (double v : f)
        v2 += (v - m) * (v - m);
    const double sd = std::sqrt(v2 / static_cast<double>(f.size()));
    for (double& v : f)
        v = sd > 0 ? (v - m) / sd : 0.0;
    return f;
}

inline std::vector<double> bilinear(const std::vector<double>& f, std::size_t H, std::size_t W, std::size_t fr,
                                    std::size_t fc)
{
    const auto tr = detail::bilinear_taps(H, fr);
    const auto tc = detail::bilinear_taps(W, fc);
    const std::size_t Ho = H * fr, Wo = W * fc;
    std::vector<double> out(Ho * Wo);
    for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
            const double a = tr.w1[i], b = tc.w1[j];
            const double top = (1 - b) * f[tr.i0[i] * W + tc.i0[j]] + b * f[tr.i0[i] * W + tc.i1[j]];
            const double bot = (1 - b) * f[tr.i1[i] * W + tc.i0[j]] + b * f[tr.i1[i] * W + tc.i1[j]];
            out[i * Wo + j] = (1 - a) * top + a * bot;
        }
    return out;
}

/// Raw (unnormalized) day: coarse fields and the per-pixel conditional laws.
struct RawDay {
    Tensor coarse;              // [C, H, W]
    std::vector<PixelLaw> laws; // H' * W'
};

inline RawDay draw_day(const WorldConfig& w, Stream& s, double ext_boost)
{
    const std::size_t H = w.coarse_rows, W = w.coarse_cols, C = w.channels;
    RawDay day;
    day.coarse = Tensor({C, H, W});
    const double g = w.storm_day_sigma * s.normal();
    const auto local = smooth_field(s, H, W, w.smooth_passes);
    const auto moist = smooth_field(s, H, W, w.smooth_passes);
    std::vector<double> storm(H * W), moisture(H * W);
    const double rc = std::sqrt(1.0 - w.moisture_corr * w.moisture_corr);
    for (std::size_t i = 0; i < H * W; ++i) {
        storm[i] = g + w.storm_local_sigma * local[i];
        moisture[i] = w.moisture_corr * storm[i] + rc * moist[i];
        day.coarse[i] = storm[i];
        day.coarse[H * W + i] = moisture[i];
    }
    for (std::size_t c = 2; c < C; ++c) {
        const auto bg = smooth_field(s, H, W, w.smooth_passes);
        std::copy(bg.begin(), bg.end(), day.coarse.data() + c * H * W);
    }
    const auto sf = bilinear(storm, H, W, w.up_rows, w.up_cols);
    const auto mf = bilinear(moisture, H, W, w.up_rows, w.up_cols);
    day.laws.resize(sf.size());
    for (std::size_t p = 0; p < sf.size(); ++p) {
        const double st = sf[p] + w.pixel_noise * s.normal();
        PixelLaw& law = day.laws[p];
        law.p_dry = logistic(w.dry_bias + w.dry_storm * st + w.dry_moisture * mf[p]);
        law.mu = w.mu_bias + w.mu_storm * st + w.mu_moisture * mf[p];
        law.sigma = w.sigma_body;
        law.q_ext = std::min(1.0, ext_boost * logistic(w.ext_bias + w.ext_storm * st));
        law.alpha_tail = w.alpha_tail;
        law.tail_scale = w.tail_scale;
    }
    return day;
}

inline Tensor draw_target(const std::vector<PixelLaw>& laws, Stream& s, std::size_t Hf, std::size_t Wf)
{
    Tensor t({Hf, Wf});
    for (std::size_t p = 0; p < laws.size(); ++p)
        t[p] = laws[p].sample(s);
    return t;
}

inline Tensor make_mask(const WorldConfig& w)
{
    const std::size_t Hf = w.fine_rows(), Wf = w.fine_cols();
    Stream s(derive_seed(w.seed, tag_mask, 0));
    std::vector<double> f(Hf * Wf);
    for (double& v : f)
        v = s.normal();
    box_blur(f, Hf, Wf, w.mask_smooth_passes);
    std::vector<std::size_t> order(f.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f[a] > f[b]; });
    const auto land = static_cast<std::size_t>(std::llround(w.land_fraction * static_cast<double>(f.size())));
    Tensor mask({Hf, Wf});
    for (std::size_t i = 0; i < std::max<std::size_t>(land, 1); ++i)
        mask[order[i]] = 1.0;
    return mask;
}

} // namespace world_detail

/// Marginal tau-quantile of the pooled mixture sum_i F_i / n (exact up to the
/// bisection tolerance).
inline double marginal_quantile(const std::vector<PixelLaw>& laws, double tau)
{
    require(!laws.empty(), ErrorKind::data, "marginal_quantile: no pixel laws");
    auto F = [&](double y) {
        double s = 0.0;
        for (const PixelLaw& l : laws)
            s += l.cdf(y);
        return s / static_cast<double>(laws.size());
    };
    if (F(0.0) >= tau)
        return 0.0;
    double lo = 0.0, hi = 1.0;
    while (F(hi) < tau) {
        lo = hi;
        hi *= 2.0;
    }
    while (hi - lo > 1e-6 * std::max(1.0, hi)) {
        const double mid = 0.5 * (lo + hi);
        (F(mid) < tau ? lo : hi) = mid;
    }
    return hi;
}

/// Z-scores coarse inputs per channel and computes log1p-target statistics,
/// both from the training split only. Returns the statistics used.
inline NormStats fit_normalization(const std::vector<SampleRecord>& train, const Tensor& mask)
{
    require(!train.empty(), ErrorKind::data, "normalize: empty training split");
    const std::size_t C = train[0].coarse.dim(0);
    const std::size_t HW = train[0].coarse.size() / C;
    NormStats st;
    st.input_mean.assign(C, 0.0);
    st.input_std.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        long double s = 0, s2 = 0;
        for (const auto& r : train)
            for (std::size_t i = 0; i < HW; ++i)
                s += r.coarse[c * HW + i];
        const long double n = static_cast<long double>(train.size() * HW);
        const long double m = s / n;
        for (const auto& r : train)
            for (std::size_t i = 0; i < HW; ++i) {
                const long double d = r.coarse[c * HW + i] - m;
                s2 += d * d;
            }
        st.input_mean[c] = static_cast<double>(m);
        st.input_std[c] = static_cast<double>(std::sqrt(s2 / n));
    }
    long double s = 0, s2 = 0, n = 0;
    for (const auto& r : train)
        for (std::size_t p = 0; p < mask.size(); ++p)
            if (mask[p] > 0) {
                s += std::log1p(r.target[p]);
                n += 1;
            }
    const long double m = s / n;
    for (const auto& r : train)
        for (std::size_t p = 0; p < mask.size(); ++p)
            if (mask[p] > 0) {
                const long double d = std::log1p(r.target[p]) - m;
                s2 += d * d;
            }
    st.target_mean = static_cast<double>(m);
    st.target_std = static_cast<double>(std::sqrt(s2 / n));
    st.validate();
    return st;
}

inline void normalize_inputs(std::vector<SampleRecord>& recs, const NormStats& st)
{
    for (auto& r : recs) {
        const std::size_t C = r.coarse.dim(0), HW = r.coarse.size() / C;
        require(C == st.input_mean.size(), ErrorKind::shape, "normalize: channel count mismatch");
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i)
                r.coarse[c * HW + i] = (r.coarse[c * HW + i] - st.input_mean[c]) / st.input_std[c];
    }
}

inline void denormalize_inputs(std::vector<SampleRecord>& recs, const NormStats& st)
{
    for (auto& r : recs) {
        const std::size_t C = r.coarse.dim(0), HW = r.coarse.size() / C;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i)
                r.coarse[c * HW + i] = r.coarse[c * HW + i] * st.input_std[c] + st.input_mean[c];
    }
}

namespace world_detail {

inline SampleRecord make_record(const WorldConfig& w, const QuantileLevels& levels, std::size_t index,
                                bool with_oracle, std::vector<PixelLaw>* laws_out)
{
    Stream s(derive_seed(w.seed, tag_sample, index));
    RawDay day = draw_day(w, s, 1.0);
    SampleRecord r;
    r.index = index;
    r.coarse = std::move(day.coarse);
    r.target = draw_target(day.laws, s, w.fine_rows(), w.fine_cols());
    if (with_oracle) {
        const std::size_t K = levels.size(), P = day.laws.size();
        Tensor o({K, w.fine_rows(), w.fine_cols()});
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t k = 0; k < K; ++k)
                o[k * P + p] = day.laws[p].quantile(levels.taus[k]);
        r.oracle = std::move(o);
    }
    if (laws_out)
        *laws_out = std::move(day.laws);
    return r;
}

} // namespace world_detail

struct GenerateOptions {
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    bool oracle = true;
    QuantileLevels levels;
    std::vector<double> marginal_levels{0.95, 0.99, 0.999};
    std::size_t threads = 1;
};

/// Draws a dataset; oracle quantiles are attached to test samples only.
/// Sample i uses the stream derive_seed(seed, "SAMP", i), so
/// every sample is reproducible on its own. Inputs come back normalized.
inline Dataset generate_dataset(const WorldConfig& w, const GenerateOptions& opt)
{
    w.validate();
    opt.levels.validate();
    require(opt.n_train >= 1, ErrorKind::config, "generate: need at least one training sample");
    Dataset ds;
    ds.world = w;
    ds.levels = opt.levels;
    ds.mask = world_detail::make_mask(w);
    const std::size_t total = opt.n_train + opt.n_test;
    std::vector<SampleRecord> recs(total);
    std::vector<std::vector<PixelLaw>> laws(opt.n_test);
    // Samples are independent streams; workers take interleaved indices.
    auto work = [&](std::size_t t, std::size_t stride) {
        for (std::size_t i = t; i < total; i += stride) {
            const bool test = i >= opt.n_train;
            recs[i] = world_detail::make_record(w, opt.levels, i, test && opt.oracle,
                                                test ? &laws[i - opt.n_train] : nullptr);
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(opt.threads, 1, std::max<std::size_t>(total, 1));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        std::exception_ptr err;
        std::mutex err_mutex;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                try {
                    work(t, threads);
                } catch (...) {
                    std::lock_guard lock(err_mutex);
                    err = std::current_exception();
                }
            });
        for (auto& th : pool)
            th.join();
        if (err)
            std::rethrow_exception(err);
    }
    ds.train.assign(std::make_move_iterator(recs.begin()),
                    std::make_move_iterator(recs.begin() + static_cast<std::ptrdiff_t>(opt.n_train)));
    ds.test.assign(std::make_move_iterator(recs.begin() + static_cast<std::ptrdiff_t>(opt.n_train)),
                   std::make_move_iterator(recs.end()));
    std::vector<PixelLaw> pooled;
    for (const auto& day : laws)
        for (std::size_t p = 0; p < day.size(); ++p)
            if (ds.mask[p] > 0)
                pooled.push_back(day[p]);
    ds.stats = fit_normalization(ds.train, ds.mask);
    normalize_inputs(ds.train, ds.stats);
    normalize_inputs(ds.test, ds.stats);
    if (opt.oracle && !pooled.empty()) {
        ds.marginal_levels = opt.marginal_levels;
        for (double t : opt.marginal_levels)
            ds.marginal_thresholds.push_back(marginal_quantile(pooled, t));
    }
    return ds;
}

/// Mean of y over wet (> 1 mm/day) masked pixel-days of the training split.
inline double mean_wet_intensity(const Dataset& ds, bool include_synthetic = false)
{
    long double s = 0, n = 0;
    for (const auto& r : ds.train) {
        if (r.synthetic && !include_synthetic)
            continue;
        for (std::size_t p = 0; p < ds.mask.size(); ++p)
            if (ds.mask[p] > 0 && r.target[p] > 1.0) {
                s += r.target[p];
                n += 1;
            }
    }
    return n > 0 ? static_cast<double>(s / n) : 0.0;
}

inline double masked_spatial_mean(const Tensor& target, const Tensor& mask)
{
    double s = 0.0, n = 0.0;
    for (std::size_t p = 0; p < mask.size(); ++p)
        if (mask[p] > 0) {
            s += target[p];
            n += 1;
        }
    return s / n;
}

struct AugmentConfig {
    double boost = 20.0;               // multiplier on the extreme-branch probability
    double min_intensity_ratio = 1.03; // acceptance filter vs. mean wet-day intensity
    std::size_t max_attempts = 200000;
};

inline std::size_t augmentation_count(double ratio, std::size_t n)
{
    return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
}

/// Appends ceil(ratio * n_train) flagged synthetic training days drawn with a
/// boosted extreme branch, keeping only days whose masked spatial mean exceeds
/// min_intensity_ratio times the mean wet-day intensity. Candidate j of the
/// search uses stream derive_seed(seed, "AUGG", j).
inline Dataset inject_augmentation(const Dataset& ds, double ratio, const AugmentConfig& cfg)
{
    require(ratio >= 0.0 && ratio < 1.0, ErrorKind::config, "augmentation ratio must be in [0,1)");
    require(cfg.boost >= 0.0, ErrorKind::config, "augmentation boost must be >= 0");
    Dataset out = ds;
    const std::size_t n_real = static_cast<std::size_t>(
        std::count_if(ds.train.begin(), ds.train.end(), [](const SampleRecord& r) { return !r.synthetic; }));
    const std::size_t want = augmentation_count(ratio, n_real);
    if (want == 0)
        return out;
    const double floor_mm = cfg.min_intensity_ratio * mean_wet_intensity(ds);
    const WorldConfig& w = ds.world;
    std::size_t attempt = 0, made = 0;
    std::size_t next_index = ds.train.size() + ds.test.size();
    std::vector<SampleRecord> fresh;
    while (made < want) {
        require(attempt < cfg.max_attempts, ErrorKind::data,
                "augmentation: intensity filter rejected " + std::to_string(attempt) + " candidates");
        Stream s(derive_seed(w.seed, world_detail::tag_aug, attempt++));
        auto day = world_detail::draw_day(w, s, cfg.boost);
        Tensor target = world_detail::draw_target(day.laws, s, w.fine_rows(), w.fine_cols());
        if (masked_spatial_mean(target, ds.mask) <= floor_mm)
            continue;
        SampleRecord r;
        r.index = next_index++;
        r.synthetic = true;
        r.coarse = std::move(day.coarse);
        r.target = std::move(target);
        fresh.push_back(std::move(r));
        ++made;
    }
    normalize_inputs(fresh, ds.stats);
    for (auto& r : fresh)
        out.train.push_back(std::move(r));
    return out;
}

} // namespace qdown
