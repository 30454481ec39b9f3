#pragma once

// Super-resolution backbone with interchangeable output heads.
//
// Coarse path: stem conv -> residual blocks (conv, PReLU, spatial dropout,
// conv) -> trunk conv with a long skip -> conv + pixel shuffle to the fine
// grid. Fine path: bilinear upsampling of the raw inputs through a 1x1 conv.
// The two are summed and fed to the head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "qdown/norm.hpp"
#include "qdown/ops.hpp"
#include "qdown/stats.hpp"

namespace qdown {

struct BackboneConfig {
    std::size_t in_channels = 3;
    std::size_t blocks = 4;
    std::size_t filters = 32;
    std::size_t fine_filters = 8;
    std::size_t up_rows = 4;
    std::size_t up_cols = 4;
    std::size_t kernel = 3;
    std::size_t head_kernel = 5;
    double dropout = 0.1;
    // Hidden width of an extra conv+PReLU in front of the top-level head
    // (increment_separate only). 0 disables it.
    std::size_t deep_top_head = 0;

    void validate() const
    {
        require(in_channels >= 1 && filters >= 1 && fine_filters >= 1, ErrorKind::config,
                "backbone: channel counts must be positive");
        require(up_rows >= 1 && up_cols >= 1, ErrorKind::config, "backbone: upsample factors must be >= 1");
        require(kernel % 2 == 1 && head_kernel % 2 == 1, ErrorKind::config, "backbone: kernel sizes must be odd");
        require(dropout >= 0.0 && dropout < 1.0, ErrorKind::config, "backbone: dropout must be in [0,1)");
    }

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

enum class HeadKind { deterministic, increment_separate, increment_shared, shared_sorted, shared_unconstrained };

inline std::string_view to_string(HeadKind h)
{
    switch (h) {
    case HeadKind::deterministic: return "deterministic";
    case HeadKind::increment_separate: return "increment_separate";
    case HeadKind::increment_shared: return "increment_shared";
    case HeadKind::shared_sorted: return "shared_sorted";
    case HeadKind::shared_unconstrained: return "shared_unconstrained";
    }
    return "?";
}

inline HeadKind parse_head(std::string_view s)
{
    for (HeadKind h : {HeadKind::deterministic, HeadKind::increment_separate, HeadKind::increment_shared,
                       HeadKind::shared_sorted, HeadKind::shared_unconstrained})
        if (s == to_string(h))
            return h;
    fail(ErrorKind::config, "unknown head kind '" + std::string(s) + "'");
}

struct QuantileLevels {
    std::vector<double> taus{0.50, 0.95, 0.99, 0.999};

    void validate() const
    {
        for (std::size_t i = 0; i < taus.size(); ++i) {
            require(taus[i] > 0.0 && taus[i] < 1.0, ErrorKind::config, "quantile levels must lie in (0,1)");
            require(i == 0 || taus[i] > taus[i - 1], ErrorKind::config, "quantile levels must be strictly increasing");
        }
    }
    std::size_t size() const noexcept { return taus.size(); }

    friend bool operator==(const QuantileLevels&, const QuantileLevels&) = default;
};

/// Bounded median plus cumulative softplus increments over the channel axis:
/// q0 = 8 tanh(r0 / 8), qk = q(k-1) + softplus(rk).
inline Var increment_bound(Var raw)
{
    detail::need_rank("increment_bound", raw, 4);
    const std::size_t K = raw.shape()[1];
    std::vector<Var> q;
    q.push_back(scale(tanh(scale(slice(raw, 1, 0, 1), 1.0 / 8.0)), 8.0));
    for (std::size_t k = 1; k < K; ++k)
        q.push_back(add(q.back(), softplus(slice(raw, 1, k, 1))));
    return K == 1 ? q[0] : concat(q, 1);
}

/// Scalar form of increment_bound for one pixel.
inline std::vector<double> increment_bound(std::span<const double> r)
{
    std::vector<double> q(r.size());
    if (r.empty())
        return q;
    q[0] = 8.0 * std::tanh(r[0] / 8.0);
    for (std::size_t k = 1; k < r.size(); ++k)
        q[k] = q[k - 1] + detail::softplus(r[k]);
    return q;
}

class Model {
public:
    struct Output {
        Var value; // head output in normalized target space, [N, K, H', W']
        Var raw;   // pre-head-transform channels
        std::vector<std::uint8_t> permutation; // shared_sorted only
    };

    Model(BackboneConfig cfg, HeadKind head, QuantileLevels levels, std::uint64_t seed)
        : cfg_(cfg), head_(head), levels_(std::move(levels)), seed_(seed)
    {
        cfg_.validate();
        levels_.validate();
        if (head_ != HeadKind::deterministic)
            require(levels_.size() >= 1, ErrorKind::config, "quantile head needs at least one level");
        require(cfg_.deep_top_head == 0 || head_ == HeadKind::increment_separate, ErrorKind::config,
                "deep_top_head is only available with increment_separate");
        require(cfg_.deep_top_head == 0 || levels_.size() >= 2, ErrorKind::config,
                "deep_top_head needs at least two quantile levels");
        build(seed);
    }

    const BackboneConfig& config() const noexcept { return cfg_; }
    HeadKind head() const noexcept { return head_; }
    const QuantileLevels& levels() const noexcept { return levels_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t outputs() const noexcept { return head_ == HeadKind::deterministic ? 1 : levels_.size(); }
    bool is_quantile() const noexcept { return head_ != HeadKind::deterministic; }

    std::vector<Tensor>& parameters() noexcept { return params_; }
    const std::vector<Tensor>& parameters() const noexcept { return params_; }
    const std::vector<std::string>& parameter_names() const noexcept { return names_; }

    std::size_t parameter_count(std::string_view prefix = {}) const
    {
        std::size_t n = 0;
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (names_[i].starts_with(prefix))
                n += params_[i].size();
        return n;
    }

    /// Records the forward pass of x ([N, C, H, W], normalized inputs) on g.
    Output forward(Graph& g, const Tensor& x)
    {
        require(x.rank() == 4 && x.dim(1) == cfg_.in_channels, ErrorKind::shape,
                "model input " + shape_str(x.shape()) + " does not match " + std::to_string(cfg_.in_channels) +
                    " input channels");
        auto P = [&](std::size_t i) { return g.parameter(params_[i]); };
        auto conv = [&](Var in, const ConvIdx& c) { return conv2d(in, P(c.w), P(c.b)); };

        Var in = g.constant(x);
        Var h0 = prelu(conv(in, stem_), P(stem_act_));
        Var h = h0;
        for (const Block& b : blocks_) {
            Var t = prelu(conv(h, b.c1), P(b.act));
            t = spatial_dropout(t, cfg_.dropout);
            t = conv(t, b.c2);
            h = add(h, t);
        }
        h = add(conv(h, trunk_), h0);
        Var u = prelu(pixel_shuffle(conv(h, up_), cfg_.up_rows, cfg_.up_cols), P(up_act_));
        Var s = conv(upsample_bilinear(in, cfg_.up_rows, cfg_.up_cols), skip_);
        Var f = add(u, s);

        Output out;
        if (head_ == HeadKind::increment_separate) {
            const std::size_t K = heads_.size();
            const std::size_t plain = deep_ ? K - 1 : K;
            std::vector<Var> ws, bs;
            for (std::size_t k = 0; k < plain; ++k) {
                ws.push_back(P(heads_[k].w));
                bs.push_back(P(heads_[k].b));
            }
            // Independent head tensors, evaluated in one convolution.
            Var raw = plain == 1 ? conv2d(f, ws[0], bs[0]) : conv2d(f, concat(ws, 0), concat(bs, 0));
            if (deep_) {
                Var hidden = prelu(conv(f, deep_->conv), P(deep_->act));
                raw = concat({raw, conv(hidden, heads_.back())}, 1);
            }
            out.raw = raw;
        } else {
            out.raw = conv(f, heads_.front());
        }

        switch (head_) {
        case HeadKind::deterministic:
        case HeadKind::shared_unconstrained: out.value = out.raw; break;
        case HeadKind::increment_separate:
        case HeadKind::increment_shared: out.value = increment_bound(out.raw); break;
        case HeadKind::shared_sorted: out.value = sort_channels(out.raw, &out.permutation); break;
        }
        return out;
    }

    /// Eval-mode forward, returning the normalized head output.
    Tensor predict(const Tensor& x)
    {
        Graph g(false);
        return forward(g, x).value.value();
    }

private:
    struct ConvIdx {
        std::size_t w = 0, b = 0;
    };
    struct Block {
        ConvIdx c1, c2;
        std::size_t act = 0;
    };
    struct DeepHead {
        ConvIdx conv;
        std::size_t act = 0;
    };

    ConvIdx add_conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, std::mt19937_64& rng)
    {
        const double stdev = std::sqrt(2.0 / static_cast<double>(in * k * k));
        std::normal_distribution<double> nd(0.0, stdev);
        Tensor w({out, in, k, k});
        for (double& v : w.values())
            v = nd(rng);
        ConvIdx c;
        c.w = push(name + ".w", std::move(w));
        c.b = push(name + ".b", Tensor({out}));
        return c;
    }

    std::size_t add_act(const std::string& name, std::size_t channels)
    {
        return push(name + ".a", Tensor({channels}, 0.1));
    }

    std::size_t push(std::string name, Tensor t)
    {
        names_.push_back(std::move(name));
        params_.push_back(std::move(t));
        return params_.size() - 1;
    }

    void build(std::uint64_t seed)
    {
        std::mt19937_64 rng(seed);
        const std::size_t F = cfg_.filters, Fu = cfg_.fine_filters, k = cfg_.kernel;
        stem_ = add_conv("stem", F, cfg_.in_channels, k, rng);
        stem_act_ = add_act("stem", F);
        for (std::size_t i = 0; i < cfg_.blocks; ++i) {
            const std::string n = "block" + std::to_string(i);
            Block b;
            b.c1 = add_conv(n + ".conv1", F, F, k, rng);
            b.act = add_act(n + ".act1", F);
            b.c2 = add_conv(n + ".conv2", F, F, k, rng);
            blocks_.push_back(b);
        }
        trunk_ = add_conv("trunk", F, F, k, rng);
        up_ = add_conv("up", Fu * cfg_.up_rows * cfg_.up_cols, F, k, rng);
        up_act_ = add_act("up", Fu);
        skip_ = add_conv("skip", Fu, cfg_.in_channels, 1, rng);

        const std::size_t hk = cfg_.head_kernel;
        switch (head_) {
        case HeadKind::deterministic: heads_.push_back(add_conv("head", 1, Fu, hk, rng)); break;
        case HeadKind::increment_shared:
        case HeadKind::shared_sorted:
        case HeadKind::shared_unconstrained: heads_.push_back(add_conv("head", levels_.size(), Fu, hk, rng)); break;
        case HeadKind::increment_separate: {
            const std::size_t K = levels_.size();
            for (std::size_t q = 0; q + 1 < K; ++q)
                heads_.push_back(add_conv("head" + std::to_string(q), 1, Fu, hk, rng));
            if (cfg_.deep_top_head > 0) {
                DeepHead d;
                d.conv = add_conv("deep", cfg_.deep_top_head, Fu, 3, rng);
                d.act = add_act("deep", cfg_.deep_top_head);
                deep_ = d;
                heads_.push_back(add_conv("head" + std::to_string(K - 1), 1, cfg_.deep_top_head, hk, rng));
            } else {
                heads_.push_back(add_conv("head" + std::to_string(K - 1), 1, Fu, hk, rng));
            }
            break;
        }
        }
    }

    BackboneConfig cfg_;
    HeadKind head_;
    QuantileLevels levels_;
    std::uint64_t seed_;
    std::vector<Tensor> params_;
    std::vector<std::string> names_;

    ConvIdx stem_, trunk_, up_, skip_;
    std::size_t stem_act_ = 0, up_act_ = 0;
    std::vector<Block> blocks_;
    std::vector<ConvIdx> heads_;
    std::optional<DeepHead> deep_;
};

/// Per-pixel order statistic of `members` (each [N, C, H, W], channel 0 used)
/// at every level; result is [N, L, H, W].
inline Tensor empirical_quantile_field(const std::vector<Tensor>& members, const QuantileLevels& levels)
{
    require(!members.empty(), ErrorKind::data, "empirical_quantile_field: no members");
    const Shape& s = members[0].shape();
    const std::size_t N = s[0], C = s[1], HW = s[2] * s[3], L = levels.size();
    Tensor out({N, L, s[2], s[3]});
    std::vector<double> sample(members.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) {
            for (std::size_t m = 0; m < members.size(); ++m)
                sample[m] = members[m][n * C * HW + p];
            std::sort(sample.begin(), sample.end());
            for (std::size_t l = 0; l < L; ++l) {
                const auto M = static_cast<double>(sample.size());
                auto k = static_cast<std::size_t>(std::ceil(levels.taus[l] * M - 1e-12));
                k = std::clamp<std::size_t>(k, 1, sample.size());
                out[(n * L + l) * HW + p] = sample[k - 1];
            }
        }
    return out;
}

/// Empirical quantiles over `passes` train-mode (dropout active) forward passes.
inline Tensor mc_dropout_predict(Model& model, const Tensor& x, std::size_t passes, const QuantileLevels& levels,
                                 std::uint64_t seed)
{
    require(passes >= 2, ErrorKind::config, "mc_dropout_predict: need at least 2 passes");
    levels.validate();
    std::vector<Tensor> draws;
    for (std::size_t k = 0; k < passes; ++k) {
        Graph g(true, derive_seed(seed, 0x6d63, k));
        draws.push_back(model.forward(g, x).value.value());
    }
    return empirical_quantile_field(draws, levels);
}

/// Empirical quantiles across ensemble members built with identical configs.
inline Tensor ensemble_predict(std::vector<Model>& members, const Tensor& x, const QuantileLevels& levels)
{
    require(members.size() >= 2, ErrorKind::config, "ensemble_predict: need at least 2 members");
    levels.validate();
    for (const Model& m : members)
        require(m.config() == members[0].config() && m.head() == members[0].head() &&
                    m.levels() == members[0].levels(),
                ErrorKind::config, "ensemble_predict: member configurations differ");
    std::vector<Tensor> preds;
    for (Model& m : members)
        preds.push_back(m.predict(x));
    return empirical_quantile_field(preds, levels);
}

/// Default physical caps (mm/day): 600 for levels up to 0.95, 1200 above.
inline std::vector<double> default_caps(const QuantileLevels& levels, std::size_t channels)
{
    if (channels == 1 && levels.size() != 1)
        return {1200.0};
    std::vector<double> caps;
    for (double t : levels.taus)
        caps.push_back(t <= 0.95 ? 600.0 : 1200.0);
    return caps;
}

/// Normalized head output -> mm/day: inverse z-score, expm1, clamp to [0, cap].
inline Tensor postprocess(const Tensor& pred, const NormStats& stats, const std::vector<double>& caps)
{
    require(pred.rank() == 4 && pred.dim(1) == caps.size(), ErrorKind::shape,
            "postprocess: " + std::to_string(caps.size()) + " caps for prediction " + shape_str(pred.shape()));
    for (std::size_t i = 1; i < caps.size(); ++i)
        require(caps[i] >= caps[i - 1], ErrorKind::config, "postprocess: caps must be non-decreasing in tau");
    const std::size_t N = pred.dim(0), K = pred.dim(1), HW = pred.dim(2) * pred.dim(3);
    Tensor out(pred.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t p = 0; p < HW; ++p) {
                const std::size_t i = (n * K + k) * HW + p;
                out[i] = std::clamp(stats.z_to_target(pred[i]), 0.0, caps[k]);
            }
    return out;
}

} // namespace qdown
