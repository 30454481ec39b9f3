#pragma once

// Mini-batch training and test-split evaluation.
//
// Randomness in a run comes from two derived streams of the run seed:
// the epoch-e shuffle uses derive_seed(seed, "SHUF", e) and the dropout
// masks of optimizer step t use derive_seed(seed, "DROP", t).

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "qdown/adam.hpp"
#include "qdown/loss.hpp"
#include "qdown/model.hpp"
#include "qdown/report.hpp"
#include "qdown/world.hpp"

namespace qdown {

struct TrainOptions {
    std::size_t epochs = 40;
    std::size_t batch = 16;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;
    EventWeightConfig event;
    MaeWeightConfig mae;
    std::uint64_t seed = 1;
};

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0; // mean batch loss over the epoch
    std::size_t batches = 0;
    std::size_t samples = 0;
};

namespace train_detail {

enum : std::uint64_t { tag_shuffle = 0x53485546, tag_dropout = 0x44524f50 };

struct Batch {
    Tensor x;         // [B, C, H, W]
    Tensor target_z;  // [B, 1, H', W']
    Tensor target_mm; // [B, 1, H', W']
};

inline Batch make_batch(const std::vector<SampleRecord>& recs, std::span<const std::size_t> idx,
                        const NormStats& stats)
{
    const Shape& cs = recs[idx[0]].coarse.shape();
    const Shape& fs = recs[idx[0]].target.shape();
    const std::size_t B = idx.size(), CHW = shape_size(cs), HW = shape_size(fs);
    Batch b{Tensor({B, cs[0], cs[1], cs[2]}), Tensor({B, 1, fs[0], fs[1]}), Tensor({B, 1, fs[0], fs[1]})};
    for (std::size_t i = 0; i < B; ++i) {
        const SampleRecord& r = recs[idx[i]];
        std::copy(r.coarse.values().begin(), r.coarse.values().end(), b.x.data() + i * CHW);
        for (std::size_t p = 0; p < HW; ++p) {
            b.target_mm[i * HW + p] = r.target[p];
            b.target_z[i * HW + p] = stats.target_to_z(r.target[p]);
        }
    }
    return b;
}

} // namespace train_detail

/// Objective of one batch, recorded on g: the masked quantile loss for a
/// quantile head, the weighted MAE for the deterministic one.
inline Var batch_loss(Model& model, Graph& g, const Tensor& x, const Tensor& target_z, const Tensor& target_mm,
                      const Tensor& mask, const TrainOptions& opt)
{
    Var pred = model.forward(g, x).value;
    if (model.is_quantile())
        return masked_quantile_loss(pred, target_z, mask, model.levels(), opt.event);
    return weighted_mae(pred, target_z, target_mm, mask, opt.mae);
}

/// Checks that the model and the dataset agree on shapes.
inline void check_compatible(const Model& model, const Dataset& ds)
{
    const BackboneConfig& b = model.config();
    const WorldConfig& w = ds.world;
    const Shape model_in{b.in_channels, w.coarse_rows, w.coarse_cols};
    const Shape data_in{w.channels, w.coarse_rows, w.coarse_cols};
    require(b.in_channels == w.channels, ErrorKind::shape,
            "model expects coarse input " + shape_str(model_in) + " but dataset provides " + shape_str(data_in));
    const Shape model_out{w.coarse_rows * b.up_rows, w.coarse_cols * b.up_cols};
    const Shape data_out{w.fine_rows(), w.fine_cols()};
    require(model_out == data_out, ErrorKind::shape,
            "model produces fine grid " + shape_str(model_out) + " but dataset target is " + shape_str(data_out));
}

/// Trains in place on ds.train (synthetic samples included). Returns one log
/// entry per epoch; `on_epoch` is called after each.
inline std::vector<EpochLog> train_model(Model& model, const Dataset& ds, const TrainOptions& opt,
                                         const std::function<void(const EpochLog&)>& on_epoch = {})
{
    using namespace train_detail;
    check_compatible(model, ds);
    require(!ds.train.empty(), ErrorKind::data, "train: empty training split");
    require(opt.epochs >= 1 && opt.batch >= 1, ErrorKind::config, "train: epochs and batch must be >= 1");
    if (model.is_quantile())
        opt.event.validate(model.levels());
    AdamState st;
    st.lr = opt.lr;
    st.beta1 = opt.beta1;
    st.beta2 = opt.beta2;
    st.epsilon = opt.epsilon;
    st.init(model.parameters());

    std::vector<std::size_t> order(ds.train.size());
    std::vector<EpochLog> log;
    std::uint64_t step = 0;
    for (std::size_t e = 1; e <= opt.epochs; ++e) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Stream sh(derive_seed(opt.seed, tag_shuffle, e));
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(sh.uniform() * static_cast<double>(i));
            std::swap(order[i - 1], order[std::min(j, i - 1)]);
        }
        EpochLog el;
        el.epoch = e;
        double sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += opt.batch) {
            const std::size_t len = std::min(opt.batch, order.size() - start);
            auto b = make_batch(ds.train, std::span(order).subspan(start, len), ds.stats);
            Graph g(true, derive_seed(opt.seed, tag_dropout, step++));
            Var loss = batch_loss(model, g, b.x, b.target_z, b.target_mm, ds.mask, opt);
            require(std::isfinite(loss.value().item()), ErrorKind::numeric,
                    "train: non-finite loss at epoch " + std::to_string(e));
            g.backward(loss);
            adam_step(model.parameters(), st);
            sum += loss.value().item();
            ++el.batches;
            el.samples += len;
        }
        el.loss = sum / static_cast<double>(el.batches);
        log.push_back(el);
        if (on_epoch)
            on_epoch(el);
    }
    return log;
}

/// Eval-mode predictions for a split, postprocessed to mm/day: [N, K, H', W'].
inline Tensor predict_split(Model& model, const std::vector<SampleRecord>& recs, const NormStats& stats,
                            std::size_t batch = 16)
{
    require(!recs.empty(), ErrorKind::data, "predict: empty split");
    const auto caps = default_caps(model.levels(), model.outputs());
    const Shape& fs = recs[0].target.shape();
    const std::size_t K = model.outputs(), plane = K * shape_size(fs);
    Tensor out({recs.size(), K, fs[0], fs[1]});
    std::vector<std::size_t> idx(recs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t start = 0; start < recs.size(); start += batch) {
        const std::size_t len = std::min(batch, recs.size() - start);
        auto b = train_detail::make_batch(recs, std::span(idx).subspan(start, len), stats);
        const Tensor y = postprocess(model.predict(b.x), stats, caps);
        std::copy(y.values().begin(), y.values().end(), out.data() + start * plane);
    }
    return out;
}

inline Tensor stack_targets(const std::vector<SampleRecord>& recs)
{
    const Shape& fs = recs.at(0).target.shape();
    const std::size_t HW = shape_size(fs);
    Tensor t({recs.size(), fs[0], fs[1]});
    for (std::size_t i = 0; i < recs.size(); ++i)
        std::copy(recs[i].target.values().begin(), recs[i].target.values().end(), t.data() + i * HW);
    return t;
}

/// Oracle quantiles of the test split as [N, K, H', W'].
inline Tensor stack_oracle(const std::vector<SampleRecord>& recs)
{
    require(!recs.empty() && recs[0].oracle, ErrorKind::data, "split has no oracle quantiles");
    const Shape& os = recs[0].oracle->shape();
    const std::size_t plane = shape_size(os);
    Tensor t({recs.size(), os[0], os[1], os[2]});
    for (std::size_t i = 0; i < recs.size(); ++i) {
        require(recs[i].oracle.has_value(), ErrorKind::data, "sample " + std::to_string(recs[i].index) + " lacks oracle");
        std::copy(recs[i].oracle->values().begin(), recs[i].oracle->values().end(), t.data() + i * plane);
    }
    return t;
}

/// Resolves threshold labels: plain numbers are mm/day, "T<digits>" is the
/// oracle marginal quantile at level 0.<digits> (T999 -> 0.999).
inline std::vector<Threshold> resolve_thresholds(const std::vector<std::string>& labels, const Dataset& ds)
{
    std::vector<Threshold> out;
    for (const std::string& l : labels) {
        if (!l.empty() && l[0] == 'T') {
            const std::string digits = l.substr(1);
            require(!digits.empty() && digits.find_first_not_of("0123456789") == std::string::npos, ErrorKind::config,
                    "threshold '" + l + "': expected T followed by digits");
            const double tau = std::stod("0." + digits);
            require(ds.has_oracle() && !ds.marginal_thresholds.empty(), ErrorKind::data,
                    "threshold '" + l + "' needs oracle quantiles, but the dataset has no oracle files");
            std::size_t k = 0;
            while (k < ds.marginal_levels.size() && std::abs(ds.marginal_levels[k] - tau) > 1e-12)
                ++k;
            require(k < ds.marginal_levels.size(), ErrorKind::data,
                    "threshold '" + l + "': dataset has no oracle marginal quantile at level " + digits);
            out.push_back({l, ds.marginal_thresholds[k]});
        } else {
            double mm = 0.0;
            try {
                std::size_t used = 0;
                mm = std::stod(l, &used);
                require(used == l.size(), ErrorKind::config, "threshold '" + l + "' is not a number");
            } catch (const std::logic_error&) {
                fail(ErrorKind::config, "threshold '" + l + "' is not a number");
            }
            require(mm > 0.0, ErrorKind::config, "threshold '" + l + "' must be > 0");
            out.push_back({l, mm});
        }
    }
    return out;
}

/// Scores the test split; `stats` are the statistics the model was trained
/// with (they map its normalized output back to mm/day).
inline MetricsReport evaluate(Model& model, const Dataset& ds, const NormStats& stats,
                              const std::vector<Threshold>& thresholds)
{
    check_compatible(model, ds);
    require(!ds.test.empty(), ErrorKind::data, "eval: empty test split");
    const Tensor pred = predict_split(model, ds.test, stats);
    const auto set =
        collect(pred, stack_targets(ds.test), ds.mask, model.is_quantile() ? model.levels().taus : std::vector<double>{});
    MetricsReport r = build_report(set, thresholds);
    r.seed = model.seed();
    return r;
}

} // namespace qdown
