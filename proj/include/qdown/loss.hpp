#pragma once

// Training objectives: masked multi-level pinball loss with per-level event
// weighting, and the intensity-weighted MAE used by the point-prediction
// baseline.

#include <algorithm>
#include <cmath>
#include <vector>

#include "qdown/model.hpp"
#include "qdown/ops.hpp"

namespace qdown {

inline double pinball(double e, double tau)
{
    require(tau > 0.0 && tau < 1.0, ErrorKind::config, "pinball: tau must lie in (0,1)");
    return std::max(tau * e, (tau - 1.0) * e);
}

struct EventWeightConfig {
    double alpha = 5.0;
    double z_thresh = 0.5;        // log1p z-score units
    std::vector<double> exempt{0.50};

    void validate(const QuantileLevels& levels) const
    {
        require(alpha >= 0.0, ErrorKind::config, "event weight: alpha must be >= 0");
        for (double t : exempt)
            require(std::find(levels.taus.begin(), levels.taus.end(), t) != levels.taus.end(), ErrorKind::config,
                    "event weight: exempt level " + std::to_string(t) + " is not a configured level");
    }

    bool is_exempt(double tau) const { return std::find(exempt.begin(), exempt.end(), tau) != exempt.end(); }
};

/// 1 + alpha * [y_z > z_thresh] for non-exempt levels, 1 for exempt ones.
inline double event_weight(double y_z, double tau, const EventWeightConfig& cfg)
{
    if (cfg.is_exempt(tau))
        return 1.0;
    return 1.0 + (y_z > cfg.z_thresh ? cfg.alpha : 0.0);
}

struct MaeWeightConfig {
    double scale = 11.7; // mm/day
    double floor = 0.1;
    double ceiling = 2.0;

    void validate() const
    {
        require(scale > 0.0 && floor > 0.0 && floor < ceiling, ErrorKind::config,
                "mae weight: need scale > 0 and 0 < floor < ceiling");
    }
};

inline double mae_weight(double y_mm, const MaeWeightConfig& cfg)
{
    return std::clamp(y_mm / cfg.scale, cfg.floor, cfg.ceiling);
}

/// Pinball loss applied elementwise to a residual field. Zero residuals get
/// zero gradient.
inline Var pinball(Var residual, double tau)
{
    require(tau > 0.0 && tau < 1.0, ErrorKind::config, "pinball: tau must lie in (0,1)");
    return elementwise(
        residual, [tau](double e) { return std::max(tau * e, (tau - 1.0) * e); },
        [tau](double e, double) { return e > 0 ? tau : (e < 0 ? tau - 1.0 : 0.0); });
}

/// Sum over levels of the masked, event-weighted mean pinball loss.
/// pred: [N, K, H, W] in normalized space; target_z: [N, 1, H, W]; the mask
/// is either [N, 1, H, W] or one [H, W] plane broadcast over the batch.
inline Var masked_quantile_loss(Var pred, const Tensor& target_z, const Tensor& mask, const QuantileLevels& levels,
                                const EventWeightConfig& cfg)
{
    const Shape& ps = pred.shape();
    require(ps.size() == 4 && ps[1] == levels.size(), ErrorKind::shape,
            "quantile loss: prediction " + shape_str(ps) + " vs " + std::to_string(levels.size()) + " levels");
    require(target_z.shape() == Shape{ps[0], 1, ps[2], ps[3]}, ErrorKind::shape,
            "quantile loss: target " + shape_str(target_z.shape()) + " vs prediction " + shape_str(ps));
    Graph& g = *pred.graph;
    Var y = g.constant(target_z);
    Var total{};
    for (std::size_t k = 0; k < levels.size(); ++k) {
        const double tau = levels.taus[k];
        Var rho = pinball(sub(y, slice(pred, 1, k, 1)), tau);
        if (!cfg.is_exempt(tau) && cfg.alpha != 0.0) {
            Tensor w(target_z.shape());
            for (std::size_t i = 0; i < w.size(); ++i)
                w[i] = event_weight(target_z[i], tau, cfg);
            rho = mul(rho, g.constant(std::move(w)));
        }
        Var term = masked_mean(rho, mask);
        total = k == 0 ? term : add(total, term);
    }
    return total;
}

/// Masked mean of w(y_mm) * |y_z - pred|. The residual is taken in the same
/// normalized space as the prediction; the weight uses physical units.
inline Var weighted_mae(Var pred, const Tensor& target_z, const Tensor& target_mm, const Tensor& mask,
                        const MaeWeightConfig& cfg)
{
    cfg.validate();
    require(pred.shape() == target_z.shape() && target_z.shape() == target_mm.shape(), ErrorKind::shape,
            "weighted mae: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target_z.shape()));
    Graph& g = *pred.graph;
    Tensor w(target_mm.shape());
    for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = mae_weight(target_mm[i], cfg);
    Var r = abs(sub(g.constant(target_z), pred));
    return masked_mean(mul(r, g.constant(std::move(w))), mask);
}

} // namespace qdown
