#pragma once

// MetricsReport: everything computed for one evaluated configuration, plus
// its JSON and CSV forms.
//
// metrics.csv has one row per (threshold, channel) with columns
//   threshold, threshold_mm, channel, tau, hits, false_alarms, misses,
//   correct_rejections, pod, far, sedi, sedi_raw
// where channel is "point" for a deterministic model and "q<tau>" otherwise,
// sedi uses the epsilon clamp and sedi_raw the unclamped formula.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdown/verify.hpp"

namespace qdown {

struct Threshold {
    std::string label; // "5", "T999", ...
    double mm = 0.0;
};

struct ThresholdRow {
    std::string threshold;
    double threshold_mm = 0.0;
    std::string channel;
    double tau = nan_value;
    ContingencyTable table;
    double pod = nan_value;
    double far = nan_value;
    double sedi = nan_value;
    double sedi_raw = nan_value;
};

struct MetricsReport {
    nlohmann::json config; // echo of everything that produced the report
    std::uint64_t seed = 0;
    std::vector<double> taus; // empty for a point forecast
    std::uint64_t pixel_days = 0;
    std::string central_channel;
    BulkFit bulk;
    double kl = nan_value; // KL(obs || central channel), all-sky
    std::vector<double> kl_per_channel;
    std::vector<ThresholdRow> rows;
    std::vector<LevelCalibration> calibration;
    double coverage_50_99 = nan_value;
    double crps = nan_value;
    std::vector<double> band_edges;
    std::vector<double> crps_bands;
    Sharpness sharp;

    const ThresholdRow* find(const std::string& threshold, const std::string& channel) const
    {
        for (const auto& r : rows)
            if (r.threshold == threshold && r.channel == channel)
                return &r;
        return nullptr;
    }
};

inline std::string channel_name(double tau)
{
    if (std::isnan(tau))
        return "point";
    char buf[32];
    std::snprintf(buf, sizeof buf, "q%g", tau);
    return buf;
}

/// Scores a flattened split. For quantile predictions the central channel is
/// the 0.5 level when present, otherwise the first one.
inline MetricsReport build_report(const PixelSet& s, const std::vector<Threshold>& thresholds)
{
    require(s.channels() >= 1, ErrorKind::data, "report: prediction has no channels");
    require(s.size() > 0, ErrorKind::data, "report: no masked pixel-days to evaluate");
    MetricsReport r;
    r.taus = s.taus;
    r.pixel_days = s.size();
    const bool quantile = !s.taus.empty();
    const std::size_t central = quantile ? s.level(0.5).value_or(0) : 0;
    r.central_channel = channel_name(quantile ? s.taus[central] : nan_value);
    r.bulk = bulk(s.q[central], s.y);
    for (std::size_t k = 0; k < s.channels(); ++k)
        r.kl_per_channel.push_back(kl_divergence(s.q[k], s.y));
    r.kl = r.kl_per_channel[central];
    for (const Threshold& t : thresholds)
        for (std::size_t k = 0; k < s.channels(); ++k) {
            ThresholdRow row;
            row.threshold = t.label;
            row.threshold_mm = t.mm;
            row.tau = quantile ? s.taus[k] : nan_value;
            row.channel = channel_name(row.tau);
            row.table = contingency(s.q[k], s.y, t.mm);
            row.pod = pod(row.table);
            row.far = far(row.table);
            row.sedi = sedi(row.table, SediPolicy::clamp);
            row.sedi_raw = sedi(row.table, SediPolicy::none);
            r.rows.push_back(row);
        }
    r.band_edges = default_band_edges();
    if (quantile) {
        r.calibration = calibration(s);
        if (s.level(0.5) && s.level(0.99))
            r.coverage_50_99 = interval_coverage(s, 0.5, 0.99);
        r.crps = crps_proxy(s);
        r.crps_bands = crps_by_band(s, r.band_edges);
        r.sharp = sharpness(s, r.band_edges);
    }
    return r;
}

inline nlohmann::json to_json(const MetricsReport& r)
{
    using nlohmann::json;
    // NaN is emitted as null.
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    auto arr = [&](const std::vector<double>& v) {
        json a = json::array();
        for (double x : v)
            a.push_back(num(x));
        return a;
    };
    json j;
    j["config"] = r.config;
    j["seed"] = r.seed;
    j["taus"] = r.taus;
    j["pixel_days"] = r.pixel_days;
    j["central_channel"] = r.central_channel;
    j["bulk"] = {{"rmse", num(r.bulk.rmse)}, {"pearson", num(r.bulk.pearson)}};
    j["kl"] = {{"value", num(r.kl)},
               {"per_channel", arr(r.kl_per_channel)},
               {"direction", "obs||pred"},
               {"sky", "all"},
               {"binning", "[0,0.1] + 50 log bins over (0.1,1200]"}};
    json rows = json::array();
    for (const auto& x : r.rows)
        rows.push_back({{"threshold", x.threshold},
                        {"threshold_mm", num(x.threshold_mm)},
                        {"channel", x.channel},
                        {"tau", num(x.tau)},
                        {"hits", x.table.a},
                        {"false_alarms", x.table.b},
                        {"misses", x.table.c},
                        {"correct_rejections", x.table.d},
                        {"pod", num(x.pod)},
                        {"far", num(x.far)},
                        {"sedi", num(x.sedi)},
                        {"sedi_raw", num(x.sedi_raw)}});
    j["thresholds"] = rows;
    json cal = json::array();
    for (const auto& c : r.calibration)
        cal.push_back({{"tau", c.tau},
                       {"exceedance", num(c.exceedance)},
                       {"ratio", num(c.ratio)},
                       {"wet_exceedance", num(c.wet_exceedance)},
                       {"wet_ratio", num(c.wet_ratio)},
                       {"n", c.n},
                       {"n_wet", c.n_wet}});
    j["calibration"] = cal;
    j["coverage_50_99"] = num(r.coverage_50_99);
    j["crps"] = {{"value", num(r.crps)}, {"band_edges", arr(r.band_edges)}, {"by_band", arr(r.crps_bands)}};
    j["sharpness"] = {{"p99_p50", arr(r.sharp.p99_p50)}, {"p999_p95", arr(r.sharp.p999_p95)}};
    return j;
}

inline void write_csv(std::ostream& os, const MetricsReport& r)
{
    auto num = [](double v) {
        if (std::isnan(v))
            return std::string("nan");
        char buf[64];
        auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
        return std::string(buf, p);
    };
    os << "threshold,threshold_mm,channel,tau,hits,false_alarms,misses,correct_rejections,pod,far,sedi,sedi_raw\n";
    for (const auto& x : r.rows)
        os << x.threshold << ',' << num(x.threshold_mm) << ',' << x.channel << ',' << num(x.tau) << ',' << x.table.a
           << ',' << x.table.b << ',' << x.table.c << ',' << x.table.d << ',' << num(x.pod) << ',' << num(x.far) << ','
           << num(x.sedi) << ',' << num(x.sedi_raw) << '\n';
}

} // namespace qdown
