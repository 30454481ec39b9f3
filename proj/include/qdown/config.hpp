#pragma once

// Run configuration: flat key=value text, '#' starts a comment, nesting via
// dotted keys. Recognised keys (defaults in parentheses):
//
//   world.<field>            any WorldConfig field, e.g. world.alpha_tail
//   data.n_train (2000)  data.n_test (500)  data.oracle (true)
//   model.head (increment_separate)  model.blocks (4)  model.filters (32)
//   model.fine_filters (8)  model.kernel (3)  model.head_kernel (5)
//   model.dropout (0.1)  model.deep_top_head (0)
//   levels (0.5,0.95,0.99,0.999)
//   loss.alpha (5)  loss.z_thresh (0.5)  loss.exempt (0.5)
//   mae.scale (11.7)  mae.floor (0.1)  mae.ceiling (2)
//   optim.lr (1e-3)  optim.beta1 (0.9)  optim.beta2 (0.999)  optim.epsilon (1e-7)
//   train.epochs (40)  train.batch (16)
//   aug.ratio (0)  aug.boost (20)  aug.min_intensity_ratio (1.03)
//   aug.ratios (0,0.0067,0.015,0.021)    ratios for aug-sweep
//   factorial.aug_ratio (0.0067)
//   eval.thresholds (5,10,20,50,T95,T99,T999)
//   seeds (1)

#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdown/loss.hpp"
#include "qdown/model.hpp"
#include "qdown/world.hpp"

namespace qdown {

using KeyValues = std::map<std::string, std::string>;

/// Shortest decimal form that reads back to the same double.
inline std::string shortest(double v)
{
    if (std::isnan(v))
        return "nan";
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline KeyValues parse_key_values(std::string_view text, const std::string& origin = "config")
{
    KeyValues kv;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (auto h = line.find('#'); h != std::string::npos)
            line.resize(h);
        const std::string t = trim(line);
        if (t.empty())
            continue;
        const auto eq = t.find('=');
        require(eq != std::string::npos, ErrorKind::config,
                origin + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(std::string_view(t).substr(0, eq));
        require(!key.empty(), ErrorKind::config, origin + ":" + std::to_string(line_no) + ": empty key");
        kv[key] = trim(std::string_view(t).substr(eq + 1));
    }
    return kv;
}

namespace config_detail {

inline double to_double(const std::string& key, const std::string& v)
{
    double out = 0.0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    require(ec == std::errc() && p == end, ErrorKind::config, key + ": '" + v + "' is not a number");
    return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v)
{
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    require(ec == std::errc() && p == end, ErrorKind::config, key + ": '" + v + "' is not a non-negative integer");
    return out;
}

inline bool to_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1")
        return true;
    if (v == "false" || v == "0")
        return false;
    fail(ErrorKind::config, key + ": '" + v + "' is not a boolean");
}

inline std::vector<std::string> split_list(const std::string& v)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(v);
    while (std::getline(in, cur, ','))
        if (auto t = trim(cur); !t.empty())
            out.push_back(t);
    return out;
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& v)
{
    std::vector<double> out;
    for (const auto& s : split_list(v))
        out.push_back(to_double(key, s));
    return out;
}

template <class T>
void assign(T& field, const std::string& key, const std::string& v)
{
    if constexpr (std::is_same_v<T, double>)
        field = to_double(key, v);
    else if constexpr (std::is_same_v<T, bool>)
        field = to_bool(key, v);
    else
        field = static_cast<T>(to_uint(key, v));
}

} // namespace config_detail

struct RunConfig {
    WorldConfig world;
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    bool oracle = true;

    BackboneConfig backbone;
    HeadKind head = HeadKind::increment_separate;
    QuantileLevels levels;
    EventWeightConfig event;
    MaeWeightConfig mae;

    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;
    std::size_t epochs = 40;
    std::size_t batch = 16;

    double aug_ratio = 0.0;
    AugmentConfig aug;
    std::vector<double> sweep_ratios{0.0, 0.0067, 0.015, 0.021};
    double factorial_ratio = 0.0067;

    std::vector<std::string> thresholds{"5", "10", "20", "50", "T95", "T99", "T999"};
    std::vector<std::uint64_t> seeds{1};

    void apply(const KeyValues& kv)
    {
        using namespace config_detail;
        for (const auto& [key, v] : kv) {
            bool hit = false;
            if (key.rfind("world.", 0) == 0) {
                const std::string field = key.substr(6);
                world.visit([&](const char* name, auto& f) {
                    if (field == name) {
                        assign(f, key, v);
                        hit = true;
                    }
                });
                require(hit, ErrorKind::config, "unknown config key '" + key + "'");
                continue;
            }
            auto set = [&](const char* name, auto& f) {
                if (key == name) {
                    assign(f, key, v);
                    hit = true;
                }
            };
            set("data.n_train", n_train);
            set("data.n_test", n_test);
            set("data.oracle", oracle);
            set("model.blocks", backbone.blocks);
            set("model.filters", backbone.filters);
            set("model.fine_filters", backbone.fine_filters);
            set("model.kernel", backbone.kernel);
            set("model.head_kernel", backbone.head_kernel);
            set("model.dropout", backbone.dropout);
            set("model.deep_top_head", backbone.deep_top_head);
            set("loss.alpha", event.alpha);
            set("loss.z_thresh", event.z_thresh);
            set("mae.scale", mae.scale);
            set("mae.floor", mae.floor);
            set("mae.ceiling", mae.ceiling);
            set("optim.lr", lr);
            set("optim.beta1", beta1);
            set("optim.beta2", beta2);
            set("optim.epsilon", epsilon);
            set("train.epochs", epochs);
            set("train.batch", batch);
            set("aug.ratio", aug_ratio);
            set("aug.boost", aug.boost);
            set("aug.min_intensity_ratio", aug.min_intensity_ratio);
            set("factorial.aug_ratio", factorial_ratio);
            if (key == "model.head") {
                head = parse_head(v);
                hit = true;
            } else if (key == "levels") {
                levels.taus = to_doubles(key, v);
                hit = true;
            } else if (key == "loss.exempt") {
                event.exempt = to_doubles(key, v);
                hit = true;
            } else if (key == "aug.ratios") {
                sweep_ratios = to_doubles(key, v);
                hit = true;
            } else if (key == "eval.thresholds") {
                thresholds = split_list(v);
                hit = true;
            } else if (key == "seeds") {
                seeds.clear();
                for (const auto& s : split_list(v))
                    seeds.push_back(to_uint(key, s));
                hit = true;
            }
            require(hit, ErrorKind::config, "unknown config key '" + key + "'");
        }
    }

    void validate() const
    {
        world.validate();
        backbone.validate();
        levels.validate();
        mae.validate();
        if (head != HeadKind::deterministic)
            event.validate(levels);
        require(n_train >= 1, ErrorKind::config, "data.n_train must be >= 1");
        require(epochs >= 1 && batch >= 1, ErrorKind::config, "train.epochs and train.batch must be >= 1");
        require(lr > 0.0 && beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0,
                ErrorKind::config, "optimizer settings out of range");
        require(aug_ratio >= 0.0 && aug_ratio < 1.0, ErrorKind::config, "aug.ratio must be in [0,1)");
        for (double r : sweep_ratios)
            require(r >= 0.0 && r < 1.0, ErrorKind::config, "aug.ratios entries must be in [0,1)");
        require(!seeds.empty(), ErrorKind::config, "seeds must not be empty");
    }

    /// Backbone with input channels and upsample factors taken from the world.
    BackboneConfig model_config() const
    {
        BackboneConfig b = backbone;
        b.in_channels = world.channels;
        b.up_rows = world.up_rows;
        b.up_cols = world.up_cols;
        return b;
    }

    /// Flat key=value form that apply() reads back to the same config.
    KeyValues to_key_values() const
    {
        KeyValues kv;
        auto fmt = [](double v) { return shortest(v); };
        auto list = [&](const std::vector<double>& v) {
            std::string s;
            for (std::size_t i = 0; i < v.size(); ++i)
                s += (i ? "," : "") + fmt(v[i]);
            return s;
        };
        WorldConfig w = world;
        w.visit([&](const char* name, auto& f) {
            if constexpr (std::is_same_v<std::remove_reference_t<decltype(f)>, double>)
                kv[std::string("world.") + name] = fmt(f);
            else
                kv[std::string("world.") + name] = std::to_string(f);
        });
        kv["data.n_train"] = std::to_string(n_train);
        kv["data.n_test"] = std::to_string(n_test);
        kv["data.oracle"] = oracle ? "true" : "false";
        kv["model.head"] = std::string(to_string(head));
        kv["model.blocks"] = std::to_string(backbone.blocks);
        kv["model.filters"] = std::to_string(backbone.filters);
        kv["model.fine_filters"] = std::to_string(backbone.fine_filters);
        kv["model.kernel"] = std::to_string(backbone.kernel);
        kv["model.head_kernel"] = std::to_string(backbone.head_kernel);
        kv["model.dropout"] = fmt(backbone.dropout);
        kv["model.deep_top_head"] = std::to_string(backbone.deep_top_head);
        kv["levels"] = list(levels.taus);
        kv["loss.alpha"] = fmt(event.alpha);
        kv["loss.z_thresh"] = fmt(event.z_thresh);
        kv["loss.exempt"] = list(event.exempt);
        kv["mae.scale"] = fmt(mae.scale);
        kv["mae.floor"] = fmt(mae.floor);
        kv["mae.ceiling"] = fmt(mae.ceiling);
        kv["optim.lr"] = fmt(lr);
        kv["optim.beta1"] = fmt(beta1);
        kv["optim.beta2"] = fmt(beta2);
        kv["optim.epsilon"] = fmt(epsilon);
        kv["train.epochs"] = std::to_string(epochs);
        kv["train.batch"] = std::to_string(batch);
        kv["aug.ratio"] = fmt(aug_ratio);
        kv["aug.boost"] = fmt(aug.boost);
        kv["aug.min_intensity_ratio"] = fmt(aug.min_intensity_ratio);
        kv["aug.ratios"] = list(sweep_ratios);
        kv["factorial.aug_ratio"] = fmt(factorial_ratio);
        std::string th;
        for (std::size_t i = 0; i < thresholds.size(); ++i)
            th += (i ? "," : "") + thresholds[i];
        kv["eval.thresholds"] = th;
        std::string sd;
        for (std::size_t i = 0; i < seeds.size(); ++i)
            sd += (i ? "," : "") + std::to_string(seeds[i]);
        kv["seeds"] = sd;
        return kv;
    }

    nlohmann::json to_json() const
    {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : to_key_values())
            j[k] = v;
        return j;
    }
};

inline std::string format_key_values(const KeyValues& kv)
{
    std::string out;
    for (const auto& [k, v] : kv)
        out += k + " = " + v + "\n";
    return out;
}

} // namespace qdown
