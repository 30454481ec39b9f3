#pragma once

// Implementations of the command-line verbs. The executable in tools/ only
// parses arguments; everything that produces an artifact lives here so the
// same code paths can be driven from tests.
//
// Artifacts:
//   gen        <out>/manifest.json, sample_*.bin, oracle_*.bin
//   train      <out>/checkpoint.qdc, train_log.csv, run_config.txt
//   eval       <out>/metrics.json, metrics.csv
//   factorial  <out>/factorial.csv and one train+eval directory per cell
//   ablate     <out>/ablation.csv and one directory per head kind
//   aug-sweep  <out>/sweep.csv and one directory per (head, ratio)
//   report     <out>/report.csv summarizing metrics.json files

#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdown/checkpoint.hpp"
#include "qdown/config.hpp"
#include "qdown/dataset_io.hpp"
#include "qdown/train.hpp"

namespace qdown {

inline RunConfig load_run_config(const std::string& path)
{
    RunConfig cfg;
    if (!path.empty()) {
        require(fs::exists(path), ErrorKind::io, "config file not found: " + path);
        cfg.apply(parse_key_values(io_detail::read_text(path), path));
    }
    return cfg;
}

inline std::string format_double(double v) { return shortest(v); }

/// CSV writer over rows of named cells; absent cells are left empty.
class Table {
public:
    explicit Table(std::vector<std::string> columns) : cols_(std::move(columns)) {}

    void add_column(const std::string& c)
    {
        if (std::find(cols_.begin(), cols_.end(), c) == cols_.end())
            cols_.push_back(c);
    }
    void add(std::map<std::string, std::string> row)
    {
        for (const auto& [k, v] : row)
            add_column(k);
        rows_.push_back(std::move(row));
    }
    std::size_t rows() const noexcept { return rows_.size(); }

    std::string csv() const
    {
        std::string s;
        for (std::size_t i = 0; i < cols_.size(); ++i)
            s += (i ? "," : "") + cols_[i];
        s += '\n';
        for (const auto& r : rows_) {
            for (std::size_t i = 0; i < cols_.size(); ++i) {
                if (i)
                    s += ',';
                if (auto it = r.find(cols_[i]); it != r.end())
                    s += it->second;
            }
            s += '\n';
        }
        return s;
    }

private:
    std::vector<std::string> cols_;
    std::vector<std::map<std::string, std::string>> rows_;
};

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    bool oracle = true;
    std::size_t threads = 1;
    bool force = false;
};

inline Dataset cmd_gen(const RunConfig& cfg, const GenArgs& a, const fs::path& out)
{
    cfg.world.validate();
    cfg.levels.validate();
    prepare_output_dir(out, a.force);
    GenerateOptions opt;
    opt.n_train = a.n_train;
    opt.n_test = a.n_test;
    opt.oracle = a.oracle;
    opt.levels = cfg.levels;
    opt.threads = a.threads;
    Dataset ds = generate_dataset(cfg.world, opt);
    save_dataset(ds, out);
    return ds;
}

// ---------------------------------------------------------------------------
// train / eval

struct TrainResult {
    Model model;
    std::vector<EpochLog> log;
    std::size_t n_synthetic = 0;
    nlohmann::json run;
};

inline TrainOptions train_options(const RunConfig& cfg, std::uint64_t seed)
{
    TrainOptions o;
    o.epochs = cfg.epochs;
    o.batch = cfg.batch;
    o.lr = cfg.lr;
    o.beta1 = cfg.beta1;
    o.beta2 = cfg.beta2;
    o.epsilon = cfg.epsilon;
    o.event = cfg.event;
    o.mae = cfg.mae;
    o.seed = seed;
    return o;
}

/// Builds a model of kind `head` seeded with `seed`, optionally augments the
/// training split at `ratio`, and trains it.
inline TrainResult train_run(const RunConfig& base, const Dataset& ds, HeadKind head, double ratio, std::uint64_t seed,
                             const std::function<void(const EpochLog&)>& on_epoch = {})
{
    RunConfig cfg = base;
    cfg.head = head;
    cfg.aug_ratio = ratio;
    cfg.seeds = {seed};
    cfg.validate();
    TrainResult r{Model(cfg.model_config(), head, cfg.levels, seed), {}, 0, {}};
    check_compatible(r.model, ds);
    const Dataset* data = &ds;
    Dataset augmented;
    if (ratio > 0.0) {
        augmented = inject_augmentation(ds, ratio, cfg.aug);
        r.n_synthetic = augmented.train.size() - ds.train.size();
        data = &augmented;
    }
    r.log = train_model(r.model, *data, train_options(cfg, seed), on_epoch);
    r.run = {{"config", cfg.to_json()},
             {"seed", seed},
             {"head", std::string(to_string(head))},
             {"aug_ratio", ratio},
             {"n_synthetic", r.n_synthetic},
             {"dataset", {{"world", world_to_json(ds.world)}, {"n_train", ds.train.size()}, {"n_test", ds.test.size()}}},
             {"final_loss", r.log.back().loss}};
    return r;
}

inline std::string train_log_csv(const std::vector<EpochLog>& log)
{
    std::string s = "epoch,loss,batches,samples\n";
    for (const auto& e : log)
        s += std::to_string(e.epoch) + "," + format_double(e.loss) + "," + std::to_string(e.batches) + "," +
             std::to_string(e.samples) + "\n";
    return s;
}

inline void write_train_artifacts(const TrainResult& r, const NormStats& stats, const fs::path& dir)
{
    save_checkpoint(dir / "checkpoint.qdc", r.model, stats, r.run);
    io_detail::write_text(dir / "train_log.csv", train_log_csv(r.log));
    RunConfig echo;
    echo.apply([&] {
        KeyValues kv;
        for (const auto& [k, v] : r.run.at("config").items())
            kv[k] = v.get<std::string>();
        return kv;
    }());
    io_detail::write_text(dir / "run_config.txt", format_key_values(echo.to_key_values()));
}

struct TrainArgs {
    std::string data;
    std::uint64_t seed = 1;
    bool force = false;
};

inline TrainResult cmd_train(const RunConfig& cfg, const TrainArgs& a, const fs::path& out,
                             const std::function<void(const EpochLog&)>& on_epoch = {})
{
    const Dataset ds = load_dataset(a.data);
    prepare_output_dir(out, a.force);
    TrainResult r = train_run(cfg, ds, cfg.head, cfg.aug_ratio, a.seed, on_epoch);
    write_train_artifacts(r, ds.stats, out);
    return r;
}

inline MetricsReport eval_run(Model& model, const NormStats& stats, const Dataset& ds,
                              const std::vector<std::string>& thresholds, const nlohmann::json& run)
{
    MetricsReport rep = evaluate(model, ds, stats, resolve_thresholds(thresholds, ds));
    rep.config = {{"run", run}, {"thresholds", thresholds}, {"eval_split", "test"},
                  {"eval_world", world_to_json(ds.world)}, {"n_test", ds.test.size()}};
    return rep;
}

inline void write_metrics(const MetricsReport& rep, const fs::path& dir)
{
    io_detail::write_text(dir / "metrics.json", to_json(rep).dump(2) + "\n");
    std::ostringstream csv;
    write_csv(csv, rep);
    io_detail::write_text(dir / "metrics.csv", csv.str());
}

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    bool force = false;
};

inline MetricsReport cmd_eval(const RunConfig& cfg, const EvalArgs& a, const fs::path& out)
{
    Checkpoint ck = load_checkpoint(a.checkpoint);
    const Dataset ds = load_dataset(a.data);
    MetricsReport rep = eval_run(ck.model, ck.stats, ds, cfg.thresholds, ck.run);
    prepare_output_dir(out, a.force);
    write_metrics(rep, out);
    return rep;
}

// ---------------------------------------------------------------------------
// experiments

/// Summary cells for one evaluated configuration: bulk scores, the central
/// channel's scores per threshold and, for quantile models, the top level's.
inline std::map<std::string, std::string> summary_cells(const MetricsReport& r)
{
    std::map<std::string, std::string> row;
    row["rmse"] = format_double(r.bulk.rmse);
    row["pearson"] = format_double(r.bulk.pearson);
    row["kl"] = format_double(r.kl);
    std::set<std::string> seen;
    const std::string top = r.taus.empty() ? "" : channel_name(r.taus.back());
    for (const auto& x : r.rows) {
        if (x.channel == r.central_channel) {
            row["pod_" + x.threshold] = format_double(x.pod);
            row["far_" + x.threshold] = format_double(x.far);
            row["sedi_" + x.threshold] = format_double(x.sedi);
        }
        if (!top.empty() && x.channel == top) {
            row["pod_top_" + x.threshold] = format_double(x.pod);
            row["far_top_" + x.threshold] = format_double(x.far);
            row["sedi_top_" + x.threshold] = format_double(x.sedi);
        }
    }
    if (!r.taus.empty()) {
        row["crps"] = format_double(r.crps);
        row["coverage_50_99"] = format_double(r.coverage_50_99);
        row["calib_ratio_top"] = format_double(r.calibration.back().ratio);
        row["calib_wet_ratio_top"] = format_double(r.calibration.back().wet_ratio);
    }
    return row;
}

inline std::vector<std::string> summary_columns(const std::vector<std::string>& thresholds, bool with_top)
{
    std::vector<std::string> c{"rmse", "pearson", "kl"};
    for (const auto& t : thresholds)
        for (const char* m : {"pod_", "far_", "sedi_"})
            c.push_back(m + t);
    if (with_top) {
        c.insert(c.end(), {"crps", "coverage_50_99", "calib_ratio_top", "calib_wet_ratio_top"});
        for (const auto& t : thresholds)
            for (const char* m : {"pod_top_", "far_top_", "sedi_top_"})
                c.push_back(m + t);
    }
    return c;
}

struct CellResult {
    std::string name;
    TrainResult train;
    MetricsReport report;
};

/// One train+eval cell written to <out>/<name>; identical to running train
/// and eval separately with the same settings.
inline CellResult run_cell(const RunConfig& cfg, const Dataset& ds, const std::string& name, HeadKind head,
                           double ratio, std::uint64_t seed, const fs::path& out)
{
    const fs::path dir = out / name;
    prepare_output_dir(dir, true);
    CellResult c{name, train_run(cfg, ds, head, ratio, seed), {}};
    write_train_artifacts(c.train, ds.stats, dir);
    c.report = eval_run(c.train.model, ds.stats, ds, cfg.thresholds, c.train.run);
    write_metrics(c.report, dir);
    return c;
}

struct ExperimentArgs {
    std::string data;
    std::uint64_t seed = 1;
    bool force = false;
};

inline std::string ratio_tag(double r)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", r);
    return buf;
}

/// {deterministic, quantile} x {no augmentation, factorial.aug_ratio}.
inline Table cmd_factorial(const RunConfig& cfg, const ExperimentArgs& a, const fs::path& out)
{
    const Dataset ds = load_dataset(a.data);
    prepare_output_dir(out, a.force);
    const HeadKind quantile = cfg.head == HeadKind::deterministic ? HeadKind::increment_separate : cfg.head;
    Table t({"cell", "head", "aug_ratio", "n_synthetic", "seed"});
    for (const auto& c : summary_columns(cfg.thresholds, true))
        t.add_column(c);
    for (HeadKind h : {HeadKind::deterministic, quantile})
        for (double ratio : {0.0, cfg.factorial_ratio}) {
            const std::string name = std::string(h == HeadKind::deterministic ? "det" : "qr") +
                                     (ratio > 0 ? "_aug" : "_base");
            const CellResult c = run_cell(cfg, ds, name, h, ratio, a.seed, out);
            auto row = summary_cells(c.report);
            row["cell"] = name;
            row["head"] = std::string(to_string(h));
            row["aug_ratio"] = ratio_tag(ratio);
            row["n_synthetic"] = std::to_string(c.train.n_synthetic);
            row["seed"] = std::to_string(a.seed);
            t.add(std::move(row));
        }
    io_detail::write_text(out / "factorial.csv", t.csv());
    return t;
}

struct RoutingDiagnostics {
    std::size_t distinct_permutations = 1;
    double max_leakage = 0.0; // max |d loss_k / d raw_j| over j > k
};

/// Gradient-routing census of a quantile model on input x: how many distinct
/// per-pixel channel permutations the head applies, and how much gradient a
/// loss on level k sends to raw channels above k.
inline RoutingDiagnostics routing_diagnostics(Model& model, const Tensor& x)
{
    require(model.is_quantile(), ErrorKind::config, "routing diagnostics need a quantile head");
    RoutingDiagnostics d;
    const std::size_t K = model.outputs();
    for (std::size_t k = 0; k < K; ++k) {
        Graph g(false);
        auto out = model.forward(g, x);
        if (k == 0 && model.head() == HeadKind::shared_sorted) {
            const Shape& s = out.raw.shape();
            const std::size_t N = s[0], HW = s[2] * s[3];
            std::set<std::vector<std::uint8_t>> perms;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t p = 0; p < HW; ++p) {
                    std::vector<std::uint8_t> v(K);
                    for (std::size_t c = 0; c < K; ++c)
                        v[c] = out.permutation[(n * K + c) * HW + p];
                    perms.insert(v);
                }
            d.distinct_permutations = perms.size();
        }
        g.backward(sum(slice(out.value, 1, k, 1)));
        const auto& gr = g.grad(out.raw);
        const Shape& s = out.raw.shape();
        const std::size_t N = s[0], HW = s[2] * s[3];
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t j = k + 1; j < K; ++j)
                for (std::size_t p = 0; p < HW; ++p)
                    d.max_leakage = std::max(d.max_leakage, std::abs(gr[(n * K + j) * HW + p]));
    }
    return d;
}

/// shared_sorted -> increment_shared -> increment_separate on the same data
/// and seed.
inline Table cmd_ablate(const RunConfig& cfg, const ExperimentArgs& a, const fs::path& out)
{
    const Dataset ds = load_dataset(a.data);
    prepare_output_dir(out, a.force);
    Table t({"step", "head", "seed", "distinct_permutations", "max_leakage"});
    for (const auto& c : summary_columns(cfg.thresholds, true))
        t.add_column(c);
    const std::size_t probe = std::min<std::size_t>(ds.test.size(), 16);
    require(probe > 0, ErrorKind::data, "ablate: empty test split");
    std::vector<std::size_t> idx(probe);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const Tensor x = train_detail::make_batch(ds.test, idx, ds.stats).x;
    std::size_t step = 1;
    for (HeadKind h : {HeadKind::shared_sorted, HeadKind::increment_shared, HeadKind::increment_separate}) {
        CellResult c = run_cell(cfg, ds, std::string(to_string(h)), h, cfg.aug_ratio, a.seed, out);
        const RoutingDiagnostics d = routing_diagnostics(c.train.model, x);
        auto row = summary_cells(c.report);
        row["step"] = std::to_string(step++);
        row["head"] = std::string(to_string(h));
        row["seed"] = std::to_string(a.seed);
        row["distinct_permutations"] = std::to_string(d.distinct_permutations);
        row["max_leakage"] = format_double(d.max_leakage);
        t.add(std::move(row));
    }
    io_detail::write_text(out / "ablation.csv", t.csv());
    return t;
}

/// One train+eval per (architecture, ratio).
inline Table cmd_aug_sweep(const RunConfig& cfg, const ExperimentArgs& a, const fs::path& out)
{
    const Dataset ds = load_dataset(a.data);
    prepare_output_dir(out, a.force);
    const HeadKind quantile = cfg.head == HeadKind::deterministic ? HeadKind::increment_separate : cfg.head;
    Table t({"head", "aug_ratio", "n_synthetic", "seed"});
    for (const auto& c : summary_columns(cfg.thresholds, true))
        t.add_column(c);
    for (HeadKind h : {HeadKind::deterministic, quantile})
        for (double ratio : cfg.sweep_ratios) {
            const std::string name = std::string(to_string(h)) + "_f" + ratio_tag(ratio);
            const CellResult c = run_cell(cfg, ds, name, h, ratio, a.seed, out);
            auto row = summary_cells(c.report);
            row["head"] = std::string(to_string(h));
            row["aug_ratio"] = ratio_tag(ratio);
            row["n_synthetic"] = std::to_string(c.train.n_synthetic);
            row["seed"] = std::to_string(a.seed);
            t.add(std::move(row));
        }
    io_detail::write_text(out / "sweep.csv", t.csv());
    return t;
}

// ---------------------------------------------------------------------------
// report

/// Summarizes metrics.json files (directories are searched recursively).
inline Table cmd_report(const std::vector<std::string>& inputs)
{
    std::vector<fs::path> files;
    for (const auto& in : inputs) {
        require(fs::exists(in), ErrorKind::io, "report: no such file or directory: " + in);
        if (fs::is_directory(in)) {
            for (const auto& e : fs::recursive_directory_iterator(in))
                if (e.is_regular_file() && e.path().filename() == "metrics.json")
                    files.push_back(e.path());
        } else {
            files.push_back(in);
        }
    }
    require(!files.empty(), ErrorKind::io, "report: no metrics.json found");
    std::sort(files.begin(), files.end());
    Table t({"source", "head", "seed", "aug_ratio", "central_channel", "rmse", "pearson", "kl", "crps",
             "coverage_50_99"});
    for (const auto& f : files) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io_detail::read_text(f));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::data, f.string() + ": " + e.what());
        }
        auto num = [](const nlohmann::json& v) { return v.is_number() ? format_double(v.get<double>()) : "nan"; };
        std::map<std::string, std::string> row;
        row["source"] = f.parent_path().string();
        const auto& run = j.at("config").at("run");
        row["head"] = run.value("head", "");
        row["seed"] = run.contains("seed") ? std::to_string(run.at("seed").get<std::uint64_t>()) : "";
        row["aug_ratio"] = run.contains("aug_ratio") ? ratio_tag(run.at("aug_ratio").get<double>()) : "";
        row["central_channel"] = j.at("central_channel").get<std::string>();
        row["rmse"] = num(j.at("bulk").at("rmse"));
        row["pearson"] = num(j.at("bulk").at("pearson"));
        row["kl"] = num(j.at("kl").at("value"));
        row["crps"] = num(j.at("crps").at("value"));
        row["coverage_50_99"] = num(j.at("coverage_50_99"));
        const auto& taus = j.at("taus");
        const std::string top = taus.empty() ? "" : channel_name(taus.back().get<double>());
        for (const auto& x : j.at("thresholds")) {
            const auto ch = x.at("channel").get<std::string>();
            const auto th = x.at("threshold").get<std::string>();
            if (ch == row["central_channel"])
                row["pod_" + th] = num(x.at("pod"));
            if (!top.empty() && ch == top)
                row["pod_top_" + th] = num(x.at("pod"));
        }
        t.add(std::move(row));
    }
    return t;
}

} // namespace qdown
