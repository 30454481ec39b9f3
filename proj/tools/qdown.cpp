// qdown: command-line front end. See `qdown --help`.
//
// Failures exit with status 1 (2 for usage errors) and print exactly one line
// to stderr:  error[<category>]: <message>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qdown/commands.hpp"

namespace {

void report_error(qdown::ErrorKind kind, const std::string& msg)
{
    std::string one_line = msg;
    for (char& c : one_line)
        if (c == '\n' || c == '\r')
            c = ' ';
    std::fprintf(stderr, "error[%s]: %s\n", std::string(qdown::to_string(kind)).c_str(), one_line.c_str());
}

} // namespace

int main(int argc, char** argv)
{
    using namespace qdown;

    CLI::App app{"Multi-quantile precipitation downscaling toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_help_all_flag("--help-all", "Help for every verb");

    std::string config_path, out = "out";
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool force = false;
    std::size_t threads = 1;
    auto* seed_opt = app.add_option("--seed", seed, "Seed (world seed for gen, run seed otherwise)");
    app.add_option("--config", config_path, "key=value run configuration file");
    app.add_option("--set", overrides, "Override one config key (key=value); repeatable");
    app.add_option("--out", out, "Output directory");
    app.add_flag("--force", force, "Overwrite a non-empty output directory");
    app.add_option("--threads", threads, "Worker threads for dataset generation")->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
    GenArgs ga;
    std::size_t n_test = 0;
    bool no_oracle = false;
    gen->add_option("--n", ga.n_train, "Training samples (default data.n_train)");
    auto* n_test_opt = gen->add_option("--n-test", n_test, "Test samples (default data.n_test)");
    gen->add_flag("--no-oracle", no_oracle, "Skip oracle quantile files");

    auto* train = app.add_subcommand("train", "Train a model on a dataset");
    TrainArgs ta;
    std::string head;
    train->add_option("--data", ta.data, "Dataset directory")->required();
    train->add_option("--head", head, "Head kind (overrides model.head)");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
    EvalArgs ea;
    eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", ea.data, "Dataset directory")->required();

    ExperimentArgs xa;
    auto* factorial = app.add_subcommand("factorial", "Deterministic/quantile x base/augmented study");
    factorial->add_option("--data", xa.data, "Dataset directory")->required();
    auto* ablate = app.add_subcommand("ablate", "Sorted vs increment head ablation");
    ablate->add_option("--data", xa.data, "Dataset directory")->required();
    auto* sweep = app.add_subcommand("aug-sweep", "Augmentation ratio sweep");
    sweep->add_option("--data", xa.data, "Dataset directory")->required();
    std::vector<double> ratios;
    sweep->add_option("--ratios", ratios, "Augmentation ratios (overrides aug.ratios)")->delimiter(',');

    auto* report = app.add_subcommand("report", "Summarize metrics.json files");
    std::vector<std::string> inputs;
    report->add_option("inputs", inputs, "metrics.json files or directories")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error(ErrorKind::usage, e.what());
        return 2;
    }

    try {
        RunConfig cfg = load_run_config(config_path);
        KeyValues kv;
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            require(eq != std::string::npos, ErrorKind::usage, "--set expects key=value, got '" + o + "'");
            kv[trim(o.substr(0, eq))] = trim(o.substr(eq + 1));
        }
        cfg.apply(kv);
        const bool have_seed = seed_opt->count() > 0;
        const std::uint64_t run_seed = have_seed ? seed : cfg.seeds.front();
        auto progress = [](const EpochLog& e) {
            std::fprintf(stderr, "epoch %zu loss %.6f\n", e.epoch, e.loss);
        };

        if (gen->parsed()) {
            if (have_seed)
                cfg.world.seed = seed;
            if (!gen->get_option("--n")->count())
                ga.n_train = cfg.n_train;
            ga.n_test = n_test_opt->count() ? n_test : cfg.n_test;
            ga.oracle = cfg.oracle && !no_oracle;
            ga.threads = threads;
            ga.force = force;
            const Dataset ds = cmd_gen(cfg, ga, out);
            std::printf("wrote %zu train + %zu test samples to %s (land fraction %.4f)\n", ds.train.size(),
                        ds.test.size(), out.c_str(), ds.land_fraction());
        } else if (train->parsed()) {
            if (!head.empty())
                cfg.head = parse_head(head);
            ta.seed = run_seed;
            ta.force = force;
            const TrainResult r = cmd_train(cfg, ta, out, progress);
            std::printf("trained %s (seed %llu, %zu synthetic samples), final loss %.6f -> %s\n",
                        std::string(to_string(cfg.head)).c_str(), static_cast<unsigned long long>(run_seed),
                        r.n_synthetic, r.log.back().loss, out.c_str());
        } else if (eval->parsed()) {
            ea.force = force;
            const MetricsReport rep = cmd_eval(cfg, ea, out);
            std::printf("rmse %.4f pearson %.4f kl %.4f -> %s\n", rep.bulk.rmse, rep.bulk.pearson, rep.kl,
                        out.c_str());
        } else if (factorial->parsed() || ablate->parsed() || sweep->parsed()) {
            xa.seed = run_seed;
            xa.force = force;
            if (!ratios.empty())
                cfg.sweep_ratios = ratios;
            const Table t = factorial->parsed() ? cmd_factorial(cfg, xa, out)
                            : ablate->parsed()  ? cmd_ablate(cfg, xa, out)
                                                : cmd_aug_sweep(cfg, xa, out);
            std::fputs(t.csv().c_str(), stdout);
        } else if (report->parsed()) {
            const Table t = cmd_report(inputs);
            const std::string csv = t.csv();
            std::fputs(csv.c_str(), stdout);
            if (app.get_option("--out")->count()) {
                prepare_output_dir(out, force);
                io_detail::write_text(fs::path(out) / "report.csv", csv);
            }
        }
    } catch (const Error& e) {
        report_error(e.kind(), e.what());
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        report_error(ErrorKind::io, e.what());
        return 1;
    } catch (const std::exception& e) {
        report_error(ErrorKind::internal, e.what());
        return 1;
    }
    return 0;
}
