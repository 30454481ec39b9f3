#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "qdown/commands.hpp"
#include "support/oracles.hpp"

using namespace qdown;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("qdown_test_io_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct CliResult {
    int status = -1;
    std::string out, err;
};

CliResult cli(const std::string& args, const fs::path& work)
{
    const fs::path o = work / "stdout.txt", e = work / "stderr.txt";
    const std::string cmd = std::string("\"") + QDOWN_CLI_PATH + "\" " + args + " >\"" + o.string() + "\" 2>\"" +
                            e.string() + "\"";
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
}

// A world and model small enough for a CLI round trip in well under a second.
const char* tiny =
    "--set world.coarse_rows=4 --set world.coarse_cols=4 --set world.up_rows=2 --set world.up_cols=2 "
    "--set data.n_train=24 --set data.n_test=8 --set model.blocks=1 --set model.filters=4 "
    "--set model.fine_filters=4 --set model.head_kernel=3 --set train.epochs=2 --set train.batch=8 ";

RunConfig tiny_config()
{
    RunConfig c;
    c.apply({{"world.coarse_rows", "4"}, {"world.coarse_cols", "4"}, {"world.up_rows", "2"}, {"world.up_cols", "2"},
             {"model.blocks", "1"}, {"model.filters", "4"}, {"model.fine_filters", "4"}, {"model.head_kernel", "3"},
             {"train.epochs", "2"}, {"train.batch", "8"}});
    return c;
}

Dataset tiny_dataset(bool oracle = true)
{
    const RunConfig c = tiny_config();
    GenerateOptions o;
    o.n_train = 12;
    o.n_test = 5;
    o.oracle = oracle;
    o.levels = c.levels;
    return generate_dataset(c.world, o);
}

std::vector<std::string> lines(const std::string& s)
{
    std::vector<std::string> v;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);)
        v.push_back(l);
    return v;
}

std::vector<std::string> cells(const std::string& line)
{
    std::vector<std::string> v;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            v.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    v.push_back(cur);
    return v;
}

std::map<std::string, std::string> row_of(const std::string& csv, std::size_t i)
{
    const auto ls = lines(csv);
    const auto head = cells(ls.at(0)), vals = cells(ls.at(i + 1));
    std::map<std::string, std::string> m;
    for (std::size_t k = 0; k < head.size(); ++k)
        m[head[k]] = k < vals.size() ? vals[k] : "";
    return m;
}

} // namespace

// ---------------------------------------------------------------------------
// dataset files

TEST(DatasetIo, RoundTripAtFloat32Precision)
{
    const Dataset ds = tiny_dataset();
    const fs::path dir = scratch("ds_roundtrip");
    save_dataset(ds, dir);
    const Dataset back = load_dataset(dir);
    ASSERT_EQ(back.train.size(), ds.train.size());
    ASSERT_EQ(back.test.size(), ds.test.size());
    EXPECT_EQ(back.levels, ds.levels);
    EXPECT_EQ(back.marginal_levels, ds.marginal_levels);
    EXPECT_EQ(back.marginal_thresholds, ds.marginal_thresholds);
    EXPECT_EQ(back.stats.target_to_z(3.0), ds.stats.target_to_z(3.0));
    auto close = [](const Tensor& a, const Tensor& b) {
        ASSERT_EQ(a.shape(), b.shape());
        for (std::size_t i = 0; i < a.size(); ++i)
            ASSERT_NEAR(a[i], b[i], 1e-6 * (1.0 + std::abs(a[i])));
    };
    close(back.mask, ds.mask);
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        close(back.train[i].coarse, ds.train[i].coarse);
        close(back.train[i].target, ds.train[i].target);
        EXPECT_FALSE(back.train[i].oracle.has_value());
    }
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
        ASSERT_TRUE(back.test[i].oracle.has_value());
        close(*back.test[i].oracle, *ds.test[i].oracle);
    }
    // float32 storage: reloading is the identity the second time around
    const fs::path dir2 = scratch("ds_roundtrip2");
    save_dataset(back, dir2);
    EXPECT_EQ(slurp(dir / "manifest.json"), slurp(dir2 / "manifest.json"));
}

TEST(DatasetIo, MissingManifestIsIoError)
{
    const fs::path dir = scratch("ds_missing");
    try {
        load_dataset(dir);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::io);
    }
}

TEST(DatasetIo, TruncatedSampleIsDataError)
{
    const Dataset ds = tiny_dataset();
    const fs::path dir = scratch("ds_truncated");
    save_dataset(ds, dir);
    fs::path victim;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().filename().string().rfind("sample", 0) == 0)
            victim = e.path();
    ASSERT_FALSE(victim.empty());
    fs::resize_file(victim, fs::file_size(victim) - 4);
    try {
        load_dataset(dir);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::data);
    }
}

TEST(DatasetIo, OracleThresholdWithoutOracleFiles)
{
    const Dataset ds = tiny_dataset(false);
    EXPECT_FALSE(ds.has_oracle());
    try {
        resolve_thresholds({"T999"}, ds);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::data);
        EXPECT_NE(std::string(e.what()).find("oracle"), std::string::npos);
    }
    const auto t = resolve_thresholds({"10", "2.5"}, ds);
    ASSERT_EQ(t.size(), 2u);
    EXPECT_EQ(t[0].mm, 10.0);
    EXPECT_EQ(t[1].mm, 2.5);
}

TEST(DatasetIo, ThresholdLabels)
{
    const Dataset ds = tiny_dataset();
    const auto t = resolve_thresholds({"T99", "T999"}, ds);
    EXPECT_GT(t[1].mm, t[0].mm);
    for (const char* bad : {"T", "T9x", "abc", "0", "-3", "5mm"})
        EXPECT_THROW(resolve_thresholds({bad}, ds), Error) << bad;
}

// ---------------------------------------------------------------------------
// checkpoints

TEST(CheckpointIo, RoundTripIsExact)
{
    const RunConfig c = tiny_config();
    for (HeadKind h : {HeadKind::deterministic, HeadKind::increment_separate, HeadKind::shared_sorted}) {
        Model m(c.model_config(), h, c.levels, 7);
        const Dataset ds = tiny_dataset();
        const auto bytes = serialize_checkpoint(m, ds.stats, {{"note", "x"}});
        Checkpoint back = deserialize_checkpoint(bytes);
        EXPECT_EQ(back.model.head(), h);
        EXPECT_EQ(back.model.config(), m.config());
        EXPECT_EQ(back.model.levels(), m.levels());
        EXPECT_EQ(back.model.seed(), 7u);
        EXPECT_EQ(back.run.at("note"), "x");
        ASSERT_EQ(back.model.parameters().size(), m.parameters().size());
        for (std::size_t i = 0; i < m.parameters().size(); ++i) {
            const auto a = m.parameters()[i].values(), b = back.model.parameters()[i].values();
            ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
        }
        EXPECT_EQ(serialize_checkpoint(back.model, back.stats, back.run), bytes);

        Tensor x({2, c.world.channels, 4, 4});
        for (std::size_t i = 0; i < x.size(); ++i)
            x[i] = std::sin(0.37 * double(i));
        const Tensor y0 = m.predict(x), y1 = back.model.predict(x);
        ASSERT_TRUE(std::equal(y0.values().begin(), y0.values().end(), y1.values().begin()));
    }
}

TEST(CheckpointIo, CorruptionIsDetected)
{
    const RunConfig c = tiny_config();
    Model m(c.model_config(), HeadKind::increment_separate, c.levels, 3);
    const auto bytes = serialize_checkpoint(m, NormStats{}, nlohmann::json::object());
    auto expect_data_error = [](const std::vector<char>& b, const std::string& fragment) {
        try {
            deserialize_checkpoint(b);
            FAIL() << "expected an error";
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::data);
            EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
        }
    };
    for (std::size_t pos : {std::size_t{30}, bytes.size() / 2, bytes.size() - 9}) {
        auto b = bytes;
        b[pos] = static_cast<char>(b[pos] ^ 0x10);
        expect_data_error(b, "checksum");
    }
    auto magic = bytes;
    magic[0] = 'X';
    expect_data_error(magic, "magic");
    expect_data_error(std::vector<char>(bytes.begin(), bytes.begin() + 10), "truncated");
    expect_data_error(std::vector<char>(bytes.begin(), bytes.end() - 100), "checksum");
}

TEST(CheckpointIo, MissingFileIsIoError)
{
    try {
        load_checkpoint(scratch("ck_missing") / "nope.qdc");
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::io);
    }
}

// ---------------------------------------------------------------------------
// configuration

TEST(ConfigIo, ParseCommentsAndWhitespace)
{
    const auto kv = parse_key_values("# comment\n\n  train.epochs = 3  \nmodel.head=shared_sorted\n", "t");
    ASSERT_EQ(kv.size(), 2u);
    EXPECT_EQ(kv.at("train.epochs"), "3");
    EXPECT_EQ(kv.at("model.head"), "shared_sorted");
    EXPECT_THROW(parse_key_values("no equals sign\n", "t"), Error);
}

TEST(ConfigIo, EchoRoundTrip)
{
    RunConfig a;
    a.apply({{"levels", "0.5,0.9,0.99"}, {"loss.exempt", "0.5"}, {"world.dry_bias", "0.25"},
             {"eval.thresholds", "5,T99"}, {"seeds", "4,5,6"}, {"model.head", "increment_shared"},
             {"optim.lr", "0.0003"}, {"aug.ratios", "0,0.01"}});
    const KeyValues kv = a.to_key_values();
    RunConfig b;
    b.apply(parse_key_values(format_key_values(kv), "echo"));
    EXPECT_EQ(b.to_key_values(), kv);
    EXPECT_EQ(b.levels.taus, (std::vector<double>{0.5, 0.9, 0.99}));
    EXPECT_EQ(b.world.dry_bias, 0.25);
    EXPECT_EQ(b.seeds, (std::vector<std::uint64_t>{4, 5, 6}));
    EXPECT_EQ(b.head, HeadKind::increment_shared);
    EXPECT_EQ(b.lr, 0.0003);
}

TEST(ConfigIo, BadKeysAndValuesAreConfigErrors)
{
    for (const KeyValues& kv : std::vector<KeyValues>{{{"model.bogus", "1"}},
                                                      {{"world.bogus", "1"}},
                                                      {{"train.epochs", "three"}},
                                                      {{"train.epochs", "-1"}},
                                                      {{"model.head", "pyramid"}},
                                                      {{"data.oracle", "maybe"}}}) {
        RunConfig c;
        try {
            c.apply(kv);
            FAIL() << "expected an error for " << kv.begin()->first;
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::config) << kv.begin()->first;
        }
    }
}

// ---------------------------------------------------------------------------
// training loop

TEST(TrainLoop, ConstantTargetLossDoesNotIncrease)
{
    RunConfig c = tiny_config();
    c.apply({{"model.dropout", "0"}, {"optim.lr", "0.003"}});
    Dataset ds = tiny_dataset();
    for (auto* split : {&ds.train, &ds.test})
        for (auto& r : *split)
            for (double& v : r.target.values())
                v = 4.0;
    TrainOptions o = train_options(c, 5);
    o.epochs = 12;
    o.batch = ds.train.size();
    Model m(c.model_config(), HeadKind::increment_separate, c.levels, 5);
    const auto log = train_model(m, ds, o);
    ASSERT_EQ(log.size(), 12u);
    for (std::size_t e = 1; e < log.size(); ++e)
        EXPECT_LE(log[e].loss, log[e - 1].loss + 1e-12) << "epoch " << log[e].epoch;
    EXPECT_LT(log.back().loss, log.front().loss);
}

TEST(TrainLoop, FirstEpochLossMatchesHandComputation)
{
    // One full batch without dropout: the logged epoch-1 loss is the objective
    // at the initial parameters.
    RunConfig c = tiny_config();
    c.apply({{"model.dropout", "0"}});
    const Dataset ds = tiny_dataset();
    TrainOptions o = train_options(c, 9);
    o.epochs = 1;
    o.batch = ds.train.size();
    Model fresh(c.model_config(), HeadKind::increment_separate, c.levels, 9);
    Model trained = fresh;
    const auto log = train_model(trained, ds, o);

    const std::size_t N = ds.train.size(), K = 4, P = ds.mask.size();
    Tensor x({N, c.world.channels, 4, 4});
    for (std::size_t n = 0; n < N; ++n)
        std::copy(ds.train[n].coarse.values().begin(), ds.train[n].coarse.values().end(),
                  x.data() + n * ds.train[n].coarse.size());
    const Tensor q = fresh.predict(x);
    double land = 0.0;
    for (double m : ds.mask.values())
        land += m;
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) {
            const double tau = c.levels.taus[k];
            double s = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
                if (ds.mask[p] == 0.0)
                    continue;
                const double yz = ds.stats.target_to_z(ds.train[n].target[p]);
                const double e = yz - q[(n * K + k) * P + p];
                const double w = (tau != 0.5 && yz > 0.5) ? 6.0 : 1.0;
                s += w * (e > 0 ? tau * e : (tau - 1.0) * e);
            }
            total += s / land;
        }
    ASSERT_EQ(log.size(), 1u);
    EXPECT_NEAR(log[0].loss, total / double(N), 1e-12 * std::max(1.0, total));
}

TEST(TrainLoop, ShapeMismatchIsReported)
{
    RunConfig c = tiny_config();
    c.apply({{"world.up_rows", "3"}});
    Model m(c.model_config(), HeadKind::increment_separate, c.levels, 1);
    const Dataset ds = tiny_dataset();
    try {
        train_model(m, ds, train_options(c, 1));
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
    }
}

// ---------------------------------------------------------------------------
// command-line tool

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite()
    {
        work_ = new fs::path(scratch("cli"));
        const CliResult g = cli(std::string(tiny) + "--seed 5 --out \"" + (*work_ / "data").string() + "\" gen", *work_);
        ASSERT_EQ(g.status, 0) << g.err;
    }
    static void TearDownTestSuite()
    {
        delete work_;
        work_ = nullptr;
    }
    static fs::path& work() { return *work_; }
    static std::string data() { return "\"" + (*work_ / "data").string() + "\""; }
    static std::string at(const std::string& name) { return "\"" + (*work_ / name).string() + "\""; }

private:
    static fs::path* work_;
};

fs::path* Cli::work_ = nullptr;

TEST_F(Cli, GenIsDeterministicAndRefusesToOverwrite)
{
    const CliResult g = cli(std::string(tiny) + "--seed 5 --out " + at("data2") + " gen", work());
    ASSERT_EQ(g.status, 0) << g.err;
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(work() / "data")) {
        ++files;
        EXPECT_EQ(slurp(e.path()), slurp(work() / "data2" / e.path().filename())) << e.path();
    }
    EXPECT_EQ(files, 24u + 8u + 8u + 1u);

    const CliResult again = cli(std::string(tiny) + "--seed 5 --out " + at("data2") + " gen", work());
    EXPECT_EQ(again.status, 1);
    EXPECT_EQ(again.err.rfind("error[io]: ", 0), 0u) << again.err;
    EXPECT_EQ(lines(again.err).size(), 1u);

    const CliResult forced = cli(std::string(tiny) + "--seed 6 --force --out " + at("data2") + " gen", work());
    ASSERT_EQ(forced.status, 0) << forced.err;
    EXPECT_NE(slurp(work() / "data" / "manifest.json"), slurp(work() / "data2" / "manifest.json"));
}

TEST_F(Cli, ErrorsAreOneLineWithCategory)
{
    const CliResult unknown = cli("--set model.bogus=1 --out " + at("x") + " gen", work());
    EXPECT_EQ(unknown.status, 1);
    EXPECT_EQ(unknown.err.rfind("error[config]: ", 0), 0u) << unknown.err;
    EXPECT_EQ(lines(unknown.err).size(), 1u);

    const CliResult usage = cli("frobnicate", work());
    EXPECT_EQ(usage.status, 2);
    EXPECT_EQ(usage.err.rfind("error[usage]: ", 0), 0u) << usage.err;

    const CliResult missing = cli("--out " + at("x2") + " train --data " + at("nowhere"), work());
    EXPECT_EQ(missing.status, 1);
    EXPECT_EQ(missing.err.rfind("error[io]: ", 0), 0u) << missing.err;

    const CliResult shape = cli(std::string(tiny) + "--set world.up_rows=3 --out " + at("x3") + " train --data " + data(),
                                work());
    EXPECT_EQ(shape.status, 1);
    EXPECT_EQ(shape.err.rfind("error[shape]: ", 0), 0u) << shape.err;
}

TEST_F(Cli, TrainAndEvalAreDeterministic)
{
    for (const char* run : {"run1", "run2"}) {
        const CliResult t = cli(std::string(tiny) + "--seed 3 --out " + at(run) + " train --data " + data(), work());
        ASSERT_EQ(t.status, 0) << t.err;
        const std::string ev = std::string(run) + "_eval";
        const CliResult e = cli(std::string(tiny) + "--out " + at(ev) + " eval --checkpoint " +
                                    at(std::string(run) + "/checkpoint.qdc") + " --data " + data(),
                                work());
        ASSERT_EQ(e.status, 0) << e.err;
    }
    for (const char* f : {"checkpoint.qdc", "train_log.csv", "run_config.txt"})
        EXPECT_EQ(slurp(work() / "run1" / f), slurp(work() / "run2" / f)) << f;
    for (const char* f : {"metrics.json", "metrics.csv"})
        EXPECT_EQ(slurp(work() / "run1_eval" / f), slurp(work() / "run2_eval" / f)) << f;

    EXPECT_EQ(lines(slurp(work() / "run1" / "train_log.csv")).size(), 3u);

    // the config echo reads back to the run's configuration
    RunConfig echo;
    echo.apply(parse_key_values(slurp(work() / "run1" / "run_config.txt"), "echo"));
    EXPECT_EQ(echo.backbone.filters, 4u);
    EXPECT_EQ(echo.epochs, 2u);

    const CliResult other = cli(std::string(tiny) + "--seed 4 --out " + at("run3") + " train --data " + data(), work());
    ASSERT_EQ(other.status, 0) << other.err;
    EXPECT_NE(slurp(work() / "run1" / "checkpoint.qdc"), slurp(work() / "run3" / "checkpoint.qdc"));
}

TEST_F(Cli, MetricsMatchRecount)
{
    const CliResult t = cli(std::string(tiny) + "--seed 2 --out " + at("mrun") + " train --data " + data(), work());
    ASSERT_EQ(t.status, 0) << t.err;
    const CliResult e = cli(std::string(tiny) + "--set eval.thresholds=1,5,T99 --out " + at("meval") +
                                " eval --checkpoint " + at("mrun/checkpoint.qdc") + " --data " + data(),
                            work());
    ASSERT_EQ(e.status, 0) << e.err;

    const auto j = nlohmann::json::parse(slurp(work() / "meval" / "metrics.json"));
    const auto& rows = j.at("thresholds");
    ASSERT_EQ(rows.size(), 3u * 4u);
    EXPECT_EQ(lines(slurp(work() / "meval" / "metrics.csv")).size(), 1u + rows.size());

    const Dataset ds = load_dataset(work() / "data");
    Checkpoint ck = load_checkpoint(work() / "mrun" / "checkpoint.qdc");
    const Tensor pred = predict_split(ck.model, ds.test, ck.stats);
    const Tensor obs = stack_targets(ds.test);
    const std::vector<double> o(obs.values().begin(), obs.values().end());
    const std::vector<double> mask(ds.mask.values().begin(), ds.mask.values().end());
    const std::size_t N = ds.test.size(), K = 4, P = mask.size();
    for (const auto& r : rows) {
        const auto& taus = j.at("taus");
        std::size_t k = 0;
        while (k < K && channel_name(taus[k].get<double>()) != r.at("channel").get<std::string>())
            ++k;
        ASSERT_LT(k, K);
        std::vector<double> f(N * P);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < P; ++p)
                f[n * P + p] = pred[(n * K + k) * P + p];
        const auto want = qdown::testing::brute_contingency(f, o, mask, r.at("threshold_mm").get<double>());
        EXPECT_EQ(r.at("hits").get<std::uint64_t>(), want.a);
        EXPECT_EQ(r.at("false_alarms").get<std::uint64_t>(), want.b);
        EXPECT_EQ(r.at("misses").get<std::uint64_t>(), want.c);
        EXPECT_EQ(r.at("correct_rejections").get<std::uint64_t>(), want.d);
    }
    EXPECT_EQ(rows[0].at("threshold_mm").get<double>(), 1.0);
}

TEST_F(Cli, FactorialHasFourCells)
{
    const CliResult r = cli(std::string(tiny) + "--set eval.thresholds=5 --seed 1 --out " + at("fact") +
                                " factorial --data " + data(),
                            work());
    ASSERT_EQ(r.status, 0) << r.err;
    const std::string csv = slurp(work() / "fact" / "factorial.csv");
    EXPECT_EQ(csv, r.out);
    ASSERT_EQ(lines(csv).size(), 5u);
    const std::vector<std::string> names{"det_base", "det_aug", "qr_base", "qr_aug"};
    for (std::size_t i = 0; i < 4; ++i) {
        const auto row = row_of(csv, i);
        EXPECT_EQ(row.at("cell"), names[i]);
        EXPECT_TRUE(fs::exists(work() / "fact" / names[i] / "metrics.json"));
        if (i < 2) {
            EXPECT_EQ(row.at("head"), "deterministic");
            EXPECT_EQ(row.at("pod_top_5"), "");
            EXPECT_EQ(row.at("crps"), "");
        } else {
            EXPECT_EQ(row.at("head"), "increment_separate");
            EXPECT_NE(row.at("pod_top_5"), "");
        }
        // 0.0067 of 24 samples rounds up to one synthetic sample
        EXPECT_EQ(row.at("n_synthetic"), i % 2 ? "1" : "0");
    }

    const CliResult rep = cli("report " + at("fact"), work());
    ASSERT_EQ(rep.status, 0) << rep.err;
    EXPECT_EQ(lines(rep.out).size(), 5u);
}

TEST_F(Cli, FactorialCellMatchesStandaloneRun)
{
    const CliResult f = cli(std::string(tiny) + "--set eval.thresholds=5 --seed 1 --out " + at("fact2") +
                                " factorial --data " + data(),
                            work());
    ASSERT_EQ(f.status, 0) << f.err;
    const CliResult t = cli(std::string(tiny) + "--set eval.thresholds=5 --set aug.ratio=0.0067 --seed 1 --out " +
                                at("solo") + " train --head increment_separate --data " + data(),
                            work());
    ASSERT_EQ(t.status, 0) << t.err;
    const CliResult e = cli(std::string(tiny) + "--set eval.thresholds=5 --out " + at("solo_eval") +
                                " eval --checkpoint " + at("solo/checkpoint.qdc") + " --data " + data(),
                            work());
    ASSERT_EQ(e.status, 0) << e.err;
    for (const char* file : {"checkpoint.qdc", "train_log.csv", "run_config.txt"})
        EXPECT_EQ(slurp(work() / "fact2" / "qr_aug" / file), slurp(work() / "solo" / file)) << file;
    EXPECT_EQ(slurp(work() / "fact2" / "qr_aug" / "metrics.json"), slurp(work() / "solo_eval" / "metrics.json"));
}

TEST_F(Cli, AblationRoutingDiagnostics)
{
    const CliResult r = cli(std::string(tiny) + "--set eval.thresholds=5 --seed 1 --out " + at("abl") +
                                " ablate --data " + data(),
                            work());
    ASSERT_EQ(r.status, 0) << r.err;
    const std::string csv = slurp(work() / "abl" / "ablation.csv");
    ASSERT_EQ(lines(csv).size(), 4u);
    const auto sorted = row_of(csv, 0), shared = row_of(csv, 1), separate = row_of(csv, 2);
    EXPECT_EQ(sorted.at("head"), "shared_sorted");
    EXPECT_EQ(shared.at("head"), "increment_shared");
    EXPECT_EQ(separate.at("head"), "increment_separate");
    EXPECT_GE(std::stoul(sorted.at("distinct_permutations")), 2u);
    EXPECT_EQ(shared.at("max_leakage"), "0");
    EXPECT_EQ(separate.at("max_leakage"), "0");
    EXPECT_GT(std::stod(sorted.at("max_leakage")), 0.0);
}

TEST_F(Cli, AugSweepRows)
{
    const CliResult r = cli(std::string(tiny) + "--set eval.thresholds=5 --out " + at("sweep") +
                                " aug-sweep --ratios 0,0.1 --data " + data(),
                            work());
    ASSERT_EQ(r.status, 0) << r.err;
    const std::string csv = slurp(work() / "sweep" / "sweep.csv");
    ASSERT_EQ(lines(csv).size(), 5u);
    EXPECT_EQ(row_of(csv, 1).at("n_synthetic"), "3");
    EXPECT_EQ(row_of(csv, 3).at("aug_ratio"), "0.1");
}
