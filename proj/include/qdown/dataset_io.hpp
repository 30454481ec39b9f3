#pragma once

// On-disk dataset directory.
//
//   manifest.json         format tag, world config, levels, split sizes,
//                         shapes, channel names, normalization statistics,
//                         oracle marginal thresholds, seed derivation
//   sample_NNNNNN.bin     float32 little-endian: coarse C*H*W (normalized),
//                         fine target H'*W' (mm/day), mask H'*W'
//   oracle_NNNNNN.bin     float32 little-endian: K*H'*W' oracle quantiles
//
// Indices 0 .. n_train-1 are the training split, the next n_test the test
// split. Oracle files exist for test samples only.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdown/world.hpp"

namespace qdown {

namespace fs = std::filesystem;

inline constexpr int dataset_format_version = 1;

namespace io_detail {

inline std::string numbered(const char* stem, std::size_t i)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%06zu.bin", stem, i);
    return buf;
}

inline void put_f32(std::vector<char>& out, double v)
{
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f32(const char* p)
{
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return static_cast<double>(std::bit_cast<float>(bits));
}

inline void write_file(const fs::path& p, const std::vector<char>& bytes)
{
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open " + p.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(f), ErrorKind::io, "write failed: " + p.string());
}

inline std::vector<char> read_file(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open " + p.string());
    return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

inline void write_text(const fs::path& p, const std::string& s)
{
    write_file(p, std::vector<char>(s.begin(), s.end()));
}

inline std::string read_text(const fs::path& p)
{
    auto b = read_file(p);
    return std::string(b.begin(), b.end());
}

} // namespace io_detail

/// Refuses to write into an existing non-empty directory unless force is
/// set; with force the directory is emptied first.
inline void prepare_output_dir(const fs::path& dir, bool force)
{
    std::error_code ec;
    if (fs::exists(dir, ec)) {
        require(fs::is_directory(dir, ec), ErrorKind::io, dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir, ec)) {
            require(force, ErrorKind::io, dir.string() + " is not empty (use --force to overwrite)");
            for (const auto& e : fs::directory_iterator(dir))
                fs::remove_all(e.path());
        }
    }
    fs::create_directories(dir, ec);
    require(!ec && fs::is_directory(dir), ErrorKind::io, "cannot create directory " + dir.string());
}

inline nlohmann::json world_to_json(WorldConfig w)
{
    nlohmann::json j;
    w.visit([&](const char* key, auto& v) { j[key] = v; });
    return j;
}

inline WorldConfig world_from_json(const nlohmann::json& j)
{
    WorldConfig w;
    w.visit([&](const char* key, auto& v) {
        require(j.contains(key), ErrorKind::data, std::string("manifest: world config lacks '") + key + "'");
        v = j.at(key).get<std::remove_reference_t<decltype(v)>>();
    });
    return w;
}

inline nlohmann::json stats_to_json(const NormStats& s)
{
    return {{"input_mean", s.input_mean},
            {"input_std", s.input_std},
            {"target_mean", s.target_mean},
            {"target_std", s.target_std},
            {"target_transform", "log1p"}};
}

inline NormStats stats_from_json(const nlohmann::json& j)
{
    NormStats s;
    s.input_mean = j.at("input_mean").get<std::vector<double>>();
    s.input_std = j.at("input_std").get<std::vector<double>>();
    s.target_mean = j.at("target_mean").get<double>();
    s.target_std = j.at("target_std").get<double>();
    s.validate();
    return s;
}

inline nlohmann::json manifest_json(const Dataset& ds)
{
    const WorldConfig& w = ds.world;
    std::vector<std::string> names{"storm", "moisture"};
    for (std::size_t c = 2; c < w.channels; ++c)
        names.push_back("background" + std::to_string(c - 1));
    nlohmann::json j;
    j["format"] = "qdown-dataset";
    j["version"] = dataset_format_version;
    j["world"] = world_to_json(w);
    j["seed"] = w.seed;
    j["seed_derivation"] = "sample i: derive_seed(seed, 0x53414d50, i); mask: derive_seed(seed, 0x4d41534b, 0); "
                           "derive_seed(s, t, i) = mix64(mix64(s ^ mix64(t)) ^ i), mix64 = splitmix64 finaliser";
    j["levels"] = ds.levels.taus;
    j["n_train"] = ds.train.size();
    j["n_test"] = ds.test.size();
    j["coarse_shape"] = {w.channels, w.coarse_rows, w.coarse_cols};
    j["fine_shape"] = {w.fine_rows(), w.fine_cols()};
    j["channel_names"] = names;
    j["sample_layout"] = "float32 LE: coarse C*H*W (normalized), target H'*W' (mm/day), mask H'*W'";
    j["oracle_layout"] = "float32 LE: K*H'*W' (mm/day), test samples only";
    j["oracle"] = ds.has_oracle();
    j["normalization"] = stats_to_json(ds.stats);
    j["land_fraction"] = ds.land_fraction();
    j["marginal_levels"] = ds.marginal_levels;
    j["marginal_thresholds"] = ds.marginal_thresholds;
    return j;
}

inline void save_dataset(const Dataset& ds, const fs::path& dir)
{
    for (const auto* split : {&ds.train, &ds.test})
        for (const SampleRecord& r : *split) {
            require(!r.synthetic, ErrorKind::data, "save_dataset: augmented samples are not stored on disk");
            std::vector<char> bytes;
            bytes.reserve(4 * (r.coarse.size() + 2 * r.target.size()));
            for (double v : r.coarse.values())
                io_detail::put_f32(bytes, v);
            for (double v : r.target.values())
                io_detail::put_f32(bytes, v);
            for (double v : ds.mask.values())
                io_detail::put_f32(bytes, v);
            io_detail::write_file(dir / io_detail::numbered("sample", r.index), bytes);
            if (r.oracle) {
                std::vector<char> ob;
                for (double v : r.oracle->values())
                    io_detail::put_f32(ob, v);
                io_detail::write_file(dir / io_detail::numbered("oracle", r.index), ob);
            }
        }
    io_detail::write_text(dir / "manifest.json", manifest_json(ds).dump(2) + "\n");
}

/// Loads a dataset directory. Values come back as float32-rounded doubles.
inline Dataset load_dataset(const fs::path& dir)
{
    const fs::path mpath = dir / "manifest.json";
    require(fs::exists(mpath), ErrorKind::io, "no manifest.json in " + dir.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io_detail::read_text(mpath));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::data, "manifest.json: " + std::string(e.what()));
    }
    try {
        require(j.at("format") == "qdown-dataset", ErrorKind::data, "manifest.json: not a dataset manifest");
        require(j.at("version") == dataset_format_version, ErrorKind::data, "manifest.json: unsupported version");
        Dataset ds;
        ds.world = world_from_json(j.at("world"));
        ds.world.validate();
        ds.levels.taus = j.at("levels").get<std::vector<double>>();
        ds.levels.validate();
        ds.stats = stats_from_json(j.at("normalization"));
        ds.marginal_levels = j.at("marginal_levels").get<std::vector<double>>();
        ds.marginal_thresholds = j.at("marginal_thresholds").get<std::vector<double>>();
        const auto n_train = j.at("n_train").get<std::size_t>();
        const auto n_test = j.at("n_test").get<std::size_t>();
        const bool oracle = j.at("oracle").get<bool>();
        const WorldConfig& w = ds.world;
        const std::size_t C = w.channels, H = w.coarse_rows, W = w.coarse_cols, Hf = w.fine_rows(),
                          Wf = w.fine_cols(), K = ds.levels.size();
        require(j.at("coarse_shape") == nlohmann::json({C, H, W}) && j.at("fine_shape") == nlohmann::json({Hf, Wf}),
                ErrorKind::data, "manifest.json: shapes disagree with the world config");
        const std::size_t want = 4 * (C * H * W + 2 * Hf * Wf);
        for (std::size_t i = 0; i < n_train + n_test; ++i) {
            const auto bytes = io_detail::read_file(dir / io_detail::numbered("sample", i));
            require(bytes.size() == want, ErrorKind::data,
                    io_detail::numbered("sample", i) + ": " + std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(want));
            SampleRecord r;
            r.index = i;
            r.coarse = Tensor({C, H, W});
            r.target = Tensor({Hf, Wf});
            const char* p = bytes.data();
            for (std::size_t k = 0; k < r.coarse.size(); ++k, p += 4)
                r.coarse[k] = io_detail::get_f32(p);
            for (std::size_t k = 0; k < r.target.size(); ++k, p += 4)
                r.target[k] = io_detail::get_f32(p);
            if (i == 0) {
                ds.mask = Tensor({Hf, Wf});
                for (std::size_t k = 0; k < ds.mask.size(); ++k, p += 4)
                    ds.mask[k] = io_detail::get_f32(p);
            }
            const bool is_test = i >= n_train;
            if (is_test && oracle) {
                const auto name = io_detail::numbered("oracle", i);
                require(fs::exists(dir / name), ErrorKind::data, "missing oracle file " + name);
                const auto ob = io_detail::read_file(dir / name);
                require(ob.size() == 4 * K * Hf * Wf, ErrorKind::data, name + ": wrong size");
                Tensor o({K, Hf, Wf});
                for (std::size_t k = 0; k < o.size(); ++k)
                    o[k] = io_detail::get_f32(ob.data() + 4 * k);
                r.oracle = std::move(o);
            }
            (is_test ? ds.test : ds.train).push_back(std::move(r));
        }
        return ds;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::data, "manifest.json: " + std::string(e.what()));
    }
}

} // namespace qdown
