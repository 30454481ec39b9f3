#pragma once

// Model checkpoint container:
//
//   8 bytes   magic "QDCKPT\0\1"
//   u32 LE    format version (1)
//   u64 LE    header length L
//   L bytes   JSON header: backbone config, head kind, levels, seed,
//             normalization statistics, run config echo, and the name and
//             shape of every parameter in storage order
//   f64 LE    all parameter values, concatenated in header order
//   u64 LE    FNV-1a 64 over every preceding byte

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdown/dataset_io.hpp"
#include "qdown/model.hpp"
#include "qdown/norm.hpp"

namespace qdown {

inline constexpr std::array<char, 8> checkpoint_magic{'Q', 'D', 'C', 'K', 'P', 'T', '\0', '\1'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct Checkpoint {
    Model model;
    NormStats stats;
    nlohmann::json run; // free-form echo of the producing configuration
};

inline nlohmann::json backbone_to_json(const BackboneConfig& b)
{
    return {{"in_channels", b.in_channels}, {"blocks", b.blocks},       {"filters", b.filters},
            {"fine_filters", b.fine_filters}, {"up_rows", b.up_rows},   {"up_cols", b.up_cols},
            {"kernel", b.kernel},           {"head_kernel", b.head_kernel}, {"dropout", b.dropout},
            {"deep_top_head", b.deep_top_head}};
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j)
{
    BackboneConfig b;
    b.in_channels = j.at("in_channels").get<std::size_t>();
    b.blocks = j.at("blocks").get<std::size_t>();
    b.filters = j.at("filters").get<std::size_t>();
    b.fine_filters = j.at("fine_filters").get<std::size_t>();
    b.up_rows = j.at("up_rows").get<std::size_t>();
    b.up_cols = j.at("up_cols").get<std::size_t>();
    b.kernel = j.at("kernel").get<std::size_t>();
    b.head_kernel = j.at("head_kernel").get<std::size_t>();
    b.dropout = j.at("dropout").get<double>();
    b.deep_top_head = j.at("deep_top_head").get<std::size_t>();
    return b;
}

namespace ckpt_detail {

template <class T>
void put_le(std::vector<char>& out, T v)
{
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    const auto bits = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const char* p)
{
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        bits |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<T>(bits);
}

inline std::uint64_t checksum(const char* p, std::size_t n)
{
    return fnv1a({reinterpret_cast<const std::uint8_t*>(p), n});
}

} // namespace ckpt_detail

inline std::vector<char> serialize_checkpoint(const Model& m, const NormStats& stats, const nlohmann::json& run)
{
    using namespace ckpt_detail;
    nlohmann::json h;
    h["backbone"] = backbone_to_json(m.config());
    h["head"] = std::string(to_string(m.head()));
    h["levels"] = m.levels().taus;
    h["seed"] = m.seed();
    h["normalization"] = stats_to_json(stats);
    h["run"] = run;
    nlohmann::json params = nlohmann::json::array();
    for (std::size_t i = 0; i < m.parameters().size(); ++i)
        params.push_back({{"name", m.parameter_names()[i]}, {"shape", m.parameters()[i].shape()}});
    h["parameters"] = params;
    const std::string header = h.dump();

    std::vector<char> out(checkpoint_magic.begin(), checkpoint_magic.end());
    put_le(out, checkpoint_version);
    put_le(out, static_cast<std::uint64_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    for (const Tensor& p : m.parameters())
        for (double v : p.values())
            put_le(out, v);
    put_le(out, checksum(out.data(), out.size()));
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::vector<char>& bytes, const std::string& origin = "checkpoint")
{
    using namespace ckpt_detail;
    require(bytes.size() >= 8 + 4 + 8 + 8, ErrorKind::data, origin + ": truncated");
    require(std::memcmp(bytes.data(), checkpoint_magic.data(), 8) == 0, ErrorKind::data, origin + ": bad magic");
    const std::size_t body = bytes.size() - 8;
    require(get_le<std::uint64_t>(bytes.data() + body) == checksum(bytes.data(), body), ErrorKind::data,
            origin + ": checksum mismatch");
    require(get_le<std::uint32_t>(bytes.data() + 8) == checkpoint_version, ErrorKind::data,
            origin + ": unsupported version");
    const auto hlen = get_le<std::uint64_t>(bytes.data() + 12);
    require(20 + hlen <= body, ErrorKind::data, origin + ": header length out of range");
    try {
        const auto h = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(hlen));
        QuantileLevels levels;
        levels.taus = h.at("levels").get<std::vector<double>>();
        Checkpoint c{Model(backbone_from_json(h.at("backbone")), parse_head(h.at("head").get<std::string>()), levels,
                           h.at("seed").get<std::uint64_t>()),
                     stats_from_json(h.at("normalization")), h.at("run")};
        const auto& specs = h.at("parameters");
        auto& params = c.model.parameters();
        require(specs.size() == params.size(), ErrorKind::data, origin + ": parameter count does not match the model");
        const char* p = bytes.data() + 20 + hlen;
        for (std::size_t i = 0; i < params.size(); ++i) {
            require(specs[i].at("name").get<std::string>() == c.model.parameter_names()[i] &&
                        specs[i].at("shape").get<Shape>() == params[i].shape(),
                    ErrorKind::data, origin + ": parameter " + std::to_string(i) + " does not match the model");
            require(static_cast<std::size_t>(p - bytes.data()) + 8 * params[i].size() <= body, ErrorKind::data,
                    origin + ": truncated parameter data");
            for (double& v : params[i].values()) {
                v = get_le<double>(p);
                p += 8;
            }
        }
        require(static_cast<std::size_t>(p - bytes.data()) == body, ErrorKind::data, origin + ": trailing bytes");
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::data, origin + ": bad header: " + e.what());
    }
}

inline void save_checkpoint(const fs::path& path, const Model& m, const NormStats& stats, const nlohmann::json& run)
{
    io_detail::write_file(path, serialize_checkpoint(m, stats, run));
}

inline Checkpoint load_checkpoint(const fs::path& path)
{
    return deserialize_checkpoint(io_detail::read_file(path), path.string());
}

} // namespace qdown
