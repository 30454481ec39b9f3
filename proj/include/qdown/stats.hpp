#pragma once

// Small numeric helpers shared across modules: order statistics, seeded
// stream derivation and the normal distribution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "qdown/error.hpp"

namespace qdown {

inline constexpr double nan_value = std::numeric_limits<double>::quiet_NaN();

/// Inverse empirical CDF (type 1): the ceil(tau*n)-th smallest value.
/// For n samples every tau > (n-1)/n therefore selects the maximum.
inline double empirical_quantile(std::vector<double> sample, double tau)
{
    require(!sample.empty(), ErrorKind::data, "empirical_quantile: empty sample");
    require(tau > 0.0 && tau < 1.0, ErrorKind::config, "empirical_quantile: tau must lie in (0,1)");
    const auto n = static_cast<double>(sample.size());
    auto k = static_cast<std::size_t>(std::ceil(tau * n - 1e-12));
    k = std::clamp<std::size_t>(k, 1, sample.size());
    std::nth_element(sample.begin(), sample.begin() + static_cast<std::ptrdiff_t>(k - 1), sample.end());
    return sample[k - 1];
}

/// Median as the mean of the two middle order statistics (used for summaries,
/// not for the quantile heads).
inline double median(std::vector<double> v)
{
    if (v.empty())
        return nan_value;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// splitmix64 finaliser.
inline std::uint64_t mix64(std::uint64_t z)
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Stream seed for (global seed, stream tag, index). Changing this function
/// changes every generated dataset.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index)
{
    return mix64(mix64(seed ^ mix64(tag)) ^ index);
}

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL)
{
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Uniform and normal draws built directly on the 64-bit engine so that the
/// sequence is identical across standard library implementations.
class Stream {
public:
    explicit Stream(std::uint64_t seed) : eng_(seed) {}

    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform_open()
    {
        double u;
        do
            u = uniform();
        while (u <= 0.0);
        return u;
    }

    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    std::uint64_t bits() { return eng_(); }
    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace qdown
