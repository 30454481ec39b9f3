#pragma once

#include <cmath>
#include <vector>

#include "qdown/error.hpp"

namespace qdown {

/// Per-channel input statistics and log1p-target statistics, estimated on the
/// training split only.
struct NormStats {
    std::vector<double> input_mean;
    std::vector<double> input_std;
    double target_mean = 0.0; // of log1p(y)
    double target_std = 1.0;  // of log1p(y)

    void validate() const
    {
        require(input_mean.size() == input_std.size(), ErrorKind::data, "norm stats: channel count mismatch");
        for (std::size_t c = 0; c < input_std.size(); ++c)
            require(input_std[c] > 0.0 && std::isfinite(input_std[c]), ErrorKind::data,
                    "norm stats: zero-variance input channel " + std::to_string(c));
        require(target_std > 0.0 && std::isfinite(target_std), ErrorKind::data, "norm stats: zero-variance target");
    }

    double target_to_z(double mm) const { return (std::log1p(mm) - target_mean) / target_std; }
    double z_to_target(double z) const { return std::expm1(z * target_std + target_mean); }
};

} // namespace qdown
