#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "qdown/tensor.hpp"

namespace qdown {

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    void init(const std::vector<Tensor>& params)
    {
        m.clear();
        v.clear();
        for (const Tensor& p : params) {
            m.emplace_back(p.size(), 0.0);
            v.emplace_back(p.size(), 0.0);
        }
        step = 0;
    }
};

/// One bias-corrected Adam update; gradients are zeroed afterwards.
inline void adam_step(std::vector<Tensor>& params, AdamState& st)
{
    require(st.m.size() == params.size() && st.v.size() == params.size(), ErrorKind::config,
            "adam_step: optimizer state holds " + std::to_string(st.m.size()) + " slots for " +
                std::to_string(params.size()) + " parameters");
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k];
        auto& m = st.m[k];
        auto& v = st.v[k];
        require(m.size() == p.size() && v.size() == p.size(), ErrorKind::shape,
                "adam_step: moment size mismatch for parameter " + std::to_string(k) + " " + shape_str(p.shape()));
        auto& g = p.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
            const double mh = m[i] / c1;
            const double vh = v[i] / c2;
            p[i] -= st.lr * mh / (std::sqrt(vh) + st.epsilon);
        }
        p.zero_grad();
    }
}

} // namespace qdown
