#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mvft/tensor.hpp"

namespace mvft {

// Adam with bias correction. Moment buffers are kept in parameter order;
// shapes are re-checked on every step.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    AdamState() = default;
    AdamState(double lr_, const std::vector<Tensor>& params) : lr(lr_) { attach(params); }

    void attach(const std::vector<Tensor>& params) {
        m.assign(params.size(), {});
        v.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].numel(), 0.0);
            v[i].assign(params[i].numel(), 0.0);
        }
    }
};

// One update over all parameters using their accumulated gradients.
inline void adam_step(const std::vector<Tensor>& params, AdamState& state) {
    if (params.size() != state.m.size())
        throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.m.size()) +
                                    " parameters, got " + std::to_string(params.size()));
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = const_cast<Tensor&>(params[i]);
        if (p.numel() != state.m[i].size())
            throw std::invalid_argument("adam_step: parameter " + std::to_string(i) +
                                        " shape does not match optimizer state");
        const auto& g = p.grad();
        auto& mi = state.m[i];
        auto& vi = state.v[i];
        auto& x = p.data();
        for (std::size_t j = 0; j < x.size(); ++j) {
            mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * g[j];
            vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            x[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

}  // namespace mvft
