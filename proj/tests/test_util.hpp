#pragma once

// Shared test-only helpers. The finite-difference checker is the independent
// oracle for every differentiable op: it re-evaluates the caller's forward
// lambda under NoGrad with perturbed leaf values and never touches the tape.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mvft/tensor.hpp"

namespace testutil {

struct FdReport {
    double max_rel = 0.0;
    double max_abs = 0.0;
    std::size_t checked = 0;
};

// Central finite differences with step h against the analytic gradients
// produced by one backward pass. `forward` must rebuild the computation from
// the current leaf values and return the scalar loss.
inline FdReport fd_check(const std::vector<mvft::Tensor>& leaves,
                         const std::function<mvft::Tensor()>& forward, double h = 1e-5,
                         double rtol = 1e-4, double atol = 1e-8) {
    mvft::Tape::active().clear();
    mvft::zero_grads(leaves);
    mvft::Tensor loss = forward();
    mvft::backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& l : leaves) analytic.push_back(l.grad());

    auto eval = [&]() {
        mvft::NoGradGuard ng;
        return forward().at(0);
    };

    FdReport rep;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = const_cast<mvft::Tensor&>(leaves[li]);
        for (std::size_t i = 0; i < leaf.numel(); ++i) {
            const double orig = leaf.at(i);
            leaf.at(i) = orig + h;
            const double fp = eval();
            leaf.at(i) = orig - h;
            const double fm = eval();
            leaf.at(i) = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = analytic[li][i];
            const double abs_err = std::abs(fd - an);
            const double denom = std::max(std::abs(fd), std::abs(an));
            const double rel = abs_err / std::max(denom, atol / rtol);
            rep.max_abs = std::max(rep.max_abs, abs_err);
            rep.max_rel = std::max(rep.max_rel, rel);
            ++rep.checked;
        }
    }
    return rep;
}

inline mvft::Tensor random_tensor(std::vector<std::size_t> shape, mvft::SeededRng& rng,
                                  double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
    mvft::Tensor t = mvft::Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace testutil
