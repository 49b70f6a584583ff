#pragma once

#include <functional>

#include "fuseg3d/ad/ops_nn.hpp"

namespace testsupport {

using fuseg3d::ad::Var;
using fuseg3d::core::Rng;
using fuseg3d::core::Tensor;

inline Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Random projection to a scalar so every output element influences the loss.
inline Var project(const Var& y, Rng& rng) {
    Tensor r(y.shape());
    for (std::int64_t i = 0; i < r.numel(); ++i) r[i] = rng.uniform(-1.0, 1.0);
    return fuseg3d::ad::sum(fuseg3d::ad::mul(y, Var(r)));
}

// Central finite-difference check of d(loss)/d(params). `loss_fn` must
// recompute the loss from the current parameter values. Checks up to
// `max_per_param` coordinates per parameter; returns the max relative error.
inline double fd_max_rel_err(const std::function<Var()>& loss_fn, std::vector<Var> params,
                             Rng& rng, double h = 1e-5, std::int64_t max_per_param = 24) {
    Var loss = loss_fn();
    for (auto& p : params) p.clear_grad();
    fuseg3d::ad::backward(loss);

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (auto& p : params)
        analytic.push_back(p.has_grad() ? p.grad().clone() : Tensor(p.shape()));

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Var& p = params[pi];
        const std::int64_t n = p.numel();
        const std::int64_t m = std::min(n, max_per_param);
        for (std::int64_t t = 0; t < m; ++t) {
            const std::int64_t i = (m == n) ? t : rng.index(n);
            const double orig = p.value()[i];
            p.value()[i] = orig + h;
            const double lp = loss_fn().value()[0];
            p.value()[i] = orig - h;
            const double lm = loss_fn().value()[0];
            p.value()[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = analytic[pi][i];
            if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) continue;
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace testsupport
