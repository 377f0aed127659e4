// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <utility>

#include "fedsim/error.hpp"
#include "fedsim/param_set.hpp"

namespace fedsim {

/// Central-difference check of an analytic gradient. loss_fn must be a
/// deterministic map ParamSet -> double (dropout disabled or masks frozen).
/// Returns max over coordinates of |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|).
template <typename LossFn>
double finite_diff_check(LossFn&& loss_fn, ParamSet params, const GradSet& analytic,
                         double eps = 1e-5) {
    if (!(eps >= 1e-6 && eps <= 1e-4))
        throw ValueError("finite_diff_check: eps must lie in [1e-6, 1e-4]");
    params.require_congruent(analytic, "finite_diff_check");

    double max_rel = 0.0;
    for (std::size_t e = 0; e < params.size(); ++e) {
        Tensor& t = params.tensor(e);
        const Tensor& g = analytic.tensor(e);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double saved = t[i];
            t[i] = saved + eps;
            const double up = loss_fn(static_cast<const ParamSet&>(params));
            t[i] = saved - eps;
            const double down = loss_fn(static_cast<const ParamSet&>(params));
            t[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("finite_diff_check: non-finite loss at '" + params.name(e) + "'");
            const double g_fd = (up - down) / (2.0 * eps);
            const double g_an = g[i];
            const double rel = std::fabs(g_fd - g_an) / std::max(1e-8, std::fabs(g_fd) + std::fabs(g_an));
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

} // namespace fedsim
