// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "instag/autodiff.hpp"

namespace instag {

using LossFn = std::function<ad::Var(ad::Tape&)>;

struct FiniteDiffOptions {
    double eps = 1e-4;
    /// Coordinates sampled per parameter array (half biased toward nonzero gradients).
    std::size_t samples = 12;
    std::uint64_t seed = 0;
    /// A coordinate that misses `tolerance` is re-measured at eps/10, eps/100
    /// and 10 eps. Smaller steps clear a straddled kink, the larger one clears
    /// round-off on tiny gradients; a wrong gradient misses at every step.
    bool refine = true;
    double tolerance = 1e-4;
    /// Restrict to these parameter names (empty = every trainable parameter).
    std::vector<std::string> only;
    /// Negative-control hook: analytic gradients are multiplied by this factor.
    double analytic_scale = 1.0;
};

struct FiniteDiffResult {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    std::size_t refined = 0;
};

/// Relative error |a - c| / max(|a|, |c|, 1e-8).
double relative_error(double analytic, double numeric);

/// Compares reverse-mode gradients of `loss_fn` against central differences.
/// Throws NumericError when the loss is not finite.
FiniteDiffResult finite_diff_check(const LossFn& loss_fn, ParameterStore& store, const FiniteDiffOptions& opts = {});

}  // namespace instag
