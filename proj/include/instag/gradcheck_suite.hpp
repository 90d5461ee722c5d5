// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace instag {

/// Scopes: autodiff, encoders, gaussian, rasterizer, losses, motion, pipelines.
const std::vector<std::string>& gradcheck_scopes();

struct SuiteOptions {
    std::string scope;  ///< empty = every scope
    std::size_t seeds = 5;
    double tolerance = 1e-4;
    /// Multiplies every analytic gradient; anything but 1 must make checks fail.
    double analytic_scale = 1.0;
};

struct CheckOutcome {
    std::string scope;
    std::string name;
    std::uint64_t seed = 0;
    double max_rel_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    double analytic = 0.0, numeric = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

/// Central-difference checks on fixed tiny scenes, 64-bit throughout.
/// Throws UsageError for an unknown scope.
std::vector<CheckOutcome> run_gradcheck_suite(const SuiteOptions& opts);

}  // namespace instag
