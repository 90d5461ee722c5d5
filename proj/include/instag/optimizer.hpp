// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>

#include "instag/parameter_store.hpp"

namespace instag {

using LrMap = std::map<ParamGroup, double>;

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
    /// Decoupled decay coefficient per group; absent groups use 0.
    std::map<ParamGroup, double> weight_decay{{ParamGroup::Grid, 1e-2}, {ParamGroup::Network, 1e-2}};
};

struct Moments {
    Tensor m;
    Tensor v;
};

/// AdamW with decoupled weight decay. Moments are keyed by parameter name and
/// created lazily with the parameter's shape.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(std::move(cfg)) {}

    /// Applies one update to every trainable parameter, then zeroes gradients.
    /// Every group present in the store must have an entry in `lr`.
    void step(ParameterStore& store, const LrMap& lr);

    std::uint64_t step_count() const { return step_; }
    void set_step_count(std::uint64_t s) { step_ = s; }
    const AdamWConfig& config() const { return cfg_; }

    bool has_moments(std::string_view name) const { return moments_.find(name) != moments_.end(); }
    Moments& moments(std::string_view name);
    void set_moments(std::string name, Moments m) { moments_.insert_or_assign(std::move(name), std::move(m)); }
    const std::map<std::string, Moments, std::less<>>& all_moments() const { return moments_; }

    /// Rebuilds moments of `name` after a row-count change: new row i copies
    /// old row `source[i]`, or starts at zero when `source[i] < 0`.
    void remap_rows(std::string_view name, std::span<const std::int64_t> source, std::size_t cols);
    void forget(std::string_view name);

private:
    AdamWConfig cfg_;
    std::uint64_t step_ = 0;
    std::map<std::string, Moments, std::less<>> moments_;
};

}  // namespace instag
