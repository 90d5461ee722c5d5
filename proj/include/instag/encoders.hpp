// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "instag/autodiff.hpp"

namespace instag::enc {

struct HashGridConfig {
    int levels = 12;
    int features = 2;
    std::size_t table_size = std::size_t{1} << 14;
    double n_min = 16.0;
    double n_max = 256.0;

    /// Geometric schedule floor(n_min * b^l); throws ConfigError unless strictly increasing.
    std::vector<int> resolutions() const;
    std::size_t output_dim() const { return static_cast<std::size_t>(levels * features); }
    std::size_t param_count() const { return static_cast<std::size_t>(levels) * table_size * static_cast<std::size_t>(features); }
    void validate() const;
    bool operator==(const HashGridConfig&) const = default;
};

/// Table slot of grid vertex (x, y) at a level of the given resolution.
/// Row-major when the (res+1)^2 vertices fit in the table, else a spatial hash.
std::size_t hash_index(std::int64_t x, std::int64_t y, int resolution, std::size_t table_size);

/// Multi-resolution bilinear lookup. `uv` is N x 2 (clamped to [0,1]),
/// `table` is (levels * table_size) x features. Returns N x (levels * features),
/// level-major.
ad::Var hash_grid_2d(ad::Var uv, ad::Var table, const HashGridConfig& cfg);

/// Three 2D hash grids over the xy, yz and xz planes of [-1,1]^3.
class TriPlane {
public:
    TriPlane(std::string prefix, HashGridConfig cfg);

    void register_params(ParameterStore& store, std::uint64_t seed, double init_range = 1e-4) const;
    /// mu is N x 3; out-of-box coordinates are clamped.
    ad::Var encode(ad::Tape& tape, ParameterStore& store, ad::Var mu) const;

    std::size_t output_dim() const { return 3 * cfg_.output_dim(); }
    std::size_t param_count() const { return 3 * cfg_.param_count(); }
    std::string plane_name(int plane) const;
    const HashGridConfig& config() const { return cfg_; }
    const std::string& prefix() const { return prefix_; }

private:
    std::string prefix_;
    HashGridConfig cfg_;
};

/// Fully connected network, ReLU between layers and a linear output.
class Mlp {
public:
    /// dims = {in, hidden..., out}. With zero_last the output layer starts at zero.
    Mlp(std::string prefix, std::vector<std::size_t> dims, bool zero_last = true);

    void register_params(ParameterStore& store, std::uint64_t seed) const;
    ad::Var forward(ad::Tape& tape, ParameterStore& store, ad::Var x) const;

    std::size_t input_dim() const { return dims_.front(); }
    std::size_t output_dim() const { return dims_.back(); }
    std::size_t layers() const { return dims_.size() - 1; }
    std::string weight_name(std::size_t layer) const;
    std::string bias_name(std::size_t layer) const;

private:
    std::string prefix_;
    std::vector<std::size_t> dims_;
    bool zero_last_;
};

/// Channel gate on a condition vector driven by the spatial feature:
/// C * sigmoid(MLP(feature)). Starts at a uniform gate of 0.5.
class RegionAttention {
public:
    RegionAttention(std::string prefix, std::size_t spatial_dim, std::size_t cond_dim, std::size_t hidden = 32);

    void register_params(ParameterStore& store, std::uint64_t seed) const { mlp_.register_params(store, seed); }
    ad::Var gate(ad::Tape& tape, ParameterStore& store, ad::Var spatial) const;
    /// `cond` is 1 x cond_dim (shared by all points) or N x cond_dim.
    ad::Var attend(ad::Tape& tape, ParameterStore& store, ad::Var spatial, ad::Var cond) const;

    std::size_t cond_dim() const { return mlp_.output_dim(); }

private:
    Mlp mlp_;
};

}  // namespace instag::enc
