// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "instag/autodiff.hpp"
#include "instag/optimizer.hpp"

namespace instag::gs {

enum class Branch : std::uint8_t { Face = 0, Mouth = 1 };
std::string_view branch_name(Branch b);

/// One static primitive: position, per-axis log-scale, rotation quaternion
/// (w, x, y, z), opacity logit and color logits (sigmoid gives linear RGB).
struct GaussianPrimitive {
    Eigen::Vector3d mu = Eigen::Vector3d::Zero();
    Eigen::Vector3d log_scale = Eigen::Vector3d::Zero();
    Eigen::Vector4d rotation{1.0, 0.0, 0.0, 0.0};
    double opacity_logit = 0.0;
    Eigen::Vector3d color_logit = Eigen::Vector3d::Zero();
};

/// Row-per-primitive arrays of one branch.
struct StructureField {
    Branch branch = Branch::Face;
    Tensor mu;          ///< N x 3
    Tensor log_scale;   ///< N x 3
    Tensor rotation;    ///< N x 4
    Tensor opacity;     ///< N x 1 (logit)
    Tensor color;       ///< N x 3 (logit)

    std::size_t size() const { return mu.rows; }
    GaussianPrimitive primitive(std::size_t i) const;
    void push_back(const GaussianPrimitive& g);
    static StructureField empty(Branch b);
};

/// Parameter names used for a field registered under `prefix`, e.g.
/// "face/gaussians/mu".
std::string field_param(std::string_view prefix, std::string_view attr);
void register_field(ParameterStore& store, std::string_view prefix, const StructureField& field);
StructureField read_field(const ParameterStore& store, std::string_view prefix, Branch branch);

/// Differentiable view of a (possibly deformed) field on a tape.
struct GaussianVars {
    ad::Var mu, log_scale, rotation, opacity_logit, color_logit;
    std::size_t size() const { return mu.rows(); }
};
GaussianVars field_vars(ad::Tape& tape, ParameterStore& store, std::string_view prefix);
GaussianVars field_constants(ad::Tape& tape, const StructureField& field);

struct DeformationVars {
    ad::Var d_mu;         ///< N x 3, required
    ad::Var d_log_scale;  ///< N x 3, optional
    ad::Var d_rotation;   ///< N x 4, optional
};

/// mu + d_mu, s + d_s, normalize(q + d_q). Missing components are zero.
GaussianVars apply_deformation(const GaussianVars& g, const DeformationVars& d);
DeformationVars add_deformations(const DeformationVars& a, const DeformationVars& b);

Eigen::Matrix3d rotation_matrix(const Eigen::Vector4d& q);
/// R diag(exp(s))^2 R^T with q normalized internally.
Eigen::Matrix3d covariance(const Eigen::Vector3d& log_scale, const Eigen::Vector4d& q);
/// Index of the flattest axis; ties prefer z, then y, then x.
int flattest_axis(const Eigen::Vector3d& log_scale);
/// Rotated flattest axis (unsigned; the renderer orients it toward the camera).
Eigen::Vector3d primitive_normal(const Eigen::Vector3d& log_scale, const Eigen::Vector4d& q);

struct Box {
    Eigen::Vector3d lo{-1.0, -1.0, -1.0};
    Eigen::Vector3d hi{1.0, 1.0, 1.0};
};

StructureField random_init(std::size_t n, const Box& bounds, std::uint64_t seed, Branch branch = Branch::Face);
double mean_nearest_neighbor_distance(const Tensor& points);

// ---------------------------------------------------------------------------
// density control

struct DensifyThresholds {
    double grad = 2e-4;           ///< mean NDC-space position-gradient norm
    double prune_opacity = 5e-3;  ///< prune when sigmoid(opacity) falls below
    double dense_extent = 0.02;   ///< clone below / split above this max scale
    double split_factor = 1.6;
    std::size_t min_count = 1;
    std::size_t max_count = 4096;
};

/// Accumulated screen-space gradient statistics, one row per primitive.
struct DensifyStats {
    Tensor grad_accum;  ///< N x 1
    Tensor count;       ///< N x 1
    void reset(std::size_t n);
    /// Adds |dL/d(u,v)| (converted to NDC units) for visible primitives.
    void accumulate(const Tensor& mean2d_grad, const Tensor& visible, int width, int height);
};

struct DensifyReport {
    std::size_t cloned = 0;
    std::size_t split = 0;
    std::size_t pruned = 0;
    bool refused_prune_all = false;
    std::size_t final_count = 0;
};

DensifyReport densify_and_prune(ParameterStore& store, AdamW& opt, std::string_view prefix, DensifyStats& stats,
                                const DensifyThresholds& th, std::uint64_t seed);

}  // namespace instag::gs
