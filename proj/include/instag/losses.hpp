// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "instag/autodiff.hpp"

namespace instag::loss {

struct LossWeights {
    double lambda_c = 1.0;     ///< negative contrast
    double lambda_d = 1e-2;    ///< depth
    double lambda_n = 1e-3;    ///< normal
    double lambda_ssim = 0.2;  ///< share of D-SSIM in the photometric term

    /// Throws ConfigError on a negative weight or lambda_ssim outside [0,1].
    void validate() const;
};

constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

/// Mean SSIM over pixels and channels of two P x C images (row-major pixels),
/// 11x11 Gaussian window with sigma 1.5 and zero padding.
ad::Var ssim(ad::Var a, ad::Var b, int width, int height);

/// (1 - lambda_ssim) * mean|I - gt| + lambda_ssim * (1 - SSIM) / 2.
ad::Var photometric(ad::Var image, ad::Var target, int width, int height, double lambda_ssim = 0.2);

/// Mean over rows of max(0, a_k . b_k).
ad::Var negative_contrast(ad::Var a, ad::Var b);

/// Mean |D - (a * target + b)| over the mask with (a, b) the least-squares
/// fit; falls back to a shift-only fit when the target is constant on the
/// mask. Gradient reaches D only. Returns zero with fewer than 2 pixels.
ad::Var scale_invariant_depth(ad::Var depth, const Tensor& target, const Tensor& mask);

struct GeometryTargets {
    Tensor depth;   ///< P x 1
    Tensor normal;  ///< P x 3, unit where valid
    Tensor mask;    ///< P x 1, 1 where valid
};

struct GeometryLoss {
    ad::Var value;
    ad::Var depth_term;   ///< unweighted
    ad::Var normal_term;  ///< unweighted
    bool empty_mask = false;
};

GeometryLoss geometry_loss(ad::Var depth, ad::Var normal, const GeometryTargets& targets, const LossWeights& w);

/// Photometric term plus lambda_c times the contrast of identity i against
/// every other identity's personal offsets (all evaluated at the same points).
ad::Var pretrain_loss(ad::Var photometric_value, std::size_t i, std::span<const ad::Var> personal_offsets,
                      const LossWeights& w);

enum class Stage { Warmup, Full };

/// Warm-up trains on the photometric term alone; the full stage adds geometry.
ad::Var adaptation_loss(ad::Var photometric_value, const GeometryLoss& geometry, Stage stage);

}  // namespace instag::loss
