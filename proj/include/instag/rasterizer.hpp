// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <limits>

#include "instag/autodiff.hpp"
#include "instag/gaussian_field.hpp"

namespace instag::render {

/// Pinhole camera, OpenCV convention (x right, y down, looking along +z).
/// Maps world points with p_cam = R * p + t.
struct Camera {
    double fx = 80.0, fy = 80.0, cx = 32.0, cy = 32.0;
    int width = 64, height = 64;
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t{0.0, 0.0, 2.5};
    double znear = 0.05;

    std::size_t pixels() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    /// Throws UsageError on a bad intrinsic or a non-orthonormal R.
    void validate() const;
    /// Camera on a sphere of radius `distance` around the origin. yaw turns
    /// about the vertical axis, pitch about the horizontal one (radians).
    static Camera orbit(double yaw, double pitch, double distance = 2.5, int width = 64, int height = 64,
                        double focal = 80.0);
};

struct RenderSettings {
    double max_alpha = 0.99;
    double min_alpha = 1.0 / 255.0;  ///< contributions below are skipped
    double min_transmittance = 1e-4;  ///< stop compositing below this
    double extent_sigma = 3.5;        ///< footprint radius in standard deviations
    double blur = 0.3;                ///< added to the 2D covariance diagonal
    double depth_eps = 1e-6;
    int threads = 1;
    int tile = 8;

    /// No truncation anywhere: every primitive touches every pixel. Used by
    /// finite-difference checks, where the cutoffs would add discontinuities.
    static RenderSettings exact();
};

/// Columns of the packed projection produced by `project`.
enum ProjCol : std::size_t { kU = 0, kV, kConicA, kConicB, kConicC, kDepth, kNx, kNy, kNz, kSigma, kProjCols };

/// Screen-space projection of each primitive: pixel center (u, v), inverse
/// 2D covariance (A, B, C), camera depth, camera-facing normal and the
/// largest screen standard deviation (0 when culled). Differentiable in
/// mu, log_scale and rotation; the last column carries no gradient.
ad::Var project(ad::Var mu, ad::Var log_scale, ad::Var rotation, const Camera& cam, const RenderSettings& rs);

/// Front-to-back compositing. `opacity` and `color` are probabilities
/// (N x 1, N x 3). Output is P x 8 per pixel: rgb (with background times
/// remaining transmittance), sum of weights, sum of weighted depth, sum of
/// weighted normals.
ad::Var rasterize_raw(ad::Var proj, ad::Var opacity, ad::Var color, const Camera& cam, const RenderSettings& rs,
                      const Eigen::Vector3d& background);

/// Unnormalized render of one branch.
struct Layer {
    ad::Var color;       ///< P x 3
    ad::Var alpha;       ///< P x 1
    ad::Var depth_sum;   ///< P x 1
    ad::Var normal_sum;  ///< P x 3
    ad::Var proj;        ///< N x kProjCols, invalid for composites
};

/// Normalized render: depth and normal divided out.
struct Frame {
    ad::Var color, alpha, depth, normal;
};

Layer render_layer(const gs::GaussianVars& g, const Camera& cam, const RenderSettings& rs,
                   const Eigen::Vector3d& background);
/// Mouth behind face. The face layer must be rendered on a zero background.
Layer composite(const Layer& face, const Layer& mouth);
Frame finish(const Layer& layer, double eps = 1e-6);
Frame render_frame(const gs::GaussianVars& g, const Camera& cam, const RenderSettings& rs,
             const Eigen::Vector3d& background);

/// Plain copy of a rendered frame, rows are pixels in row-major image order.
struct Image {
    int width = 0, height = 0;
    Tensor color, alpha, depth, normal;
};
Image to_image(const Frame& f, const Camera& cam);

/// Gradient of the loss w.r.t. projected centers of a layer after backward
/// (N x 2, zeros when nothing reached it) and the visibility mask (N x 1).
Tensor screen_gradient(const Layer& layer);
Tensor visible_mask(const Layer& layer);

// File output.
void write_ppm(const std::filesystem::path& path, const Tensor& rgb, int width, int height);
Tensor read_ppm(const std::filesystem::path& path, int& width, int& height);
/// Little-endian float32 raster: "ITRF", u32 width, u32 height, u32 channels, payload.
void write_raster(const std::filesystem::path& path, const Tensor& data, int width, int height);
Tensor read_raster(const std::filesystem::path& path, int& width, int& height);

double psnr(const Tensor& a, const Tensor& b, double cap = 99.0);

}  // namespace instag::render
