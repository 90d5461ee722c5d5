// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "instag/gaussian_field.hpp"
#include "instag/losses.hpp"
#include "instag/motion_fields.hpp"
#include "instag/rasterizer.hpp"

namespace instag::synth {

enum class Region : std::uint8_t { UpperFace = 0, Lips = 1, InsideMouth = 2, Rigid = 3 };
std::string_view region_name(Region r);

/// Head geometry shared by all identities. The face looks toward -z
/// (the default camera), +y points down in the image.
struct HeadShape {
    Eigen::Vector3d semi_axes{0.55, 0.7, 0.5};
    Eigen::Vector2d lip_center{0.0, 0.33};  ///< (x, y) on the front of the shell
    Eigen::Vector2d lip_radii{0.2, 0.1};    ///< elliptical lip outline
    double lip_inner = 0.45;                ///< inner edge of the lip ring, relative
    double mouth_depth = 0.06;              ///< inside-mouth recess behind the shell
    double upper_face_y = -0.15;            ///< upper face lies above this
    double front_limit = 0.25;              ///< shell kept where z <= front_limit * c
};

struct SceneConfig {
    std::size_t n_points = 1500;
    double frac_upper = 0.3;
    double frac_lips = 0.15;
    double frac_mouth = 0.1;  ///< rigid takes the rest
    HeadShape shape;
    motion::ConditionLayout layout;
    /// Mean |personal| / mean |universal| per region.
    double personal_ratio = 0.45;
    double max_pair_cosine = 0.5;
};

/// Personal motion: per-region linear maps from the condition row to a
/// displacement (3 x C). The lip map translates the whole lip ring and,
/// through the jaw, moves the inside of the mouth at 0.6.
struct PersonalMap {
    Tensor upper;  ///< 3 x C
    Tensor lips;   ///< 3 x C
    std::vector<double> flat() const;
};

struct SyntheticIdentity {
    std::uint64_t seed = 0;
    SceneConfig config;
    gs::StructureField face;   ///< upper face, lips, rigid
    gs::StructureField mouth;  ///< inside mouth
    std::vector<Region> face_regions;
    Tensor face_canonical;   ///< N x 3, positions before the structural offset
    Tensor mouth_canonical;  ///< M x 3
    PersonalMap personal;
    Eigen::Vector3d offset = Eigen::Vector3d::Zero();  ///< structural shift
    double motion_scale = 1.0;

    std::size_t region_count(Region r) const;
    /// Moves the geometry by `shift` and scales all motion by `scale`.
    void set_structure(const Eigen::Vector3d& shift, double scale);
};

/// Universal law at a canonical position. Zero for C = 0 and for rigid points.
Eigen::Vector3d universal_motion(Region region, const Eigen::Vector3d& canonical, const Tensor& cond,
                                 const HeadShape& shape, const motion::ConditionLayout& layout);
/// Lip opening driven by the first audio channel.
double lip_opening(const Tensor& cond);

SyntheticIdentity make_identity(std::uint64_t seed, const SceneConfig& cfg = {});
/// Identities `base_seed + i`. Personal maps are centered over the corpus so
/// their mean is zero, rescaled to the configured ratio, and redrawn until
/// every pair has cosine <= max_pair_cosine.
std::vector<SyntheticIdentity> make_corpus(std::size_t k, std::uint64_t base_seed, const SceneConfig& cfg = {});
/// Rescales each region map so its ratio (lips counting the mouth) is `ratio`.
void normalize_personal(SyntheticIdentity& id, double ratio);
double personal_ratio(const SyntheticIdentity& id, Region r);
double map_cosine(const PersonalMap& a, const PersonalMap& b);

struct DeformParts {
    Tensor universal_face, personal_face;    ///< N x 3
    Tensor universal_mouth, personal_mouth;  ///< M x 3
};
/// Ground-truth deformation split; motion_scale is applied to both parts.
DeformParts gt_deform(const SyntheticIdentity& id, const Tensor& cond);

/// T x C band-limited stream: per channel at most 5 sinusoids on DFT bins
/// up to `cutoff` cycles per frame, amplitudes summing to at most 1.
Tensor condition_stream(std::uint64_t seed, std::size_t frames, const motion::ConditionLayout& layout = {},
                        double cutoff = 0.1);

struct CameraPose {
    double yaw = 0.0, pitch = 0.0;  ///< radians
    double distance = 2.5;
    double focal = 80.0;
    int width = 64, height = 64;
    render::Camera camera() const { return render::Camera::orbit(yaw, pitch, distance, width, height, focal); }
};
/// Mostly frontal poses with yaw and pitch within +-max_deg.
std::vector<CameraPose> jittered_cameras(std::uint64_t seed, std::size_t count, double max_deg = 20.0, int width = 64,
                                         int height = 64);

struct FrameRecord {
    Tensor cond;  ///< 1 x C
    CameraPose pose;
    Tensor image;        ///< P x 3
    Tensor mouth_image;  ///< P x 3, mouth branch alone over the background
    Tensor alpha;        ///< P x 1
    Tensor depth;        ///< P x 1
    Tensor normal;       ///< P x 3
    Tensor mouth_mask;   ///< P x 1, box around the lips
    loss::GeometryTargets targets;  ///< corrupted depth and normal
    DeformParts deform;
};

struct Dataset {
    SyntheticIdentity identity;
    Eigen::Vector3d background{1.0, 1.0, 1.0};
    std::vector<FrameRecord> frames;
    int width = 64, height = 64;
    std::size_t size() const { return frames.size(); }
};

struct RenderedScene {
    render::Image image;
    Tensor mouth_image;
};
RenderedScene render_identity(const SyntheticIdentity& id, const DeformParts& parts, const render::Camera& cam,
                              const Eigen::Vector3d& background);
Tensor mouth_region_mask(const SyntheticIdentity& id, const DeformParts& parts, const render::Camera& cam,
                         int margin = 2);

struct GenerateOptions {
    std::uint64_t seed = 0;  ///< conditions, cameras and target corruption
    double jitter_deg = 20.0;
    Eigen::Vector3d background{1.0, 1.0, 1.0};
    int width = 64, height = 64;
    double cutoff = 0.1;
};
/// Renders a dataset in memory from conditions and poses (sizes must match).
Dataset build_dataset(const SyntheticIdentity& id, const Tensor& conditions, const std::vector<CameraPose>& poses,
                      const GenerateOptions& opts);
Dataset generate(const SyntheticIdentity& id, std::size_t frames, const GenerateOptions& opts);

/// Depth scaled by a in [0.5, 2], shifted by b in [-0.1, 0.1], plus noise
/// sigma 0.01; normals perturbed by the same noise and renormalized.
loss::GeometryTargets corrupt_targets(const Tensor& depth, const Tensor& normal, const Tensor& alpha,
                                      std::uint64_t seed);

/// Writes images, rasters, conditions and deformation records under `dir`
/// and returns the manifest path (`dir/manifest.json`).
std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& manifest);

}  // namespace instag::synth
