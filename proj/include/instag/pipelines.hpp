// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "instag/checkpoint.hpp"
#include "instag/motion_fields.hpp"
#include "instag/rasterizer.hpp"
#include "instag/synthetic_scenes.hpp"
#include "json.hpp"

namespace instag::pipe {

struct LearningRates {
    double grid = 5e-3;
    double network = 5e-4;
    double gaussian = 2e-3;
    LrMap map() const;
};

struct DensifySchedule {
    bool enabled = true;
    std::size_t start = 500;
    std::size_t interval = 500;
    double until_fraction = 0.6;  ///< no density control after this share of iterations
    gs::DensifyThresholds thresholds;
    bool active(std::size_t iteration, std::size_t total) const;
};

/// Hash tables at 2^12 rows: 64x64 renders of ~1000 primitives touch far
/// fewer cells than that, and the optimizer cost scales with table size.
inline constexpr std::size_t kDeskTable = std::size_t{1} << 12;
inline motion::FieldConfig desk_field(motion::FieldConfig c) {
    c.grid.table_size = kDeskTable;
    return c;
}
inline enc::HashGridConfig desk_grid(enc::HashGridConfig g) {
    g.table_size = kDeskTable;
    return g;
}

struct ModelConfig {
    motion::ConditionLayout layout;
    motion::FieldConfig umf = desk_field(motion::universal_config());
    motion::FieldConfig personal = motion::personal_config();
    motion::FieldConfig mouth = desk_field(motion::mouth_config());
    enc::HashGridConfig aligner = desk_grid(motion::aligner_grid());
    std::size_t hook_hidden = 32;
    std::size_t face_points = 1000;
    std::size_t mouth_points = 150;
    gs::Box face_box{{-0.6, -0.75, -0.55}, {0.6, 0.75, 0.3}};
    gs::Box mouth_box{{-0.14, 0.26, -0.46}, {0.14, 0.4, -0.3}};
    void validate() const;
};

/// Every trainable piece of the avatar, addressed by parameter-name prefix.
class Model {
public:
    Model(ModelConfig cfg, std::size_t personal_count);
    const ModelConfig& config() const { return cfg_; }
    const motion::DeformationField& umf() const { return umf_; }
    const motion::MouthMotionField& mouth_field() const { return mouth_; }
    const motion::PersonalizedFields& personal() const { return personal_; }
    const motion::MotionAligner& face_aligner() const { return face_aligner_; }
    const motion::MotionAligner& mouth_aligner() const { return mouth_aligner_; }

    void register_umf(ParameterStore& store, std::uint64_t seed) const;
    void register_personal(ParameterStore& store, std::uint64_t seed) const;
    void register_aligners(ParameterStore& store, std::uint64_t seed) const;
    /// Random structure fields under "<prefix>/face" and "<prefix>/mouth".
    void register_structure(ParameterStore& store, const std::string& prefix, std::uint64_t seed) const;

    /// Hyperparameter records stored with every checkpoint.
    void put_meta(Checkpoint& ckpt) const;
    /// Throws ConfigError when the checkpoint was made with other hyperparameters.
    void check_meta(const Checkpoint& ckpt) const;
    static ModelConfig config_from_meta(const Checkpoint& ckpt);

private:
    ModelConfig cfg_;
    motion::DeformationField umf_;
    motion::MouthMotionField mouth_;
    motion::PersonalizedFields personal_;
    motion::MotionAligner face_aligner_;
    motion::MotionAligner mouth_aligner_;
};

inline const char* kUmfPrefix = "umf";
inline const char* kMouthFieldPrefix = "mouth_field";
std::string identity_prefix(std::size_t i);  ///< "id/<i>"
inline const char* kPersonPrefix = "person";

struct ForwardOptions {
    std::string structure;  ///< prefix holding "face" and "mouth" fields
    const motion::DeformationField* personal = nullptr;
    bool aligner = false;
    bool hook = true;
};

struct Forward {
    gs::GaussianVars face, mouth;  ///< deformed
    gs::DeformationVars face_deform;
    ad::Var umf_d_mu;       ///< universal part of the face offsets
    ad::Var personal_d_mu;  ///< invalid without a personalized field
    ad::Var mouth_d_mu;
    motion::FaceMotionCues cues;
    motion::Alignment face_alignment;  ///< invalid without the aligner
    render::Layer face_layer, mouth_layer, composite;
    render::Frame frame;
};

Forward forward(ad::Tape& tape, ParameterStore& store, const Model& model, const ForwardOptions& opts,
                const Tensor& cond, const render::Camera& cam, const render::RenderSettings& rs,
                const Eigen::Vector3d& background);

// ---------------------------------------------------------------------------

struct PretrainConfig {
    std::size_t iterations = 5000;
    std::uint64_t seed = 0;
    loss::LossWeights weights;
    LearningRates lr;
    ModelConfig model;
    DensifySchedule densify;
    bool personal_fields = true;
    bool retain_personal = false;  ///< keep personalized fields in the output
    bool hook = true;
    double mouth_weight = 1.0;  ///< photometric weight on the mouth-only render
    DType storage = DType::F32;
    int threads = 1;
    std::size_t psnr_frames = 12;  ///< training frames per identity scored at the end
    /// Optional full-state snapshot every `state_every` iterations.
    std::size_t state_every = 0;
    std::filesystem::path state_path;
    void validate() const;
};

/// Full training state: parameters, optimizer moments, density statistics
/// and the iteration counter. Enough to resume bit for bit.
struct TrainState {
    ParameterStore store;
    AdamW opt;
    std::map<std::string, gs::DensifyStats> stats;
    std::size_t iteration = 0;
    Checkpoint to_checkpoint(const Model& model) const;
    static TrainState from_checkpoint(const Checkpoint& ckpt, const Model& model);
};

struct PretrainResult {
    Checkpoint checkpoint;  ///< universal fields (+ personalized fields when retained)
    nlohmann::json metrics;
};

/// Called after every iteration with the 1-based count; returning false stops.
using Progress = std::function<bool(std::size_t iteration, double loss)>;

PretrainResult pretrain(const PretrainConfig& cfg, const std::vector<synth::Dataset>& corpus,
                        const Checkpoint* resume = nullptr, const Progress& progress = {});

// ---------------------------------------------------------------------------

struct AdaptConfig {
    std::size_t iterations = 10000;
    std::size_t warmup = 3000;
    std::uint64_t seed = 0;
    loss::LossWeights weights;
    LearningRates lr;
    double warmup_umf_lr = 0.1;  ///< multiplier on the universal fields during warm-up
    DensifySchedule densify;
    bool aligner = true;
    bool hook = true;
    bool freeze_umf = false;
    double mouth_weight = 1.0;
    DType storage = DType::F32;
    int threads = 1;
    std::size_t eval_every = 0;  ///< held-out PSNR curve when a test set is given
    void validate() const;
};

struct AdaptResult {
    Checkpoint checkpoint;  ///< person model
    nlohmann::json metrics;
    std::vector<std::pair<std::size_t, double>> curve;  ///< (iteration, held-out PSNR)
};

/// With `pretrained == nullptr` the motion fields start from their fresh
/// initialization (the from-scratch baseline) using `model_cfg`.
AdaptResult adapt(const AdaptConfig& cfg, const synth::Dataset& train, const Checkpoint* pretrained,
                  const ModelConfig& model_cfg, const synth::Dataset* test = nullptr);

// ---------------------------------------------------------------------------

/// Rebuilt person model ready for rendering.
struct PersonModel {
    Model model;
    ParameterStore store;
    bool aligner = true;
    bool hook = true;
};
PersonModel load_person(const Checkpoint& ckpt);

struct FrameScore {
    double psnr = 0.0;
    double mouth_psnr = 0.0;  ///< pixels inside the mouth box
    double depth_mae = 0.0;   ///< where the ground-truth alpha exceeds 0.5
};
/// Identical images score the capped sentinel 99.
FrameScore score_frame(const Tensor& image, const Tensor& depth, const synth::FrameRecord& gt);

struct EvalOptions {
    int threads = 1;
};

/// Per-frame PSNR, mouth-region PSNR, depth error and motion diagnostics
/// plus their means.
nlohmann::json evaluate(const PersonModel& pm, const synth::Dataset& test, const EvalOptions& opts = {});

/// Cosine between the universal field's motion (relative to its output at the
/// neutral condition) and the oracle law over the canonical points of `probes` and a fixed condition set, and the mean truncated
/// pairwise dot of the personalized fields at the same points.
struct DecompositionScores {
    double umf_cosine = 0.0;
    double personal_pair_dot = 0.0;
    std::size_t pairs = 0;
};
DecompositionScores decomposition_scores(const Model& model, ParameterStore& store,
                                         const std::vector<synth::SyntheticIdentity>& probes, bool with_personal);

struct Frames {
    std::vector<Tensor> color, depth, normal;
    double seconds = 0.0;
};
Frames synthesize(const PersonModel& pm, const Tensor& conditions, const std::vector<synth::CameraPose>& cameras,
                  const Eigen::Vector3d& background, int threads = 1);

double mean(const std::vector<double>& v);
double pearson(const std::vector<double>& x, const std::vector<double>& y);
/// Deterministic per-iteration stream seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t iteration, std::uint64_t salt = 0);

}  // namespace instag::pipe
