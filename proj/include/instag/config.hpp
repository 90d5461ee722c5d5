// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "instag/pipelines.hpp"
#include "json.hpp"

namespace instag::cfg {

namespace fs = std::filesystem;

/// Reads a JSON file. Missing file -> IoError, malformed text -> ConfigError.
nlohmann::json load_json(const fs::path& path);
/// Writes pretty-printed JSON with a trailing newline.
void save_json(const fs::path& path, const nlohmann::json& j);

// Relative paths inside a config resolve against the config's directory.

struct PretrainJob {
    pipe::PretrainConfig config;
    std::vector<fs::path> corpus;  ///< dataset manifests, one per identity
    fs::path output;               ///< checkpoint
    fs::path metrics;
    std::optional<fs::path> resume;  ///< state snapshot to continue from
};

struct AdaptJob {
    pipe::AdaptConfig config;
    pipe::ModelConfig model;             ///< used only without a checkpoint
    std::optional<fs::path> checkpoint;  ///< pre-trained universal fields
    fs::path train;
    std::optional<fs::path> test;
    fs::path output;
    fs::path metrics;
};

struct TargetSpec {
    std::string name;
    std::uint64_t identity_seed = 900;
    Eigen::Vector3d offset = Eigen::Vector3d::Zero();
    double motion_scale = 1.0;
    std::size_t train_frames = 25;
    std::size_t test_frames = 20;
    std::size_t extrapolated_frames = 0;  ///< test views with yaw beyond the jitter range
    double extrapolated_min_deg = 30.0;
    double extrapolated_max_deg = 40.0;
};

struct GenDataJob {
    fs::path out;
    std::uint64_t seed = 0;
    std::size_t identities = 3;
    std::size_t corpus_frames = 100;
    std::uint64_t corpus_base_seed = 100;
    synth::SceneConfig scene;
    int width = 64, height = 64;
    double jitter_deg = 20.0;
    double cutoff = 0.1;
    std::vector<TargetSpec> targets;
};

/// Each parser rejects unknown keys and ill-typed values with ConfigError.
PretrainJob parse_pretrain(const nlohmann::json& j, const fs::path& base = {});
AdaptJob parse_adapt(const nlohmann::json& j, const fs::path& base = {});
GenDataJob parse_gen_data(const nlohmann::json& j, const fs::path& base = {});
pipe::ModelConfig parse_model(const nlohmann::json& j);

/// Writes the corpus, every target's train/test/extrapolated sets and an
/// index (`out/index.json`) listing the manifests. Returns the index path.
fs::path run_gen_data(const GenDataJob& job);

/// Condition file: an array of rows, or {"stream": {"seed", "frames", "cutoff"}}
/// or {"zeros": frames}.
Tensor parse_conditions(const nlohmann::json& j, const motion::ConditionLayout& layout);
/// Camera file: array of {"yaw_deg", "pitch_deg", "distance", "focal", "width", "height"}.
std::vector<synth::CameraPose> parse_cameras(const nlohmann::json& j);

}  // namespace instag::cfg
