// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "instag/encoders.hpp"
#include "instag/gaussian_field.hpp"

namespace instag::motion {

/// Per-frame driving signal: audio features followed by expression features.
struct ConditionLayout {
    std::size_t audio = 8;
    std::size_t expression = 4;
    std::size_t total() const { return audio + expression; }
    bool operator==(const ConditionLayout&) const = default;
};

struct FieldConfig {
    enc::HashGridConfig grid;
    std::vector<std::size_t> hidden{64, 32};
    std::size_t attention_hidden = 32;
    /// Deformation fields report their output minus the output at the zero
    /// condition, so motion vanishes at neutral. Ignored by the mouth field.
    bool neutral_reference = true;
    bool operator==(const FieldConfig&) const = default;
};

FieldConfig universal_config();  ///< face planes 16 -> 256, decoder 64/32
FieldConfig personal_config();   ///< smaller planes, decoder 32/16
FieldConfig mouth_config();      ///< mouth planes 64 -> 384, decoder 64/32
enc::HashGridConfig aligner_grid();  ///< 6 levels, 16 -> 128

/// Spatial encoder, region attention over conditions and a decoder with
/// heads for position (3), log-scale (3) and rotation (4) offsets.
/// Used for the universal field and for every personalized field.
class DeformationField {
public:
    DeformationField(std::string prefix, FieldConfig cfg, ConditionLayout layout);

    void register_params(ParameterStore& store, std::uint64_t seed) const;
    /// mu is N x 3, cond is 1 x layout.total().
    gs::DeformationVars deform(ad::Tape& tape, ParameterStore& store, ad::Var mu, ad::Var cond) const;

    const std::string& prefix() const { return prefix_; }
    const FieldConfig& config() const { return cfg_; }
    const ConditionLayout& layout() const { return layout_; }

private:
    std::string prefix_;
    FieldConfig cfg_;
    ConditionLayout layout_;
    enc::TriPlane encoder_;
    enc::RegionAttention attention_;
    enc::Mlp decoder_;
};

struct Alignment {
    ad::Var offset;  ///< N x 3
    ad::Var tau;     ///< N x 3, 1 + 0.5 tanh(raw)
};

/// Per-point coordinate offset and motion scale for a new identity.
class MotionAligner {
public:
    explicit MotionAligner(std::string prefix = "aligner", enc::HashGridConfig grid = aligner_grid(),
                           std::size_t hidden = 32);

    void register_params(ParameterStore& store, std::uint64_t seed) const;
    Alignment align(ad::Tape& tape, ParameterStore& store, ad::Var mu) const;

    const std::string& prefix() const { return prefix_; }

private:
    std::string prefix_;
    enc::TriPlane encoder_;
    enc::Mlp offset_head_;
    enc::Mlp scale_head_;
};

/// Residual fields of the pre-training identities, "pfield/<i>/...".
class PersonalizedFields {
public:
    PersonalizedFields(std::size_t count, FieldConfig cfg, ConditionLayout layout);

    void register_params(ParameterStore& store, std::uint64_t seed) const;
    /// Throws UsageError for an unknown identity.
    const DeformationField& at(std::size_t identity) const;
    std::size_t size() const { return fields_.size(); }
    static std::string prefix(std::size_t identity);

private:
    std::vector<DeformationField> fields_;
};

/// Position offsets multiplied by tau (N x 3); scale and rotation untouched.
gs::DeformationVars scale_position(const gs::DeformationVars& d, ad::Var tau);

/// Universal deformation queried at mu + offset with the position offset
/// scaled by tau. With no aligner this is the plain universal deformation.
gs::DeformationVars align_and_deform(const MotionAligner* aligner, const DeformationField& umf, ad::Tape& tape,
                                     ParameterStore& store, ad::Var mu, ad::Var cond);

struct FaceMotionCues {
    ad::Var max;   ///< 1 x 3
    ad::Var min;   ///< 1 x 3
    ad::Var dist;  ///< 1 x 3, max - min
    ad::Var packed() const { return ad::concat_cols({max, min, dist}); }
};

/// Componentwise extremes of the face position offsets (N x 3, N >= 1).
FaceMotionCues face_motion_cues(ad::Var face_d_mu);

/// Inside-mouth field: position offsets only, driven by audio and the face
/// cues, with a per-point per-axis hook scale 1 + MLP(spatial, dist).
class MouthMotionField {
public:
    MouthMotionField(std::string prefix, FieldConfig cfg, ConditionLayout layout, std::size_t hook_hidden = 32);

    void register_params(ParameterStore& store, std::uint64_t seed) const;
    /// cond is the full 1 x total() condition row; only the audio part is read.
    /// Without cues (hook disabled) the cue input is zero and no scale is applied.
    ad::Var deform(ad::Tape& tape, ParameterStore& store, ad::Var mu, ad::Var cond, const FaceMotionCues* cues) const;
    /// Hook scale alone (N x 3), for diagnostics.
    ad::Var hook_scale(ad::Tape& tape, ParameterStore& store, ad::Var spatial, ad::Var dist) const;

    const std::string& prefix() const { return prefix_; }
    const FieldConfig& config() const { return cfg_; }

private:
    std::string prefix_;
    FieldConfig cfg_;
    ConditionLayout layout_;
    enc::TriPlane encoder_;
    enc::RegionAttention attention_;
    enc::Mlp decoder_;
    enc::Mlp hook_;
};

}  // namespace instag::motion
