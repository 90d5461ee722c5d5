// SPDX-License-Identifier: Apache-2.0
#include "instag/motion_fields.hpp"

#include "instag/errors.hpp"

namespace instag::motion {

namespace {

std::vector<std::size_t> decoder_dims(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
    std::vector<std::size_t> dims{in};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(out);
    return dims;
}

void check_cond(ad::Var cond, const ConditionLayout& layout) {
    if (cond.rows() != 1 || cond.cols() != layout.total())
        throw UsageError("condition row must be 1 x " + std::to_string(layout.total()) + ", got " +
                         std::to_string(cond.rows()) + " x " + std::to_string(cond.cols()));
}

}  // namespace

FieldConfig universal_config() { return {}; }

FieldConfig personal_config() {
    FieldConfig c;
    c.grid.levels = 8;
    c.grid.table_size = std::size_t{1} << 12;
    c.grid.n_min = 16;
    c.grid.n_max = 128;
    c.hidden = {32, 16};
    c.attention_hidden = 16;
    return c;
}

FieldConfig mouth_config() {
    FieldConfig c;
    c.grid.n_min = 64;
    c.grid.n_max = 384;
    return c;
}

enc::HashGridConfig aligner_grid() {
    enc::HashGridConfig g;
    g.levels = 6;
    g.n_min = 16;
    g.n_max = 128;
    return g;
}

// ---------------------------------------------------------------------------

DeformationField::DeformationField(std::string prefix, FieldConfig cfg, ConditionLayout layout)
    : prefix_(std::move(prefix)),
      cfg_(std::move(cfg)),
      layout_(layout),
      encoder_(prefix_ + "/grid", cfg_.grid),
      attention_(prefix_ + "/attention", encoder_.output_dim(), layout_.total(), cfg_.attention_hidden),
      decoder_(prefix_ + "/decoder", decoder_dims(encoder_.output_dim() + layout_.total(), cfg_.hidden, 10)) {}

void DeformationField::register_params(ParameterStore& store, std::uint64_t seed) const {
    encoder_.register_params(store, seed);
    attention_.register_params(store, seed + 1);
    decoder_.register_params(store, seed + 2);
}

gs::DeformationVars DeformationField::deform(ad::Tape& tape, ParameterStore& store, ad::Var mu, ad::Var cond) const {
    check_cond(cond, layout_);
    const ad::Var spatial = encoder_.encode(tape, store, mu);
    const ad::Var gated = attention_.attend(tape, store, spatial, cond);
    ad::Var out = decoder_.forward(tape, store, ad::concat_cols({spatial, gated}));
    if (cfg_.neutral_reference) {
        // a condition-free offset would only be absorbed by the canonical points
        const ad::Var rest = attention_.attend(tape, store, spatial, tape.constant(Tensor(1, cond.cols())));
        out = ad::sub(out, decoder_.forward(tape, store, ad::concat_cols({spatial, rest})));
    }
    return {ad::slice_cols(out, 0, 3), ad::slice_cols(out, 3, 3), ad::slice_cols(out, 6, 4)};
}

PersonalizedFields::PersonalizedFields(std::size_t count, FieldConfig cfg, ConditionLayout layout) {
    fields_.reserve(count);
    for (std::size_t i = 0; i < count; ++i) fields_.emplace_back(prefix(i), cfg, layout);
}

void PersonalizedFields::register_params(ParameterStore& store, std::uint64_t seed) const {
    for (std::size_t i = 0; i < fields_.size(); ++i) fields_[i].register_params(store, seed + 97 * (i + 1));
}

const DeformationField& PersonalizedFields::at(std::size_t identity) const {
    if (identity >= fields_.size())
        throw UsageError("unknown identity " + std::to_string(identity) + " (have " + std::to_string(fields_.size()) +
                         ")");
    return fields_[identity];
}

std::string PersonalizedFields::prefix(std::size_t identity) { return "pfield/" + std::to_string(identity); }

// ---------------------------------------------------------------------------

MotionAligner::MotionAligner(std::string prefix, enc::HashGridConfig grid, std::size_t hidden)
    : prefix_(std::move(prefix)),
      encoder_(prefix_ + "/grid", grid),
      offset_head_(prefix_ + "/offset", {encoder_.output_dim(), hidden, 3}),
      scale_head_(prefix_ + "/scale", {encoder_.output_dim(), hidden, 3}) {}

void MotionAligner::register_params(ParameterStore& store, std::uint64_t seed) const {
    encoder_.register_params(store, seed);
    offset_head_.register_params(store, seed + 1);
    scale_head_.register_params(store, seed + 2);
}

Alignment MotionAligner::align(ad::Tape& tape, ParameterStore& store, ad::Var mu) const {
    const ad::Var spatial = encoder_.encode(tape, store, mu);
    return {offset_head_.forward(tape, store, spatial),
            ad::add_scalar(ad::scale(ad::tanh(scale_head_.forward(tape, store, spatial)), 0.5), 1.0)};
}

gs::DeformationVars align_and_deform(const MotionAligner* aligner, const DeformationField& umf, ad::Tape& tape,
                                     ParameterStore& store, ad::Var mu, ad::Var cond) {
    if (!aligner) return umf.deform(tape, store, mu, cond);
    const Alignment a = aligner->align(tape, store, mu);
    return scale_position(umf.deform(tape, store, ad::add(mu, a.offset), cond), a.tau);
}

gs::DeformationVars scale_position(const gs::DeformationVars& d, ad::Var tau) {
    gs::DeformationVars out = d;
    out.d_mu = ad::mul(d.d_mu, tau);
    return out;
}

FaceMotionCues face_motion_cues(ad::Var d_mu) {
    if (d_mu.rows() == 0) throw UsageError("face_motion_cues: empty face deformation");
    if (d_mu.cols() != 3) throw UsageError("face_motion_cues: expected N x 3 offsets");
    FaceMotionCues c;
    c.max = ad::max_rows(d_mu);
    c.min = ad::min_rows(d_mu);
    c.dist = ad::sub(c.max, c.min);
    return c;
}

// ---------------------------------------------------------------------------

MouthMotionField::MouthMotionField(std::string prefix, FieldConfig cfg, ConditionLayout layout, std::size_t hook_hidden)
    : prefix_(std::move(prefix)),
      cfg_(std::move(cfg)),
      layout_(layout),
      encoder_(prefix_ + "/grid", cfg_.grid),
      attention_(prefix_ + "/attention", encoder_.output_dim(), layout_.audio, cfg_.attention_hidden),
      decoder_(prefix_ + "/decoder", decoder_dims(encoder_.output_dim() + layout_.audio + 9, cfg_.hidden, 3)),
      hook_(prefix_ + "/hook", {encoder_.output_dim() + 3, hook_hidden, 3}) {}

void MouthMotionField::register_params(ParameterStore& store, std::uint64_t seed) const {
    encoder_.register_params(store, seed);
    attention_.register_params(store, seed + 1);
    decoder_.register_params(store, seed + 2);
    hook_.register_params(store, seed + 3);
}

ad::Var MouthMotionField::hook_scale(ad::Tape& tape, ParameterStore& store, ad::Var spatial, ad::Var dist) const {
    const ad::Var d = ad::repeat_rows(dist, spatial.rows());
    return ad::add_scalar(hook_.forward(tape, store, ad::concat_cols({spatial, d})), 1.0);
}

ad::Var MouthMotionField::deform(ad::Tape& tape, ParameterStore& store, ad::Var mu, ad::Var cond,
                                 const FaceMotionCues* cues) const {
    check_cond(cond, layout_);
    const std::size_t n = mu.rows();
    const ad::Var spatial = encoder_.encode(tape, store, mu);
    const ad::Var audio = ad::slice_cols(cond, 0, layout_.audio);
    const ad::Var gated = attention_.attend(tape, store, spatial, audio);
    const ad::Var phi = cues ? cues->packed() : tape.constant(Tensor(1, 9));
    const ad::Var d_mu = decoder_.forward(tape, store, ad::concat_cols({spatial, gated, ad::repeat_rows(phi, n)}));
    if (!cues) return d_mu;
    return ad::mul(d_mu, hook_scale(tape, store, spatial, cues->dist));
}

}  // namespace instag::motion
