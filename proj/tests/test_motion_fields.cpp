// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <array>
#include <cmath>
#include <random>

#include "instag/errors.hpp"
#include "instag/gradcheck.hpp"
#include "instag/losses.hpp"
#include "instag/motion_fields.hpp"
#include "instag/rasterizer.hpp"
#include "test_util.hpp"

using namespace instag;
using namespace instag::motion;
using instag::test::random_tensor;

namespace {

FieldConfig tiny_config() {
    FieldConfig c;
    c.grid.levels = 3;
    c.grid.table_size = 64;
    c.grid.n_min = 2;
    c.grid.n_max = 8;
    c.hidden = {8, 6};
    c.attention_hidden = 5;
    return c;
}

enc::HashGridConfig tiny_grid() { return tiny_config().grid; }

// Moves every parameter under `prefix` away from its zero initialization.
void scramble(ParameterStore& store, std::string_view prefix, std::mt19937_64& rng, double scale = 0.3) {
    for (Parameter* p : store.with_prefix(prefix)) p->value = random_tensor(p->value.rows, p->value.cols, rng, -scale, scale);
}

Tensor eval(const std::function<ad::Var(ad::Tape&)>& f) {
    ad::Tape t(false);
    return f(t).value();
}

}  // namespace

TEST_SUITE("motion") {

TEST_CASE("default configurations") {
    CHECK(universal_config().grid.levels == 12);
    CHECK(universal_config().grid.resolutions().back() == 256);
    CHECK(mouth_config().grid.resolutions().front() == 64);
    CHECK(mouth_config().grid.resolutions().back() == 384);
    CHECK(personal_config().hidden == std::vector<std::size_t>{32, 16});
    CHECK(aligner_grid().levels == 6);
    CHECK(aligner_grid().resolutions().back() == 128);
}

TEST_CASE("universal field starts at zero and ignores identity") {
    const DeformationField umf("umf", universal_config(), {});
    ParameterStore store;
    umf.register_params(store, 1);
    std::mt19937_64 rng(1);
    const Tensor mu = random_tensor(30, 3, rng), cond = random_tensor(1, 12, rng);
    ad::Tape t(false);
    const auto d = umf.deform(t, store, t.constant(mu), t.constant(cond));
    CHECK(d.d_mu.value().max_abs() == 0.0);
    CHECK(d.d_log_scale.value().max_abs() == 0.0);
    CHECK(d.d_rotation.value().max_abs() == 0.0);
    CHECK(d.d_mu.rows() == 30);
    CHECK(d.d_rotation.cols() == 4);
    CHECK_THROWS_AS(umf.deform(t, store, t.constant(mu), t.constant(Tensor(1, 11))), UsageError);
}

TEST_CASE("universal output depends on points only through mu and on frames only through C") {
    const DeformationField umf("umf", tiny_config(), {});
    ParameterStore store;
    umf.register_params(store, 2);
    std::mt19937_64 rng(2);
    scramble(store, "umf", rng);
    const Tensor mu = random_tensor(10, 3, rng), c1 = random_tensor(1, 12, rng), c2 = random_tensor(1, 12, rng);
    auto run = [&](const Tensor& m, const Tensor& c) {
        return eval([&](ad::Tape& t) { return umf.deform(t, store, t.constant(m), t.constant(c)).d_mu; });
    };
    // identity swap: the same (mu, C) queried for two "identities" agrees bitwise
    CHECK(run(mu, c1).data == run(mu, c1).data);
    CHECK(run(mu, c1).data != run(mu, c2).data);
    Tensor mu2 = mu;
    mu2(0, 0) += 0.3;
    const Tensor a = run(mu, c1), b = run(mu2, c1);
    CHECK(a.row(0)[0] != b.row(0)[0]);
    for (std::size_t i = 1; i < 10; ++i)
        for (int k = 0; k < 3; ++k) CHECK(a(i, k) == b(i, k));
}

TEST_CASE("neutral reference removes the condition-free part") {
    FieldConfig on = tiny_config(), off = tiny_config();
    off.neutral_reference = false;
    const DeformationField f_on("umf", on, {}), f_off("umf", off, {});
    ParameterStore store;
    f_on.register_params(store, 4);
    std::mt19937_64 rng(4);
    scramble(store, "umf", rng);
    const Tensor mu = random_tensor(12, 3, rng), c = random_tensor(1, 12, rng), zero(1, 12);
    auto run = [&](const DeformationField& f, const Tensor& cond) {
        ad::Tape t(false);
        const auto d = f.deform(t, store, t.constant(mu), t.constant(cond));
        return std::array<Tensor, 3>{d.d_mu.value(), d.d_log_scale.value(), d.d_rotation.value()};
    };
    const auto at_zero = run(f_on, zero);
    for (const Tensor& x : at_zero) CHECK(x.max_abs() == 0.0);
    CHECK(run(f_off, zero)[0].max_abs() > 1e-3);
    const auto got = run(f_on, c), raw = run(f_off, c), base = run(f_off, zero);
    for (int j = 0; j < 3; ++j)
        for (std::size_t i = 0; i < got[j].size(); ++i) CHECK(got[j][i] == doctest::Approx(raw[j][i] - base[j][i]).epsilon(1e-12));
}

TEST_CASE("personalized fields start at zero and reject unknown identities") {
    const PersonalizedFields pf(3, personal_config(), {});
    ParameterStore store;
    pf.register_params(store, 3);
    CHECK(pf.size() == 3);
    CHECK(store.contains("pfield/2/decoder/w0"));
    std::mt19937_64 rng(3);
    ad::Tape t(false);
    const auto d = pf.at(1).deform(t, store, t.constant(random_tensor(5, 3, rng)), t.constant(random_tensor(1, 12, rng)));
    CHECK(d.d_mu.value().max_abs() == 0.0);
    CHECK_THROWS_AS(pf.at(3), UsageError);
}

TEST_CASE("universal plus personal offsets add exactly") {
    // Dyadic values make every floating-point sum exact, so both orders agree bitwise.
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> k(-64, 64);
    auto dyadic = [&](std::size_t r, std::size_t c) {
        Tensor t(r, c);
        for (double& v : t.data) v = k(rng) / 128.0;
        return t;
    };
    gs::StructureField f = gs::StructureField::empty(gs::Branch::Face);
    for (int i = 0; i < 12; ++i) {
        gs::GaussianPrimitive g;
        g.mu = {k(rng) / 128.0, k(rng) / 128.0, k(rng) / 256.0};
        g.log_scale = Eigen::Vector3d::Constant(std::log(0.05));
        g.opacity_logit = 1.0;
        f.push_back(g);
    }
    ad::Tape t(false);
    const auto g = gs::field_constants(t, f);
    const gs::DeformationVars du{t.constant(dyadic(12, 3)), t.constant(dyadic(12, 3)), t.constant(dyadic(12, 4))};
    const gs::DeformationVars dp{t.constant(dyadic(12, 3)), t.constant(dyadic(12, 3)), t.constant(dyadic(12, 4))};
    const auto once = gs::apply_deformation(g, gs::add_deformations(du, dp));
    gs::GaussianVars seq = g;
    seq.mu = ad::add(ad::add(g.mu, du.d_mu), dp.d_mu);
    seq.log_scale = ad::add(ad::add(g.log_scale, du.d_log_scale), dp.d_log_scale);
    seq.rotation = ad::normalize_rows(ad::add(ad::add(g.rotation, du.d_rotation), dp.d_rotation));
    const render::Camera cam;
    const auto a = render::to_image(render::render_frame(once, cam, {}, Eigen::Vector3d::Zero()), cam);
    const auto b = render::to_image(render::render_frame(seq, cam, {}, Eigen::Vector3d::Zero()), cam);
    CHECK(a.color.data == b.color.data);
    CHECK(a.depth.data == b.depth.data);
    CHECK(a.normal.data == b.normal.data);
}

TEST_CASE("aligner is the identity at initialization") {
    const DeformationField umf("umf", universal_config(), {});
    const MotionAligner aligner;
    ParameterStore store;
    umf.register_params(store, 5);
    aligner.register_params(store, 6);
    std::mt19937_64 rng(5);
    scramble(store, "umf/decoder", rng);
    const Tensor mu = random_tensor(40, 3, rng), cond = random_tensor(1, 12, rng);
    ad::Tape t(false);
    const auto a = align_and_deform(&aligner, umf, t, store, t.constant(mu), t.constant(cond));
    const auto b = umf.deform(t, store, t.constant(mu), t.constant(cond));
    CHECK(a.d_mu.value().max_abs() > 0.0);
    CHECK(a.d_mu.value().data == b.d_mu.value().data);
    CHECK(a.d_log_scale.value().data == b.d_log_scale.value().data);
    CHECK(a.d_rotation.value().data == b.d_rotation.value().data);
    const Alignment al = aligner.align(t, store, t.constant(mu));
    CHECK(al.offset.value().max_abs() == 0.0);
    for (double v : al.tau.value().data) CHECK(v == 1.0);
}

TEST_CASE("tau scales only the position offsets") {
    std::mt19937_64 rng(6);
    ad::Tape t(false);
    const gs::DeformationVars d{t.constant(random_tensor(4, 3, rng)), t.constant(random_tensor(4, 3, rng)),
                                t.constant(random_tensor(4, 4, rng))};
    const auto s = scale_position(d, t.constant(Tensor(4, 3, 2.0)));
    for (std::size_t i = 0; i < 12; ++i) CHECK(s.d_mu.value()[i] == 2.0 * d.d_mu.value()[i]);
    CHECK(s.d_log_scale.value().data == d.d_log_scale.value().data);
    CHECK(s.d_rotation.value().data == d.d_rotation.value().data);
    // the aligner keeps tau inside (0.5, 1.5)
    const MotionAligner aligner("al", tiny_grid(), 4);
    ParameterStore store;
    aligner.register_params(store, 1);
    for (Parameter* p : store.with_prefix("al/scale")) p->value = random_tensor(p->value.rows, p->value.cols, rng, -50, 50);
    scramble(store, "al/grid", rng, 1.0);
    const Tensor tau = aligner.align(t, store, t.constant(random_tensor(50, 3, rng))).tau.value();
    for (double v : tau.data) {
        CHECK(v >= 0.5);
        CHECK(v <= 1.5);
    }
}

TEST_CASE("face motion cues") {
    ad::Tape t(false);
    auto cues = [&](Tensor d) { return face_motion_cues(t.constant(std::move(d))); };
    auto z = cues(Tensor(5, 3));
    CHECK(z.packed().value().max_abs() == 0.0);
    auto one = cues(Tensor(1, 3, {0.2, -0.1, 0.4}));
    CHECK(one.max.value().data == one.min.value().data);
    CHECK(one.dist.value().max_abs() == 0.0);
    auto two = cues(Tensor(2, 3, {1, 0, 0, -1, 2, 0}));
    CHECK(two.max.value().data == std::vector<double>{1, 2, 0});
    CHECK(two.min.value().data == std::vector<double>{-1, 0, 0});
    CHECK(two.dist.value().data == std::vector<double>{2, 2, 0});
    CHECK(two.packed().cols() == 9);
    CHECK_THROWS_AS(cues(Tensor(0, 3)), UsageError);
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const auto c = cues(random_tensor(1 + trial % 17, 3, rng, -5, 5));
        for (double v : c.dist.value().data) REQUIRE(v >= 0.0);
    }
}

TEST_CASE("cue gradients route to the extreme points") {
    ParameterStore store;
    store.add("d", Tensor(3, 3, {1, 0, 5, -2, 3, 5, 0, -1, 2}), ParamGroup::Network);
    ad::Tape t;
    const auto c = face_motion_cues(t.parameter(store, "d"));
    t.backward(ad::sum(c.dist));
    const Tensor& g = store.at("d").grad;
    CHECK(g(0, 0) == 1.0);
    CHECK(g(1, 0) == -1.0);
    CHECK(g(1, 1) == 1.0);
    CHECK(g(2, 1) == -1.0);
    CHECK(g(0, 2) == 1.0);  // first of the tied maxima
    CHECK(g(1, 2) == 0.0);
    CHECK(g(2, 2) == -1.0);
}

TEST_CASE("mouth field uses audio and cues but never expression") {
    const MouthMotionField mouth("mouth", tiny_config(), {});
    ParameterStore store;
    mouth.register_params(store, 8);
    std::mt19937_64 rng(8);
    const Tensor mu = random_tensor(7, 3, rng), cond = random_tensor(1, 12, rng);
    ad::Tape t(false);
    const auto cues = face_motion_cues(t.constant(random_tensor(9, 3, rng)));
    CHECK(mouth.deform(t, store, t.constant(mu), t.constant(cond), &cues).value().max_abs() == 0.0);
    CHECK(mouth.deform(t, store, t.constant(mu), t.constant(cond), &cues).cols() == 3);
    scramble(store, "mouth", rng);
    Tensor other = cond;
    for (std::size_t k = 8; k < 12; ++k) other[k] = -other[k];
    auto run = [&](const Tensor& c, const FaceMotionCues* q) {
        return mouth.deform(t, store, t.constant(mu), t.constant(c), q).value();
    };
    CHECK(run(cond, &cues).data == run(other, &cues).data);
    CHECK(run(cond, nullptr).data == run(other, nullptr).data);
    Tensor loud = cond;
    loud[0] += 0.5;
    CHECK(run(cond, &cues).data != run(loud, &cues).data);
    // zero cues feed the same input as the hook-free path; only the scale differs
    const FaceMotionCues zero = face_motion_cues(t.constant(Tensor(4, 3)));
    const Tensor with_zero = run(cond, &zero), without = run(cond, nullptr);
    const Tensor tau =
        mouth.hook_scale(t, store, enc::TriPlane("mouth/grid", tiny_grid()).encode(t, store, t.constant(mu)),
                         t.constant(Tensor(1, 3)))
            .value();
    for (std::size_t i = 0; i < with_zero.size(); ++i) CHECK(with_zero[i] == doctest::Approx(without[i] * tau[i]));
}

TEST_CASE("hook scale starts at one") {
    const MouthMotionField mouth("mouth", tiny_config(), {});
    ParameterStore store;
    mouth.register_params(store, 9);
    std::mt19937_64 rng(9);
    ad::Tape t(false);
    const ad::Var spatial = t.constant(random_tensor(6, 3 * tiny_grid().output_dim(), rng));
    const Tensor tau = mouth.hook_scale(t, store, spatial, t.constant(random_tensor(1, 3, rng))).value();
    for (double v : tau.data) CHECK(v == 1.0);
}

TEST_CASE("composed pipeline gradients match central differences") {
    // encode -> attend -> decode -> align -> deform -> render face; hook the
    // mouth on the face cues; composite; photometric + geometry loss.
    const ConditionLayout layout;
    const DeformationField umf("umf", tiny_config(), layout);
    const MotionAligner aligner("aligner", tiny_grid(), 5);
    const MouthMotionField mouth("mouth", tiny_config(), layout, 5);
    render::Camera cam;
    cam.width = cam.height = 8;
    cam.fx = cam.fy = 10.0;
    cam.cx = cam.cy = 4.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(200 + seed);
        ParameterStore store;
        umf.register_params(store, seed);
        aligner.register_params(store, seed + 10);
        mouth.register_params(store, seed + 20);
        for (const char* p : {"umf", "aligner", "mouth"}) scramble(store, p, rng, 0.2);
        for (Parameter* p : store.with_prefix("aligner/offset")) p->value = random_tensor(p->value.rows, p->value.cols, rng, -0.02, 0.02);
        gs::StructureField face = gs::StructureField::empty(gs::Branch::Face), inner = gs::StructureField::empty(gs::Branch::Mouth);
        for (int i = 0; i < 2; ++i) {
            gs::GaussianPrimitive g;
            // off the grid lattice: mu = 0 sits on a vertex at every level
            g.mu = {0.3 * (i - 0.5) + 0.013, 0.1 * i + 0.021, 0.1 * i + 0.017};
            g.log_scale = {std::log(0.35), std::log(0.25), std::log(0.12)};
            g.rotation = Eigen::Vector4d(1.0, 0.2 * i, -0.1, 0.3).normalized();
            g.opacity_logit = 0.3;
            g.color_logit = {0.2, -0.1 * i, 0.4};
            face.push_back(g);
            g.mu = {0.1 * i + 0.011, 0.052, 0.31};
            g.opacity_logit = 1.0;
            inner.push_back(g);
        }
        gs::register_field(store, "face", face);
        gs::register_field(store, "mouth", inner);
        const Tensor cond = random_tensor(1, 12, rng);
        const Tensor target = random_tensor(64, 3, rng, 0, 1);
        loss::GeometryTargets geo{random_tensor(64, 1, rng, 2, 3), Tensor(64, 3), Tensor(64, 1, 1.0)};
        for (std::size_t p = 0; p < 64; ++p) geo.normal(p, 2) = -1.0;
        auto loss_fn = [&](ad::Tape& t) {
            const auto rs = render::RenderSettings::exact();
            const ad::Var c = t.constant(cond);
            const auto gf = gs::field_vars(t, store, "face");
            const auto df = align_and_deform(&aligner, umf, t, store, gf.mu, c);
            const auto face_def = gs::apply_deformation(gf, df);
            const auto cues = face_motion_cues(df.d_mu);
            const auto gm = gs::field_vars(t, store, "mouth");
            const auto mouth_def = gs::apply_deformation(gm, {mouth.deform(t, store, gm.mu, c, &cues)});
            const auto lf = render::render_layer(face_def, cam, rs, Eigen::Vector3d::Zero());
            const auto lm = render::render_layer(mouth_def, cam, rs, {1.0, 1.0, 1.0});
            const auto fr = render::finish(render::composite(lf, lm));
            const ad::Var photo = loss::photometric(fr.color, t.constant(target), 8, 8);
            loss::LossWeights w;
            w.lambda_d = 0.5;
            w.lambda_n = 0.5;
            return loss::adaptation_loss(photo, loss::geometry_loss(fr.depth, fr.normal, geo, w), loss::Stage::Full);
        };
        FiniteDiffOptions opts;
        opts.seed = seed;
        opts.samples = 6;
        const auto r = finite_diff_check(loss_fn, store, opts);
        INFO("seed " << seed << " " << r.worst_parameter << "[" << r.worst_index << "] " << r.worst_analytic << " vs "
                     << r.worst_numeric);
        CHECK(r.max_rel_error <= 1e-4);
    }
}

}
