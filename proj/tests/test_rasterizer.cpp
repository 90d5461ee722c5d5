// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "instag/errors.hpp"
#include "instag/gradcheck.hpp"
#include "instag/rasterizer.hpp"
#include "test_util.hpp"

using namespace instag;
using namespace instag::render;
using gs::Branch;
using gs::GaussianPrimitive;
using gs::StructureField;

namespace {

// Independent reference: 2D covariance from a central-difference Jacobian of
// the pinhole map and an Eigen quaternion.
Eigen::Matrix2d oracle_cov2d(const GaussianPrimitive& g, const Camera& cam, double blur = 0.3) {
    auto pi = [&](const Eigen::Vector3d& w) {
        const Eigen::Vector3d p = cam.R * w + cam.t;
        return Eigen::Vector2d(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy);
    };
    Eigen::Matrix<double, 2, 3> J;
    const double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
        Eigen::Vector3d e = Eigen::Vector3d::Zero();
        e[k] = h;
        J.col(k) = (pi(g.mu + e) - pi(g.mu - e)) / (2 * h);
    }
    const Eigen::Quaterniond q(g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]);
    const Eigen::Matrix3d R = q.normalized().toRotationMatrix();
    const Eigen::Vector3d var = (2.0 * g.log_scale).array().exp();
    const Eigen::Matrix3d sigma = R * var.asDiagonal() * R.transpose();
    return J * sigma * J.transpose() + blur * Eigen::Matrix2d::Identity();
}

Eigen::Vector2d oracle_center(const GaussianPrimitive& g, const Camera& cam) {
    const Eigen::Vector3d p = cam.R * g.mu + cam.t;
    return {cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy};
}

// Front-to-back compositing of one pixel straight from the definition.
Eigen::Vector3d oracle_pixel(const StructureField& f, const Camera& cam, double px, double py,
                             const Eigen::Vector3d& bg) {
    std::vector<std::size_t> idx(f.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<double> z(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) z[i] = (cam.R * f.primitive(i).mu + cam.t).z();
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return z[a] < z[b]; });
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    double T = 1.0;
    for (std::size_t i : idx) {
        const auto g = f.primitive(i);
        const Eigen::Vector2d d = Eigen::Vector2d(px, py) - oracle_center(g, cam);
        const double a = 1.0 / (1.0 + std::exp(-g.opacity_logit)) *
                         std::exp(-0.5 * d.dot(oracle_cov2d(g, cam).inverse() * d));
        const Eigen::Vector3d col = (-g.color_logit).array().exp().matrix().unaryExpr([](double e) {
            return 1.0 / (1.0 + e);
        });
        c += a * T * col;
        T *= 1.0 - a;
    }
    return c + T * bg;
}

Eigen::Vector4d random_quat(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    return Eigen::Vector4d(n(rng), n(rng), n(rng), n(rng)).normalized();
}

StructureField random_scene(std::mt19937_64& rng, std::size_t n, double spread = 0.6) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    StructureField f = StructureField::empty(Branch::Face);
    for (std::size_t i = 0; i < n; ++i) {
        GaussianPrimitive g;
        g.mu = {spread * u(rng), spread * u(rng), 0.5 * u(rng)};
        g.log_scale = {std::log(0.05 + 0.1 * (u(rng) + 1)), std::log(0.05 + 0.1 * (u(rng) + 1)),
                       std::log(0.02 + 0.05 * (u(rng) + 1))};
        g.rotation = random_quat(rng);
        g.opacity_logit = 2.0 * u(rng);
        g.color_logit = {2 * u(rng), 2 * u(rng), 2 * u(rng)};
        f.push_back(g);
    }
    return f;
}

Image render_field(const StructureField& f, const Camera& cam, const RenderSettings& rs,
                   const Eigen::Vector3d& bg = Eigen::Vector3d::Zero()) {
    ad::Tape tape(false);
    return to_image(render_frame(gs::field_constants(tape, f), cam, rs, bg), cam);
}

GaussianPrimitive blob(const Eigen::Vector3d& mu, double scale, double opacity_logit,
                       const Eigen::Vector3d& color_logit = Eigen::Vector3d::Zero()) {
    GaussianPrimitive g;
    g.mu = mu;
    g.log_scale = Eigen::Vector3d::Constant(std::log(scale));
    g.opacity_logit = opacity_logit;
    g.color_logit = color_logit;
    return g;
}

}  // namespace

TEST_SUITE("rasterizer") {

TEST_CASE("point on the optical axis projects to the principal point") {
    Camera cam;
    ad::Tape tape(false);
    StructureField f = StructureField::empty(Branch::Face);
    f.push_back(blob({0, 0, 0}, 0.1, 0.0));
    const auto g = gs::field_constants(tape, f);
    const Tensor p = project(g.mu, g.log_scale, g.rotation, cam, {}).value();
    CHECK(p(0, kU) == doctest::Approx(cam.cx));
    CHECK(p(0, kV) == doctest::Approx(cam.cy));
    CHECK(p(0, kDepth) == doctest::Approx(2.5));
}

TEST_CASE("doubling fx doubles the horizontal extent") {
    Camera cam;
    StructureField f = StructureField::empty(Branch::Face);
    f.push_back(blob({0.1, -0.2, 0.1}, 0.1, 0.0));
    RenderSettings rs;
    rs.blur = 0.0;
    auto cov_of = [&](const Camera& c) {
        ad::Tape tape(false);
        const auto g = gs::field_constants(tape, f);
        const Tensor p = project(g.mu, g.log_scale, g.rotation, c, rs).value();
        Eigen::Matrix2d q;
        q << p(0, kConicA), p(0, kConicB), p(0, kConicB), p(0, kConicC);
        return Eigen::Matrix2d(q.inverse());
    };
    Camera wide = cam;
    wide.fx *= 2.0;
    CHECK(std::sqrt(cov_of(wide)(0, 0) / cov_of(cam)(0, 0)) == doctest::Approx(2.0));
    CHECK(cov_of(wide)(1, 1) == doctest::Approx(cov_of(cam)(1, 1)));
}

TEST_CASE("projection matches a numerical Jacobian oracle") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Camera cam = Camera::orbit(0.4 * (trial % 5 - 2) / 2.0, 0.1 * (trial % 3 - 1));
        const StructureField f = random_scene(rng, 5);
        ad::Tape tape(false);
        const auto g = gs::field_constants(tape, f);
        const Tensor p = project(g.mu, g.log_scale, g.rotation, cam, {}).value();
        for (std::size_t i = 0; i < f.size(); ++i) {
            const auto prim = f.primitive(i);
            const Eigen::Matrix2d conic = oracle_cov2d(prim, cam).inverse();
            const Eigen::Vector2d c = oracle_center(prim, cam);
            CHECK(std::abs(p(i, kU) - c.x()) < 1e-9);
            CHECK(std::abs(p(i, kV) - c.y()) < 1e-9);
            CHECK(std::abs(p(i, kConicA) - conic(0, 0)) < 1e-5 * std::max(1.0, std::abs(conic(0, 0))));
            CHECK(std::abs(p(i, kConicB) - conic(0, 1)) < 1e-5 * std::max(1.0, std::abs(conic(0, 0))));
            CHECK(std::abs(p(i, kConicC) - conic(1, 1)) < 1e-5 * std::max(1.0, std::abs(conic(1, 1))));
            // normal faces the camera and is the rotated flattest axis
            const Eigen::Vector3d n{p(i, kNx), p(i, kNy), p(i, kNz)};
            const Eigen::Vector3d pc = cam.R * prim.mu + cam.t;
            CHECK(n.dot(pc) <= 0.0);
            const Eigen::Vector3d axis = cam.R * gs::primitive_normal(prim.log_scale, prim.rotation);
            CHECK(std::abs(std::abs(n.dot(axis)) - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("position offset shifts the screen center by its projection") {
    Camera cam;
    StructureField f = StructureField::empty(Branch::Face);
    f.push_back(blob({0.0, 0.0, 0.0}, 0.1, 0.0));
    ad::Tape tape(false);
    const auto g = gs::field_constants(tape, f);
    const auto moved = gs::apply_deformation(g, {tape.constant(Tensor(1, 3, {0.1, 0.0, 0.0}))});
    const Tensor a = project(g.mu, g.log_scale, g.rotation, cam, {}).value();
    const Tensor b = project(moved.mu, moved.log_scale, moved.rotation, cam, {}).value();
    CHECK(b(0, kU) - a(0, kU) == doctest::Approx(cam.fx * 0.1 / 2.5));
    CHECK(b(0, kV) == doctest::Approx(a(0, kV)));
}

TEST_CASE("points behind the camera are culled") {
    Camera cam;
    StructureField f = StructureField::empty(Branch::Face);
    f.push_back(blob({0.0, 0.0, -3.0}, 0.1, 5.0));
    const Image img = render_field(f, cam, {}, {0.2, 0.4, 0.6});
    CHECK(img.alpha.max_abs() == 0.0);
    CHECK(img.color(100, 1) == doctest::Approx(0.4));
}

TEST_CASE("empty scene shows the background") {
    Camera cam;
    ad::Tape tape(false);
    gs::GaussianVars g{tape.constant(Tensor(0, 3)), tape.constant(Tensor(0, 3)), tape.constant(Tensor(0, 4)),
                       tape.constant(Tensor(0, 1)), tape.constant(Tensor(0, 3))};
    const Image img = to_image(render_frame(g, cam, {}, {0.1, 0.2, 0.3}), cam);
    for (std::size_t p = 0; p < cam.pixels(); ++p) {
        CHECK(img.alpha[p] == 0.0);
        CHECK(img.color(p, 2) == doctest::Approx(0.3));
    }
}

TEST_CASE("isotropic blob peaks at the center and decays radially") {
    Camera cam;
    cam.cx = cam.cy = 32.5;  // center of pixel (32, 32)
    StructureField f = StructureField::empty(Branch::Face);
    f.push_back(blob({0, 0, 0}, 0.15, 3.0));
    const Image img = render_field(f, cam, {});
    auto at = [&](int x, int y) { return img.alpha[static_cast<std::size_t>(y) * 64 + x]; };
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) CHECK(at(x, y) <= at(32, 32));
    for (int r = 1; r < 10; ++r) {
        CHECK(at(32 + r, 32) < at(32 + r - 1, 32));
        CHECK(at(32, 32 - r) < at(32, 32 - r + 1));
        CHECK(at(32 + r, 32) == doctest::Approx(at(32 - r, 32)));
    }
}

TEST_CASE("three overlapping primitives match the compositing oracle") {
    Camera cam;
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        StructureField f = random_scene(rng, 3, 0.05);
        const Eigen::Vector3d bg{0.3, 0.6, 0.9};
        const Image img = render_field(f, cam, RenderSettings::exact(), bg);
        for (int probe = 0; probe < 5; ++probe) {
            const int x = 28 + 2 * probe, y = 30 + probe;
            const Eigen::Vector3d want = oracle_pixel(f, cam, x + 0.5, y + 0.5, bg);
            const std::size_t p = static_cast<std::size_t>(y) * 64 + x;
            for (int c = 0; c < 3; ++c) CHECK(img.color(p, c) == doctest::Approx(want[c]).epsilon(1e-7));
        }
    }
}

TEST_CASE("compositing weights are conserved on random scenes") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        StructureField f = random_scene(rng, 1 + trial % 20);
        for (std::size_t i = 0; i < f.size(); ++i)
            for (int c = 0; c < 3; ++c) f.color(i, c) = -40.0;  // black
        const Camera cam = Camera::orbit(0.3 * std::sin(trial), 0.2 * std::cos(trial));
        // with black primitives on a white background the red channel is the transmittance
        const Image img = render_field(f, cam, {}, {1.0, 1.0, 1.0});
        for (std::size_t p = 0; p < cam.pixels(); ++p) {
            REQUIRE(img.alpha[p] >= 0.0);
            REQUIRE(img.alpha[p] <= 1.0);
            REQUIRE(img.alpha[p] + img.color(p, 0) == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("occluder in front reduces the contribution behind it") {
    Camera cam;
    StructureField back = StructureField::empty(Branch::Face);
    back.push_back(blob({0, 0, 0.2}, 0.1, 1.0, {-20, 20, -20}));  // green
    StructureField behind = back, front = back;
    behind.push_back(blob({0.03, 0, 0.4}, 0.1, 4.0, {20, -20, -20}));
    front.push_back(blob({0.03, 0, -0.2}, 0.1, 4.0, {20, -20, -20}));
    const Image a = render_field(behind, cam, {});
    const Image b = render_field(front, cam, {});
    int overlapped = 0;
    for (std::size_t p = 0; p < cam.pixels(); ++p) {
        if (a.color(p, 1) < 0.05 || b.color(p, 0) < 0.05) continue;
        ++overlapped;
        CHECK(b.color(p, 1) < a.color(p, 1));
    }
    CHECK(overlapped > 5);
}

TEST_CASE("single primitive depth equals its camera depth") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        StructureField f = random_scene(rng, 1);
        const Camera cam = Camera::orbit(0.2 * trial - 1.0, 0.0);
        const Image img = render_field(f, cam, {});
        const double z = (cam.R * f.primitive(0).mu + cam.t).z();
        int covered = 0;
        for (std::size_t p = 0; p < cam.pixels(); ++p) {
            if (img.alpha[p] <= 0.01) continue;
            ++covered;
            CHECK(std::abs(img.depth[p] - z) <= 1e-3);
            CHECK(std::abs(Eigen::Vector3d(img.normal(p, 0), img.normal(p, 1), img.normal(p, 2)).norm() - 1.0) < 1e-9);
        }
        CHECK(covered > 0);
    }
}

TEST_CASE("tile-parallel render is bitwise identical to serial") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        const StructureField f = random_scene(rng, 60);
        const Camera cam = Camera::orbit(0.1 * trial, 0.0);
        auto run = [&](int threads, Tensor& grad_mu) {
            ParameterStore store;
            gs::register_field(store, "face", f);
            RenderSettings rs;
            rs.threads = threads;
            ad::Tape tape;
            const Frame fr = render_frame(gs::field_vars(tape, store, "face"), cam, rs, {0.5, 0.5, 0.5});
            auto loss = ad::add(ad::sum(ad::square(fr.color)), ad::sum(fr.depth));
            tape.backward(loss);
            grad_mu = store.at("face/gaussians/mu").grad;
            return to_image(fr, cam);
        };
        Tensor g1, g4;
        const Image a = run(1, g1), b = run(4, g4);
        CHECK(a.color.data == b.color.data);
        CHECK(a.depth.data == b.depth.data);
        CHECK(g1.data == g4.data);
    }
}

TEST_CASE("face over mouth compositing identities") {
    Camera cam;
    cam.width = cam.height = 4;
    cam.cx = cam.cy = 2.0;
    ad::Tape tape(false);
    auto layer = [&](double a, double c, double z) {
        Layer l;
        l.alpha = tape.constant(Tensor(16, 1, a));
        l.color = tape.constant(Tensor(16, 3, c));
        l.depth_sum = tape.constant(Tensor(16, 1, a * z));
        Tensor n(16, 3);
        for (std::size_t p = 0; p < 16; ++p) n(p, 2) = -a;
        l.normal_sum = tape.constant(n);
        return l;
    };
    // opaque face hides the mouth
    Frame f = finish(composite(layer(1.0, 0.7, 2.0), layer(0.8, 0.3, 3.0)));
    CHECK(f.color.value()[0] == doctest::Approx(0.7));
    CHECK(f.depth.value()[0] == doctest::Approx(2.0));
    // transparent face shows the mouth
    f = finish(composite(layer(0.0, 0.0, 2.0), layer(0.8, 0.3, 3.0)));
    CHECK(f.color.value()[0] == doctest::Approx(0.3));
    CHECK(f.alpha.value()[0] == doctest::Approx(0.8));
    CHECK(f.depth.value()[0] == doctest::Approx(3.0));
    // half over half: premultiplied face 0.5*0.6, mouth 0.5*0.2 over a background 1.0
    f = finish(composite(layer(0.5, 0.3, 2.0), layer(0.5, 0.1 + 0.5 * 1.0, 4.0)));
    CHECK(f.color.value()[0] == doctest::Approx(0.3 + 0.5 * 0.6));
    CHECK(f.alpha.value()[0] == doctest::Approx(0.75));
    CHECK(f.depth.value()[0] == doctest::Approx((0.5 * 2.0 + 0.25 * 4.0) / 0.75));
    CHECK(f.normal.value()(0, 2) == doctest::Approx(-1.0));
    Layer small = layer(0.5, 0.5, 1.0);
    small.color = tape.constant(Tensor(4, 3));
    CHECK_THROWS_AS(composite(small, layer(0.5, 0.5, 1.0)), UsageError);
}

TEST_CASE("constant loss and matching target give zero gradients") {
    std::mt19937_64 rng(6);
    const StructureField f = random_scene(rng, 4);
    Camera cam;
    ParameterStore store;
    gs::register_field(store, "face", f);
    {
        ad::Tape tape;
        const Frame fr = render_frame(gs::field_vars(tape, store, "face"), cam, {}, Eigen::Vector3d::Zero());
        tape.backward(ad::add(ad::scale(ad::sum(fr.color), 0.0), tape.constant(Tensor::scalar(3.0))));
        for (auto* p : store.all()) CHECK(p->grad.max_abs() == 0.0);
    }
    const Image target = render_field(f, cam, {});
    {
        ad::Tape tape;
        const Frame fr = render_frame(gs::field_vars(tape, store, "face"), cam, {}, Eigen::Vector3d::Zero());
        tape.backward(ad::mean(ad::abs(ad::sub(fr.color, tape.constant(target.color)))));
        for (auto* p : store.all()) CHECK(p->grad.max_abs() == 0.0);
    }
}

TEST_CASE("non-finite primitive is reported by index") {
    StructureField f = StructureField::empty(Branch::Face);
    f.push_back(blob({0, 0, 0}, 0.1, 0.0));
    f.push_back(blob({0, 0, 0}, 0.1, 0.0));
    f.mu(1, 0) = std::nan("");
    try {
        render_field(f, Camera{}, {});
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("primitive 1") != std::string::npos);
    }
}

TEST_CASE("render gradients match central differences on a tiny scene") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(100 + seed);
        Camera cam;
        cam.width = cam.height = 8;
        cam.fx = cam.fy = 10.0;
        cam.cx = cam.cy = 4.0;
        StructureField f = StructureField::empty(Branch::Face);
        for (int i = 0; i < 2; ++i) {
            GaussianPrimitive g = blob({0.3 * (i - 0.5), 0.1 * i, 0.2 * i}, 0.3, 0.5, {0.3, -0.2, 0.1 * i});
            g.log_scale = {std::log(0.35), std::log(0.25), std::log(0.12)};
            g.rotation = random_quat(rng);
            f.push_back(g);
        }
        ParameterStore store;
        gs::register_field(store, "face", f);
        const Tensor wc = test::random_tensor(64, 3, rng), wd = test::random_tensor(64, 1, rng),
                     wn = test::random_tensor(64, 3, rng), wa = test::random_tensor(64, 1, rng);
        const Eigen::Vector3d bg{0.2, 0.5, 0.7};
        auto loss = [&](ad::Tape& t) {
            const Frame fr = render_frame(gs::field_vars(t, store, "face"), cam, RenderSettings::exact(), bg);
            return ad::add(ad::add(ad::sum(ad::mul(fr.color, t.constant(wc))), ad::sum(ad::mul(fr.depth, t.constant(wd)))),
                           ad::add(ad::sum(ad::mul(fr.normal, t.constant(wn))), ad::sum(ad::mul(fr.alpha, t.constant(wa)))));
        };
        FiniteDiffOptions opts;
        opts.seed = seed;
        opts.samples = 16;
        const auto res = finite_diff_check(loss, store, opts);
        INFO("seed " << seed << " worst " << res.worst_parameter << "[" << res.worst_index << "] "
                     << res.worst_analytic << " vs " << res.worst_numeric);
        CHECK(res.max_rel_error <= 1e-4);
        CHECK(res.checked == 28);  // every coordinate of both primitives
    }
}

TEST_CASE("composite gradients match central differences") {
    std::mt19937_64 rng(77);
    Camera cam;
    cam.width = cam.height = 8;
    cam.fx = cam.fy = 10.0;
    cam.cx = cam.cy = 4.0;
    StructureField face = StructureField::empty(Branch::Face), mouth = StructureField::empty(Branch::Mouth);
    face.push_back(blob({0.1, 0.0, 0.0}, 0.3, 0.0, {0.5, 0.1, -0.3}));
    mouth.push_back(blob({-0.1, 0.1, 0.3}, 0.3, 1.0, {-0.5, 0.2, 0.3}));
    face.log_scale(0, 2) = std::log(0.1);
    mouth.log_scale(0, 1) = std::log(0.15);
    face.rotation.data = {0.9, 0.1, 0.3, -0.2};
    mouth.rotation.data = {0.8, -0.2, 0.1, 0.4};
    ParameterStore store;
    gs::register_field(store, "face", face);
    gs::register_field(store, "mouth", mouth);
    const Tensor wc = test::random_tensor(64, 3, rng), wd = test::random_tensor(64, 1, rng),
                 wn = test::random_tensor(64, 3, rng);
    auto loss = [&](ad::Tape& t) {
        const auto rs = RenderSettings::exact();
        const Layer lf = render_layer(gs::field_vars(t, store, "face"), cam, rs, Eigen::Vector3d::Zero());
        const Layer lm = render_layer(gs::field_vars(t, store, "mouth"), cam, rs, {1.0, 1.0, 1.0});
        const Frame fr = finish(composite(lf, lm));
        return ad::add(ad::sum(ad::mul(fr.color, t.constant(wc))),
                       ad::add(ad::sum(ad::mul(fr.depth, t.constant(wd))), ad::sum(ad::mul(fr.normal, t.constant(wn)))));
    };
    FiniteDiffOptions opts;
    opts.samples = 16;
    CHECK(finite_diff_check(loss, store, opts).max_rel_error <= 1e-4);
}

TEST_CASE("split children cover about the same footprint as the parent") {
    // Children are drawn from the parent's own distribution at 1/1.6 of its
    // scale, so on average their union covers a comparable screen area.
    Camera cam;
    double area_ratio = 0.0, iou = 0.0;
    const int trials = 40;
    for (int seed = 0; seed < trials; ++seed) {
        ParameterStore store;
        StructureField f = StructureField::empty(Branch::Face);
        f.push_back(blob({0, 0, 0}, 0.12, 3.0, {0, 0, 0}));
        gs::register_field(store, "face", f);
        auto coverage = [&] {
            const Image img = render_field(gs::read_field(store, "face", Branch::Face), cam, {});
            std::vector<char> m(cam.pixels());
            for (std::size_t p = 0; p < cam.pixels(); ++p) m[p] = img.alpha[p] > 0.3;
            return m;
        };
        const auto before = coverage();
        AdamW opt;
        gs::DensifyStats st;
        st.reset(1);
        st.grad_accum[0] = 1.0;
        st.count[0] = 1.0;
        REQUIRE(gs::densify_and_prune(store, opt, "face", st, {}, static_cast<std::uint64_t>(seed)).split == 1);
        const auto after = coverage();
        double inter = 0, uni = 0, a0 = 0, a1 = 0;
        for (std::size_t p = 0; p < before.size(); ++p) {
            inter += before[p] && after[p];
            uni += before[p] || after[p];
            a0 += before[p];
            a1 += after[p];
        }
        area_ratio += a1 / a0 / trials;
        iou += inter / uni / trials;
    }
    MESSAGE("split area ratio " << area_ratio << " iou " << iou);
    CHECK(area_ratio > 0.5);
    CHECK(area_ratio < 1.5);
    CHECK(iou > 0.3);
}

TEST_CASE("screen gradient feeds density statistics") {
    Camera cam;
    StructureField f = StructureField::empty(Branch::Face);
    f.push_back(blob({0, 0, 0}, 0.1, 1.0));
    f.push_back(blob({0, 0, -5}, 0.1, 1.0));  // behind the camera
    ParameterStore store;
    gs::register_field(store, "face", f);
    ad::Tape tape;
    const Layer l = render_layer(gs::field_vars(tape, store, "face"), cam, {}, Eigen::Vector3d::Zero());
    Tensor target(cam.pixels(), 3);
    for (std::size_t p = 0; p < cam.pixels(); ++p) target(p, 0) = (p % 64) < 34 ? 1.0 : 0.0;
    tape.backward(ad::sum(ad::square(ad::sub(l.color, tape.constant(target)))));
    const Tensor sg = screen_gradient(l), vis = visible_mask(l);
    CHECK(vis[0] == 1.0);
    CHECK(vis[1] == 0.0);
    CHECK(std::abs(sg(0, 0)) > 0.0);
    CHECK(sg(1, 0) == 0.0);
    gs::DensifyStats st;
    st.accumulate(sg, vis, cam.width, cam.height);
    CHECK(st.count[0] == 1.0);
    CHECK(st.count[1] == 0.0);
    CHECK(st.grad_accum[0] == doctest::Approx(std::hypot(sg(0, 0) * 32, sg(0, 1) * 32)));
}

TEST_CASE("image and raster files round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "instag_raster_test";
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(1);
    const Tensor rgb = test::random_tensor(12, 3, rng, 0.0, 1.0);
    write_ppm(dir / "a.ppm", rgb, 4, 3);
    int w = 0, h = 0;
    const Tensor back = read_ppm(dir / "a.ppm", w, h);
    CHECK(w == 4);
    CHECK(h == 3);
    for (std::size_t i = 0; i < rgb.size(); ++i) CHECK(std::abs(back[i] - rgb[i]) <= 0.5 / 255 + 1e-12);
    const Tensor depth = test::random_tensor(12, 1, rng, 0.0, 5.0);
    write_raster(dir / "d.f32", depth, 4, 3);
    CHECK(std::filesystem::file_size(dir / "d.f32") == 16 + 4 * 12);
    const Tensor d2 = read_raster(dir / "d.f32", w, h);
    for (std::size_t i = 0; i < depth.size(); ++i) CHECK(d2[i] == static_cast<float>(depth[i]));
    CHECK_THROWS_AS(read_raster(dir / "a.ppm", w, h), IoError);
    CHECK_THROWS_AS(read_ppm(dir / "missing.ppm", w, h), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("psnr caps identical images") {
    const Tensor a(4, 3, 0.5);
    CHECK(psnr(a, a) == 99.0);
    Tensor b = a;
    for (double& v : b.data) v += 0.1;
    CHECK(psnr(a, b) == doctest::Approx(20.0));
}

}
