// SPDX-License-Identifier: Apache-2.0
#include "instag/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>

#include "instag/errors.hpp"
#include "instag/gradcheck.hpp"
#include "instag/losses.hpp"
#include "instag/motion_fields.hpp"
#include "instag/rasterizer.hpp"

namespace instag {

namespace {

Tensor uniform(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(r, c);
    for (double& v : t.data) v = u(rng);
    return t;
}

// Random linear functional: any output becomes a scalar with generic weights.
ad::Var project(ad::Var v, std::uint64_t salt) {
    std::mt19937_64 r(v.rows() * 131 + v.cols() + salt * 7919);
    return ad::sum(ad::mul(v, v.tape().constant(uniform(v.rows(), v.cols(), r))));
}

render::Camera tiny_camera() {
    render::Camera cam;
    cam.width = cam.height = 8;
    cam.fx = cam.fy = 10.0;
    cam.cx = cam.cy = 4.0;
    return cam;
}

motion::FieldConfig tiny_field() {
    motion::FieldConfig c;
    c.grid.levels = 3;
    c.grid.table_size = 64;
    c.grid.n_min = 2;
    c.grid.n_max = 8;
    c.hidden = {8, 6};
    c.attention_hidden = 5;
    return c;
}

void scramble(ParameterStore& store, std::string_view prefix, std::mt19937_64& rng, double scale) {
    for (Parameter* p : store.with_prefix(prefix)) p->value = uniform(p->value.rows, p->value.cols, rng, -scale, scale);
}

// Two face primitives and two mouth primitives, kept off grid lattice lines.
void tiny_fields(ParameterStore& store, std::mt19937_64& rng) {
    gs::StructureField face = gs::StructureField::empty(gs::Branch::Face);
    gs::StructureField inner = gs::StructureField::empty(gs::Branch::Mouth);
    std::uniform_real_distribution<double> j(-0.01, 0.01);
    for (int i = 0; i < 2; ++i) {
        gs::GaussianPrimitive g;
        g.mu = {0.3 * (i - 0.5) + 0.013 + j(rng), 0.1 * i + 0.021 + j(rng), 0.1 * i + 0.017 + j(rng)};
        g.log_scale = {std::log(0.35), std::log(0.25), std::log(0.12)};
        g.rotation = Eigen::Vector4d(1.0, 0.2 * i + j(rng), -0.1, 0.3).normalized();
        g.opacity_logit = 0.3;
        g.color_logit = {0.2, -0.1 * i, 0.4 + j(rng)};
        face.push_back(g);
        g.mu = {0.1 * i + 0.011 + j(rng), 0.052, 0.31 + 0.05 * i};  // distinct depths: a sort tie is a real jump
        g.opacity_logit = 1.0;
        inner.push_back(g);
    }
    gs::register_field(store, "face", face);
    gs::register_field(store, "mouth", inner);
}

struct Case {
    Case(std::string s, std::string n, double e = 1e-5, std::size_t k = 12)
        : scope(std::move(s)), name(std::move(n)), eps(e), samples(k) {}
    std::string scope, name;
    double eps;
    std::size_t samples;
    /// Builds the store for a seed and returns the loss.
    std::function<LossFn(ParameterStore&, std::uint64_t)> build;
};

std::vector<Case> autodiff_cases() {
    using Op = std::function<ad::Var(ad::Tape&, ParameterStore&)>;
    auto P = [](ad::Tape& t, ParameterStore& s, const char* n) { return t.parameter(s, n); };
    const std::vector<std::pair<std::string, Op>> ops = {
        {"add", [=](ad::Tape& t, ParameterStore& s) { return project(ad::add(P(t, s, "a"), P(t, s, "b")), 1); }},
        {"sub", [=](ad::Tape& t, ParameterStore& s) { return project(ad::sub(P(t, s, "a"), P(t, s, "b")), 2); }},
        {"mul", [=](ad::Tape& t, ParameterStore& s) { return project(ad::mul(P(t, s, "a"), P(t, s, "b")), 3); }},
        {"scale", [=](ad::Tape& t, ParameterStore& s) { return project(ad::add_scalar(ad::scale(P(t, s, "a"), -1.7), 0.3), 4); }},
        {"add_row", [=](ad::Tape& t, ParameterStore& s) { return project(ad::add_row(P(t, s, "a"), P(t, s, "row")), 5); }},
        {"mul_row", [=](ad::Tape& t, ParameterStore& s) { return project(ad::mul_row(P(t, s, "a"), P(t, s, "row")), 6); }},
        {"mul_col", [=](ad::Tape& t, ParameterStore& s) { return project(ad::mul_col(P(t, s, "a"), P(t, s, "col")), 7); }},
        {"matmul", [=](ad::Tape& t, ParameterStore& s) { return project(ad::matmul(P(t, s, "a"), P(t, s, "w")), 8); }},
        {"linear", [=](ad::Tape& t, ParameterStore& s) { return project(ad::linear(P(t, s, "a"), P(t, s, "w"), P(t, s, "bias")), 9); }},
        {"exp", [=](ad::Tape& t, ParameterStore& s) { return project(ad::exp(P(t, s, "a")), 10); }},
        {"log", [=](ad::Tape& t, ParameterStore& s) { return project(ad::log(P(t, s, "pos")), 11); }},
        {"sin", [=](ad::Tape& t, ParameterStore& s) { return project(ad::sin(P(t, s, "a")), 12); }},
        {"tanh", [=](ad::Tape& t, ParameterStore& s) { return project(ad::tanh(P(t, s, "a")), 13); }},
        {"sigmoid", [=](ad::Tape& t, ParameterStore& s) { return project(ad::sigmoid(P(t, s, "a")), 14); }},
        {"relu", [=](ad::Tape& t, ParameterStore& s) { return project(ad::relu(P(t, s, "a")), 15); }},
        {"square", [=](ad::Tape& t, ParameterStore& s) { return project(ad::square(P(t, s, "a")), 16); }},
        {"abs", [=](ad::Tape& t, ParameterStore& s) { return project(ad::abs(P(t, s, "a")), 17); }},
        {"neg/mean", [=](ad::Tape& t, ParameterStore& s) { return ad::mean(ad::square(ad::neg(P(t, s, "a")))); }},
        {"sum_rows", [=](ad::Tape& t, ParameterStore& s) { return project(ad::sum_rows(ad::square(P(t, s, "a"))), 18); }},
        {"row_dot", [=](ad::Tape& t, ParameterStore& s) { return project(ad::row_dot(P(t, s, "a"), P(t, s, "b")), 19); }},
        {"concat/slice cols",
         [=](ad::Tape& t, ParameterStore& s) {
             return project(ad::slice_cols(ad::concat_cols({P(t, s, "a"), ad::square(P(t, s, "b"))}), 1, 4), 20);
         }},
        {"concat/slice rows",
         [=](ad::Tape& t, ParameterStore& s) {
             const ad::Var parts[] = {P(t, s, "a"), ad::square(P(t, s, "b"))};
             return project(ad::slice_rows(ad::concat_rows(parts), 2, 5), 21);
         }},
        {"repeat_rows", [=](ad::Tape& t, ParameterStore& s) { return project(ad::repeat_rows(P(t, s, "row"), 6), 22); }},
        {"gather_rows",
         [=](ad::Tape& t, ParameterStore& s) {
             const std::size_t idx[] = {3, 0, 3, 1};
             return project(ad::gather_rows(P(t, s, "a"), idx), 23);
         }},
        {"normalize_rows", [=](ad::Tape& t, ParameterStore& s) { return project(ad::normalize_rows(P(t, s, "a")), 24); }},
        {"div_clamped", [=](ad::Tape& t, ParameterStore& s) { return project(ad::div_clamped(P(t, s, "a"), P(t, s, "col"), 1e-6), 25); }},
        {"max_rows", [=](ad::Tape& t, ParameterStore& s) { return project(ad::max_rows(P(t, s, "a")), 26); }},
        {"min_rows", [=](ad::Tape& t, ParameterStore& s) { return project(ad::min_rows(P(t, s, "a")), 27); }},
    };
    std::vector<Case> out;
    for (const auto& [name, op] : ops) {
        Case c{"autodiff", name};
        c.build = [op](ParameterStore& store, std::uint64_t seed) -> LossFn {
            std::mt19937_64 rng(1000 + seed);
            store.add("a", uniform(4, 3, rng), ParamGroup::Network);
            store.add("b", uniform(4, 3, rng), ParamGroup::Network);
            store.add("w", uniform(3, 5, rng), ParamGroup::Network);
            store.add("bias", uniform(1, 5, rng), ParamGroup::Network);
            store.add("row", uniform(1, 3, rng), ParamGroup::Network);
            store.add("col", uniform(4, 1, rng, 0.5, 1.5), ParamGroup::Network);
            store.add("pos", uniform(4, 3, rng, 0.2, 1.0), ParamGroup::Network);
            ParameterStore* s = &store;
            return [op, s](ad::Tape& t) { return op(t, *s); };
        };
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Case> encoder_cases() {
    std::vector<Case> out;
    {
        Case c{"encoders", "tri-plane hash grid", 1e-4, 24};
        c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
            enc::HashGridConfig g;
            g.levels = 4;
            g.table_size = 256;
            g.n_min = 4;
            g.n_max = 40;
            auto tp = std::make_shared<enc::TriPlane>("g", g);
            tp->register_params(store, seed, 1.0);
            std::mt19937_64 rng(seed + 50);
            store.add("mu", uniform(6, 3, rng, -0.95, 0.95), ParamGroup::Gaussian);
            ParameterStore* s = &store;
            return [tp, s](ad::Tape& t) { return project(tp->encode(t, *s, t.parameter(*s, "mu")), 31); };
        };
        out.push_back(std::move(c));
    }
    {
        Case c{"encoders", "decoder", 1e-6, 12};
        c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
            auto mlp = std::make_shared<enc::Mlp>("dec", std::vector<std::size_t>{4, 16, 8, 3}, false);
            mlp->register_params(store, seed);
            std::mt19937_64 rng(seed);
            for (std::size_t l = 0; l < 3; ++l)
                store.at(mlp->bias_name(l)).value = uniform(1, store.at(mlp->bias_name(l)).value.cols, rng, -0.3, 0.3);
            store.add("x", uniform(5, 4, rng), ParamGroup::Gaussian);
            ParameterStore* s = &store;
            return [mlp, s](ad::Tape& t) { return project(ad::tanh(mlp->forward(t, *s, t.parameter(*s, "x"))), 32); };
        };
        out.push_back(std::move(c));
    }
    {
        Case c{"encoders", "region attention", 1e-6, 12};
        c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
            auto att = std::make_shared<enc::RegionAttention>("att", 6, 5, 7);
            att->register_params(store, seed);
            std::mt19937_64 rng(seed + 3);
            scramble(store, "att", rng, 0.4);
            store.add("f", uniform(4, 6, rng), ParamGroup::Network);
            store.add("c", uniform(1, 5, rng), ParamGroup::Network);
            ParameterStore* s = &store;
            return [att, s](ad::Tape& t) {
                return project(att->attend(t, *s, t.parameter(*s, "f"), t.parameter(*s, "c")), 33);
            };
        };
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Case> gaussian_cases() {
    Case c{"gaussian", "apply deformation", 1e-6, 12};
    c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
        std::mt19937_64 rng(seed + 7);
        tiny_fields(store, rng);
        store.add("d_mu", uniform(2, 3, rng, -0.1, 0.1), ParamGroup::Network);
        store.add("d_s", uniform(2, 3, rng, -0.1, 0.1), ParamGroup::Network);
        store.add("d_q", uniform(2, 4, rng, -0.1, 0.1), ParamGroup::Network);
        ParameterStore* s = &store;
        return [s](ad::Tape& t) {
            const gs::GaussianVars g = gs::field_vars(t, *s, "face");
            const gs::DeformationVars a{t.parameter(*s, "d_mu"), t.parameter(*s, "d_s"), {}};
            const gs::DeformationVars b{ad::scale(t.parameter(*s, "d_mu"), 0.5), {}, t.parameter(*s, "d_q")};
            const gs::GaussianVars d = gs::apply_deformation(g, gs::add_deformations(a, b));
            return ad::add(ad::add(project(d.mu, 41), project(d.log_scale, 42)), project(d.rotation, 43));
        };
    };
    return {c};
}

std::vector<Case> rasterizer_cases() {
    std::vector<Case> out;
    {
        Case c{"rasterizer", "render frame", 1e-4, 16};
        c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
            std::mt19937_64 rng(100 + seed);
            tiny_fields(store, rng);
            std::normal_distribution<double> n(0.0, 1.0);
            Tensor& q = store.at(gs::field_param("face", "rotation")).value;
            for (std::size_t i = 0; i < q.rows; ++i) {
                const Eigen::Vector4d r = Eigen::Vector4d(n(rng), n(rng), n(rng), n(rng)).normalized();
                for (int k = 0; k < 4; ++k) q(i, k) = r[k];
            }
            ParameterStore* s = &store;
            return [s](ad::Tape& t) {
                const render::Frame fr = render::render_frame(gs::field_vars(t, *s, "face"), tiny_camera(),
                                                              render::RenderSettings::exact(), {0.2, 0.5, 0.7});
                return ad::add(ad::add(project(fr.color, 51), project(fr.depth, 52)),
                               ad::add(project(fr.normal, 53), project(fr.alpha, 54)));
            };
        };
        out.push_back(std::move(c));
    }
    {
        Case c{"rasterizer", "face over mouth composite", 1e-4, 16};
        c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
            std::mt19937_64 rng(200 + seed);
            tiny_fields(store, rng);
            ParameterStore* s = &store;
            return [s](ad::Tape& t) {
                const auto rs = render::RenderSettings::exact();
                const auto cam = tiny_camera();
                const auto lf = render::render_layer(gs::field_vars(t, *s, "face"), cam, rs, Eigen::Vector3d::Zero());
                const auto lm = render::render_layer(gs::field_vars(t, *s, "mouth"), cam, rs, {1.0, 1.0, 1.0});
                const render::Frame fr = render::finish(render::composite(lf, lm));
                return ad::add(project(fr.color, 55), ad::add(project(fr.depth, 56), project(fr.normal, 57)));
            };
        };
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Case> loss_cases() {
    std::vector<Case> out;
    {
        Case c{"losses", "photometric with ssim", 1e-5, 12};
        c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
            std::mt19937_64 rng(seed);
            store.add("a", uniform(120, 3, rng, 0, 1), ParamGroup::Network);
            auto target = std::make_shared<Tensor>(uniform(120, 3, rng, 0, 1));
            ParameterStore* s = &store;
            return [s, target](ad::Tape& t) { return loss::photometric(t.parameter(*s, "a"), t.constant_view(*target), 12, 10); };
        };
        out.push_back(std::move(c));
    }
    {
        Case c{"losses", "scale-invariant depth", 1e-5, 25};
        c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
            std::mt19937_64 rng(seed + 9);
            store.add("d", uniform(25, 1, rng, 1, 3), ParamGroup::Network);
            auto target = std::make_shared<Tensor>(uniform(25, 1, rng, 1, 3));
            auto mask = std::make_shared<Tensor>(25, 1, 1.0);
            (*mask)[3] = (*mask)[7] = 0.0;
            ParameterStore* s = &store;
            return [s, target, mask](ad::Tape& t) { return loss::scale_invariant_depth(t.parameter(*s, "d"), *target, *mask); };
        };
        out.push_back(std::move(c));
    }
    {
        Case c{"losses", "geometry", 1e-5, 16};
        c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
            std::mt19937_64 rng(seed + 19);
            store.add("d", uniform(16, 1, rng, 1, 3), ParamGroup::Network);
            store.add("n", uniform(16, 3, rng), ParamGroup::Network);
            auto geo = std::make_shared<loss::GeometryTargets>();
            geo->depth = uniform(16, 1, rng, 1, 3);
            geo->normal = uniform(16, 3, rng);
            for (std::size_t p = 0; p < 16; ++p) {
                double len = 0;
                for (int k = 0; k < 3; ++k) len += geo->normal(p, k) * geo->normal(p, k);
                for (int k = 0; k < 3; ++k) geo->normal(p, k) /= std::sqrt(len);
            }
            geo->mask = Tensor(16, 1, 1.0);
            (*geo).mask[5] = 0.0;
            ParameterStore* s = &store;
            return [s, geo](ad::Tape& t) {
                loss::LossWeights w;
                w.lambda_d = 0.7;
                w.lambda_n = 0.3;
                return loss::geometry_loss(t.parameter(*s, "d"), ad::normalize_rows(t.parameter(*s, "n")), *geo, w).value;
            };
        };
        out.push_back(std::move(c));
    }
    {
        Case c{"losses", "negative contrast", 1e-6, 16};
        c.build = [](ParameterStore& store, std::uint64_t seed) -> LossFn {
            std::mt19937_64 rng(seed + 29);
            store.add("p0", uniform(10, 3, rng), ParamGroup::Network);
            store.add("p1", uniform(10, 3, rng), ParamGroup::Network);
            store.add("p2", uniform(10, 3, rng), ParamGroup::Network);
            store.add("photo", Tensor::scalar(0.3), ParamGroup::Network);
            ParameterStore* s = &store;
            return [s](ad::Tape& t) {
                const ad::Var off[] = {t.parameter(*s, "p0"), t.parameter(*s, "p1"), t.parameter(*s, "p2")};
                loss::LossWeights w;
                w.lambda_c = 0.8;
                return loss::pretrain_loss(ad::square(t.parameter(*s, "photo")), 1, off, w);
            };
        };
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Case> motion_cases() {
    std::vector<Case> out;
    const motion::ConditionLayout layout;
    {
        Case c{"motion", "deformation field", 1e-5, 8};
        c.build = [layout](ParameterStore& store, std::uint64_t seed) -> LossFn {
            auto f = std::make_shared<motion::DeformationField>("umf", tiny_field(), layout);
            f->register_params(store, seed);
            std::mt19937_64 rng(300 + seed);
            scramble(store, "umf", rng, 0.2);
            tiny_fields(store, rng);
            store.add("cond", uniform(1, layout.total(), rng), ParamGroup::Network);
            ParameterStore* s = &store;
            return [f, s](ad::Tape& t) {
                const auto d = f->deform(t, *s, t.parameter(*s, gs::field_param("face", "mu")), t.parameter(*s, "cond"));
                return ad::add(ad::add(project(d.d_mu, 61), project(d.d_log_scale, 62)), project(d.d_rotation, 63));
            };
        };
        out.push_back(std::move(c));
    }
    {
        Case c{"motion", "aligner", 1e-5, 8};
        c.build = [layout](ParameterStore& store, std::uint64_t seed) -> LossFn {
            auto f = std::make_shared<motion::DeformationField>("umf", tiny_field(), layout);
            auto a = std::make_shared<motion::MotionAligner>("aligner", tiny_field().grid, 5);
            f->register_params(store, seed);
            a->register_params(store, seed + 1);
            std::mt19937_64 rng(400 + seed);
            scramble(store, "umf", rng, 0.2);
            scramble(store, "aligner", rng, 0.2);
            for (Parameter* p : store.with_prefix("aligner/offset")) p->value = uniform(p->value.rows, p->value.cols, rng, -0.02, 0.02);
            tiny_fields(store, rng);
            auto cond = std::make_shared<Tensor>(uniform(1, layout.total(), rng));
            ParameterStore* s = &store;
            return [f, a, s, cond](ad::Tape& t) {
                const auto d = motion::align_and_deform(a.get(), *f, t, *s, t.parameter(*s, gs::field_param("face", "mu")),
                                                        t.constant_view(*cond));
                return project(d.d_mu, 64);
            };
        };
        out.push_back(std::move(c));
    }
    {
        Case c{"motion", "mouth field with hook", 1e-5, 8};
        c.build = [layout](ParameterStore& store, std::uint64_t seed) -> LossFn {
            auto f = std::make_shared<motion::DeformationField>("umf", tiny_field(), layout);
            auto m = std::make_shared<motion::MouthMotionField>("mouth_field", tiny_field(), layout, 5);
            f->register_params(store, seed);
            m->register_params(store, seed + 2);
            std::mt19937_64 rng(500 + seed);
            scramble(store, "umf", rng, 0.2);
            scramble(store, "mouth_field", rng, 0.2);
            tiny_fields(store, rng);
            auto cond = std::make_shared<Tensor>(uniform(1, layout.total(), rng));
            ParameterStore* s = &store;
            return [f, m, s, cond](ad::Tape& t) {
                const ad::Var c = t.constant_view(*cond);
                const auto d = f->deform(t, *s, t.parameter(*s, gs::field_param("face", "mu")), c);
                const auto cues = motion::face_motion_cues(d.d_mu);
                return project(m->deform(t, *s, t.parameter(*s, gs::field_param("mouth", "mu")), c, &cues), 65);
            };
        };
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Case> pipeline_cases() {
    std::vector<Case> out;
    const motion::ConditionLayout layout;
    {
        // identity 0 of two: universal + personal deformation, render, photometric
        // and the contrast term against identity 1 at shared points
        Case c{"pipelines", "pre-training objective", 1e-4, 6};
        c.build = [layout](ParameterStore& store, std::uint64_t seed) -> LossFn {
            auto umf = std::make_shared<motion::DeformationField>("umf", tiny_field(), layout);
            auto pf = std::make_shared<motion::PersonalizedFields>(2, tiny_field(), layout);
            umf->register_params(store, seed);
            pf->register_params(store, seed + 5);
            std::mt19937_64 rng(600 + seed);
            scramble(store, "umf", rng, 0.2);
            scramble(store, "pfield", rng, 0.2);
            tiny_fields(store, rng);
            auto cond = std::make_shared<Tensor>(uniform(1, layout.total(), rng));
            auto target = std::make_shared<Tensor>(uniform(64, 3, rng, 0, 1));
            ParameterStore* s = &store;
            return [umf, pf, s, cond, target](ad::Tape& t) {
                const ad::Var c = t.constant_view(*cond);
                const auto g = gs::field_vars(t, *s, "face");
                const auto p0 = pf->at(0).deform(t, *s, g.mu, c);
                const auto d = gs::add_deformations(umf->deform(t, *s, g.mu, c), p0);
                const auto fr = render::render_frame(gs::apply_deformation(g, d), tiny_camera(),
                                                     render::RenderSettings::exact(), {1.0, 1.0, 1.0});
                const ad::Var photo = loss::photometric(fr.color, t.constant_view(*target), 8, 8);
                const ad::Var offs[] = {p0.d_mu, pf->at(1).deform(t, *s, g.mu, c).d_mu};
                loss::LossWeights w;
                w.lambda_c = 50.0;  // lifts the contrast term to the photometric scale
                return loss::pretrain_loss(photo, 0, offs, w);
            };
        };
        out.push_back(std::move(c));
    }
    {
        Case c{"pipelines", "adaptation objective", 1e-4, 6};
        c.build = [layout](ParameterStore& store, std::uint64_t seed) -> LossFn {
            auto umf = std::make_shared<motion::DeformationField>("umf", tiny_field(), layout);
            auto al = std::make_shared<motion::MotionAligner>("aligner", tiny_field().grid, 5);
            auto mouth = std::make_shared<motion::MouthMotionField>("mouth_field", tiny_field(), layout, 5);
            umf->register_params(store, seed);
            al->register_params(store, seed + 10);
            mouth->register_params(store, seed + 20);
            std::mt19937_64 rng(200 + seed);
            for (const char* p : {"umf", "aligner", "mouth_field"}) scramble(store, p, rng, 0.2);
            for (Parameter* p : store.with_prefix("aligner/offset")) p->value = uniform(p->value.rows, p->value.cols, rng, -0.02, 0.02);
            tiny_fields(store, rng);
            auto cond = std::make_shared<Tensor>(uniform(1, layout.total(), rng));
            auto target = std::make_shared<Tensor>(uniform(64, 3, rng, 0, 1));
            auto geo = std::make_shared<loss::GeometryTargets>(
                loss::GeometryTargets{uniform(64, 1, rng, 2, 3), Tensor(64, 3), Tensor(64, 1, 1.0)});
            for (std::size_t p = 0; p < 64; ++p) geo->normal(p, 2) = -1.0;
            ParameterStore* s = &store;
            return [=](ad::Tape& t) {
                const auto rs = render::RenderSettings::exact();
                const auto cam = tiny_camera();
                const ad::Var c = t.constant_view(*cond);
                const auto gf = gs::field_vars(t, *s, "face");
                const auto df = motion::align_and_deform(al.get(), *umf, t, *s, gf.mu, c);
                const auto cues = motion::face_motion_cues(df.d_mu);
                const auto gm = gs::field_vars(t, *s, "mouth");
                const auto mdef = gs::apply_deformation(gm, {mouth->deform(t, *s, gm.mu, c, &cues), {}, {}});
                const auto lf = render::render_layer(gs::apply_deformation(gf, df), cam, rs, Eigen::Vector3d::Zero());
                const auto lm = render::render_layer(mdef, cam, rs, {1.0, 1.0, 1.0});
                const auto fr = render::finish(render::composite(lf, lm));
                const ad::Var photo = loss::photometric(fr.color, t.constant_view(*target), 8, 8);
                loss::LossWeights w;
                w.lambda_d = 0.5;
                w.lambda_n = 0.5;
                return loss::adaptation_loss(photo, loss::geometry_loss(fr.depth, fr.normal, *geo, w), loss::Stage::Full);
            };
        };
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Case> all_cases() {
    std::vector<Case> out;
    for (auto part : {autodiff_cases(), encoder_cases(), gaussian_cases(), rasterizer_cases(), loss_cases(),
                      motion_cases(), pipeline_cases()})
        for (auto& c : part) out.push_back(std::move(c));
    return out;
}

}  // namespace

const std::vector<std::string>& gradcheck_scopes() {
    static const std::vector<std::string> s{"autodiff", "encoders", "gaussian", "rasterizer", "losses", "motion", "pipelines"};
    return s;
}

std::vector<CheckOutcome> run_gradcheck_suite(const SuiteOptions& opts) {
    if (!opts.scope.empty()) {
        const auto& s = gradcheck_scopes();
        if (std::find(s.begin(), s.end(), opts.scope) == s.end())
            throw UsageError("unknown gradcheck scope '" + opts.scope + "'");
    }
    if (opts.seeds == 0) throw UsageError("gradcheck needs at least one seed");
    std::vector<CheckOutcome> out;
    for (const Case& c : all_cases()) {
        if (!opts.scope.empty() && c.scope != opts.scope) continue;
        for (std::uint64_t seed = 0; seed < opts.seeds; ++seed) {
            ParameterStore store(DType::F64);
            const LossFn fn = c.build(store, seed);
            FiniteDiffOptions fo;
            fo.eps = c.eps;
            fo.samples = c.samples;
            fo.seed = seed;
            fo.tolerance = opts.tolerance;
            fo.analytic_scale = opts.analytic_scale;
            const FiniteDiffResult r = finite_diff_check(fn, store, fo);
            CheckOutcome o;
            o.scope = c.scope;
            o.name = c.name;
            o.seed = seed;
            o.max_rel_error = r.max_rel_error;
            o.worst_parameter = r.worst_parameter;
            o.worst_index = r.worst_index;
            o.analytic = r.worst_analytic;
            o.numeric = r.worst_numeric;
            o.checked = r.checked;
            o.passed = r.max_rel_error <= opts.tolerance && r.checked > 0;
            out.push_back(std::move(o));
        }
    }
    return out;
}

}  // namespace instag
