// SPDX-License-Identifier: Apache-2.0
#include "instag/synthetic_scenes.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "instag/errors.hpp"
#include "json.hpp"

namespace instag::synth {

using Vec3 = Eigen::Vector3d;
using json = nlohmann::json;

namespace {

constexpr double kUpperLipShare = 0.3;
constexpr double kJawShare = 0.6;

double logit(double p) { return std::log(p / (1.0 - p)); }

double smoothstep(double e0, double e1, double x) {
    const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

double front_z(const HeadShape& s, double x, double y) {
    const double r = 1.0 - (x * x) / (s.semi_axes.x() * s.semi_axes.x()) - (y * y) / (s.semi_axes.y() * s.semi_axes.y());
    return -s.semi_axes.z() * std::sqrt(std::max(r, 0.0));
}

double lip_q(const HeadShape& s, double x, double y) {
    const double dx = (x - s.lip_center.x()) / s.lip_radii.x();
    const double dy = (y - s.lip_center.y()) / s.lip_radii.y();
    return std::sqrt(dx * dx + dy * dy);
}

// Upper-face motion weight: 0 at the region border, 1 a little above it.
double brow_weight(const HeadShape& s, double y) { return std::clamp((s.upper_face_y - y) / 0.3, 0.0, 1.0); }

Eigen::Vector4d quat_from_z_to(const Vec3& n) {
    const Eigen::Quaterniond q = Eigen::Quaterniond::FromTwoVectors(Vec3::UnitZ(), n);
    return {q.w(), q.x(), q.y(), q.z()};
}

Vec3 shell_normal(const HeadShape& s, const Vec3& p) {
    const Vec3& a = s.semi_axes;
    return Vec3(p.x() / (a.x() * a.x()), p.y() / (a.y() * a.y()), p.z() / (a.z() * a.z())).normalized();
}

// Deterministic skin pattern with per-identity tint and stripes.
struct Palette {
    Vec3 skin, lips;
    double kx, ky, px, py;
};

Palette draw_palette(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Palette p;
    p.skin = Vec3(0.78, 0.58, 0.46) + 0.12 * Vec3(u(rng), u(rng), u(rng));
    p.lips = Vec3(0.72, 0.2, 0.24) + 0.06 * Vec3(u(rng), u(rng), u(rng));
    p.kx = 9.0 + 4.0 * u(rng);
    p.ky = 9.0 + 4.0 * u(rng);
    p.px = std::numbers::pi * u(rng);
    p.py = std::numbers::pi * u(rng);
    return p;
}

Vec3 shade(const Palette& pal, Region r, const Vec3& p, const HeadShape& s) {
    const double stripe = 1.0 + 0.18 * std::sin(pal.kx * p.x() + pal.px) * std::sin(pal.ky * p.y() + pal.py);
    Vec3 c;
    switch (r) {
        case Region::Lips: c = pal.lips * stripe; break;
        case Region::InsideMouth:
            c = p.y() < s.lip_center.y() - 0.25 * s.lip_radii.y() ? Vec3(0.92, 0.9, 0.84) : Vec3(0.3, 0.06, 0.1);
            break;
        case Region::UpperFace: {
            c = pal.skin * stripe;
            const double eye = std::min((Eigen::Vector2d(std::abs(p.x()), p.y()) - Eigen::Vector2d(0.2, -0.2)).norm(),
                                        1.0);
            if (eye < 0.07) c = Vec3(0.12, 0.1, 0.1);
            else if (p.y() > -0.36 && p.y() < -0.29 && std::abs(p.x()) > 0.07 && std::abs(p.x()) < 0.33)
                c = Vec3(0.25, 0.17, 0.12);
            break;
        }
        case Region::Rigid: c = pal.skin * (0.92 * stripe); break;
    }
    return c.cwiseMax(0.03).cwiseMin(0.97);
}

Region classify_shell(const HeadShape& s, const Vec3& p) {
    if (p.z() < 0.0 && lip_q(s, p.x(), p.y()) < 1.0) return Region::Lips;  // caller rejects the hole
    if (p.z() < 0.0 && p.y() < s.upper_face_y) return Region::UpperFace;
    return Region::Rigid;
}

std::vector<Vec3> probe_shell(const HeadShape& s, Region want, std::size_t count, std::mt19937_64& rng) {
    std::vector<Vec3> out;
    out.reserve(count);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    const Vec3& a = s.semi_axes;
    while (out.size() < count) {
        Vec3 p;
        if (want == Region::Lips || want == Region::InsideMouth) {
            const double x = s.lip_center.x() + s.lip_radii.x() * u(rng);
            const double y = s.lip_center.y() + s.lip_radii.y() * u(rng);
            const double q = lip_q(s, x, y);
            if (want == Region::Lips && (q < s.lip_inner || q >= 1.0)) continue;
            if (want == Region::InsideMouth && q >= s.lip_inner * 1.05) continue;
            p = Vec3(x, y, front_z(s, x, y));
            if (want == Region::InsideMouth) p.z() += s.mouth_depth;
        } else {
            Vec3 d(g(rng), g(rng), g(rng));
            if (d.norm() < 1e-9) continue;
            d.normalize();
            p = a.cwiseProduct(d);
            if (p.z() > s.front_limit * a.z()) continue;
            if (p.z() < 0.0 && lip_q(s, p.x(), p.y()) < 1.0) continue;
            if (classify_shell(s, p) != want) continue;
        }
        out.push_back(p);
    }
    return out;
}

// Distance to the 4th nearest neighbor, so sparse areas get larger disks.
double local_spacing(const std::vector<Vec3>& pts, std::size_t i) {
    constexpr std::size_t k = 4;
    if (pts.size() <= k) return 0.05;
    std::vector<double> d;
    d.reserve(pts.size() - 1);
    for (std::size_t j = 0; j < pts.size(); ++j)
        if (j != i) d.push_back((pts[j] - pts[i]).squaredNorm());
    std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
    return std::sqrt(d[k - 1]);
}

std::size_t region_target(double frac, std::size_t n) { return static_cast<std::size_t>(std::lround(frac * n)); }

Tensor probe_conditions(const motion::ConditionLayout& layout) { return condition_stream(0x5eedULL, 48, layout); }

Tensor cond_row(const Tensor& conds, std::size_t t) {
    Tensor c(1, conds.cols);
    for (std::size_t j = 0; j < conds.cols; ++j) c[j] = conds(t, j);
    return c;
}

Vec3 apply_map(const Tensor& m, const Tensor& cond) {
    Vec3 out = Vec3::Zero();
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out[static_cast<Eigen::Index>(r)] += m(r, c) * cond[c];
    return out;
}

Tensor gaussian_map(std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor m(3, cols);
    for (double& v : m.data) v = g(rng);
    return m;
}

// Personal displacement of one face point (before motion_scale).
Vec3 personal_face_point(const SyntheticIdentity& id, Region r, const Vec3& canon, const Tensor& cond) {
    const HeadShape& s = id.config.shape;
    switch (r) {
        case Region::UpperFace: return brow_weight(s, canon.y()) * apply_map(id.personal.upper, cond);
        case Region::Lips: return apply_map(id.personal.lips, cond);
        default: return Vec3::Zero();
    }
}

Vec3 personal_mouth_point(const SyntheticIdentity& id, const Tensor& cond) {
    return kJawShare * apply_map(id.personal.lips, cond);
}

}  // namespace

std::string_view region_name(Region r) {
    switch (r) {
        case Region::UpperFace: return "upper_face";
        case Region::Lips: return "lips";
        case Region::InsideMouth: return "inside_mouth";
        case Region::Rigid: return "rigid";
    }
    return "?";
}

std::vector<double> PersonalMap::flat() const {
    std::vector<double> v(upper.data);
    v.insert(v.end(), lips.data.begin(), lips.data.end());
    return v;
}

std::size_t SyntheticIdentity::region_count(Region r) const {
    if (r == Region::InsideMouth) return mouth.size();
    return static_cast<std::size_t>(std::count(face_regions.begin(), face_regions.end(), r));
}

void SyntheticIdentity::set_structure(const Eigen::Vector3d& shift, double scale) {
    offset = shift;
    motion_scale = scale;
    for (std::size_t i = 0; i < face.size(); ++i)
        for (std::size_t k = 0; k < 3; ++k) face.mu(i, k) = face_canonical(i, k) + shift[static_cast<Eigen::Index>(k)];
    for (std::size_t i = 0; i < mouth.size(); ++i)
        for (std::size_t k = 0; k < 3; ++k)
            mouth.mu(i, k) = mouth_canonical(i, k) + shift[static_cast<Eigen::Index>(k)];
}

// Opens up to 0.09 and closes by at most 0.011; zero at zero.
double lip_opening(const Tensor& cond) {
    const double t = std::tanh(1.5 * cond[0]);
    return 0.09 * t * (1.0 + t) / 2.0;
}

Eigen::Vector3d universal_motion(Region region, const Eigen::Vector3d& p, const Tensor& cond, const HeadShape& s,
                                 const motion::ConditionLayout& layout) {
    if (cond.size() != layout.total()) throw UsageError("universal_motion: condition size mismatch");
    const double o = lip_opening(cond);
    switch (region) {
        case Region::Lips: {
            const double spread = 0.03 * std::tanh(cond[1]);
            const double u = (p.x() - s.lip_center.x()) / s.lip_radii.x();
            const double v = (p.y() - s.lip_center.y()) / s.lip_radii.y();
            const double open = -kUpperLipShare + (1.0 + kUpperLipShare) * smoothstep(-0.5, 0.5, v);
            return {spread * u, o * open, 0.0};
        }
        case Region::InsideMouth: return {0.0, kJawShare * o, 0.0};
        case Region::UpperFace: {
            const std::size_t e = layout.audio;
            const double h = brow_weight(s, p.y());
            const double side = p.x() / s.semi_axes.x();
            const double ex = layout.expression;
            const double e0 = ex > 0 ? cond[e] : 0.0;
            const double e1 = ex > 1 ? cond[e + 1] : 0.0;
            const double e2 = ex > 2 ? cond[e + 2] : 0.0;
            const double e3 = ex > 3 ? cond[e + 3] : 0.0;
            return h * Vec3(0.03 * std::tanh(e2) * side, -0.05 * std::tanh(1.2 * e0) + 0.02 * std::tanh(e3) * side,
                            0.02 * std::tanh(e1));
        }
        case Region::Rigid: return Vec3::Zero();
    }
    return Vec3::Zero();
}

DeformParts gt_deform(const SyntheticIdentity& id, const Tensor& cond) {
    const auto& layout = id.config.layout;
    if (cond.size() != layout.total()) throw UsageError("gt_deform: condition size mismatch");
    DeformParts d;
    const std::size_t n = id.face.size(), m = id.mouth.size();
    d.universal_face = Tensor(n, 3);
    d.personal_face = Tensor(n, 3);
    d.universal_mouth = Tensor(m, 3);
    d.personal_mouth = Tensor(m, 3);
    const double k = id.motion_scale;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 c(id.face_canonical(i, 0), id.face_canonical(i, 1), id.face_canonical(i, 2));
        const Vec3 u = k * universal_motion(id.face_regions[i], c, cond, id.config.shape, layout);
        const Vec3 p = k * personal_face_point(id, id.face_regions[i], c, cond);
        for (int a = 0; a < 3; ++a) {
            d.universal_face(i, a) = u[a];
            d.personal_face(i, a) = p[a];
        }
    }
    const Vec3 pm = k * personal_mouth_point(id, cond);
    for (std::size_t i = 0; i < m; ++i) {
        const Vec3 c(id.mouth_canonical(i, 0), id.mouth_canonical(i, 1), id.mouth_canonical(i, 2));
        const Vec3 u = k * universal_motion(Region::InsideMouth, c, cond, id.config.shape, layout);
        for (int a = 0; a < 3; ++a) {
            d.universal_mouth(i, a) = u[a];
            d.personal_mouth(i, a) = pm[a];
        }
    }
    return d;
}

double personal_ratio(const SyntheticIdentity& id, Region r) {
    const Tensor probes = probe_conditions(id.config.layout);
    double num = 0.0, den = 0.0;
    for (std::size_t t = 0; t < probes.rows; ++t) {
        const Tensor c = cond_row(probes, t);
        if (r == Region::InsideMouth) {
            for (std::size_t i = 0; i < id.mouth.size(); ++i) {
                const Vec3 p(id.mouth_canonical(i, 0), id.mouth_canonical(i, 1), id.mouth_canonical(i, 2));
                num += personal_mouth_point(id, c).norm();
                den += universal_motion(r, p, c, id.config.shape, id.config.layout).norm();
            }
            continue;
        }
        for (std::size_t i = 0; i < id.face.size(); ++i) {
            if (id.face_regions[i] != r) continue;
            const Vec3 p(id.face_canonical(i, 0), id.face_canonical(i, 1), id.face_canonical(i, 2));
            num += personal_face_point(id, r, p, c).norm();
            den += universal_motion(r, p, c, id.config.shape, id.config.layout).norm();
        }
    }
    return den > 0.0 ? num / den : 0.0;
}

void normalize_personal(SyntheticIdentity& id, double ratio) {
    for (Region r : {Region::UpperFace, Region::Lips}) {
        double cur = personal_ratio(id, r);
        if (r == Region::Lips) cur = std::max(cur, personal_ratio(id, Region::InsideMouth));
        if (cur <= 0.0) continue;
        Tensor& m = r == Region::UpperFace ? id.personal.upper : id.personal.lips;
        for (double& v : m.data) v *= ratio / cur;
    }
}

double map_cosine(const PersonalMap& a, const PersonalMap& b) {
    const auto x = a.flat(), y = b.flat();
    if (x.size() != y.size()) throw UsageError("map_cosine: map size mismatch");
    double d = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        d += x[i] * y[i];
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    if (nx == 0.0 || ny == 0.0) return 0.0;
    return d / std::sqrt(nx * ny);
}

SyntheticIdentity make_identity(std::uint64_t seed, const SceneConfig& cfg) {
    if (cfg.n_points < 100) throw UsageError("make_identity: need at least 100 points");
    if (cfg.frac_upper < 0 || cfg.frac_lips < 0 || cfg.frac_mouth < 0 ||
        cfg.frac_upper + cfg.frac_lips + cfg.frac_mouth > 1.0)
        throw ConfigError("make_identity: region fractions must be non-negative and sum to at most 1");
    SyntheticIdentity id;
    id.seed = seed;
    id.config = cfg;
    const HeadShape& s = cfg.shape;
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x1234567ULL);
    const Palette pal = draw_palette(rng);

    const std::size_t n_up = region_target(cfg.frac_upper, cfg.n_points);
    const std::size_t n_lip = region_target(cfg.frac_lips, cfg.n_points);
    const std::size_t n_mouth = region_target(cfg.frac_mouth, cfg.n_points);
    const std::size_t n_rigid = cfg.n_points - n_up - n_lip - n_mouth;

    std::vector<std::pair<Region, Vec3>> face_pts;
    for (auto [r, cnt] : {std::pair{Region::UpperFace, n_up}, {Region::Lips, n_lip}, {Region::Rigid, n_rigid}})
        for (const Vec3& p : probe_shell(s, r, cnt, rng)) face_pts.emplace_back(r, p);
    const std::vector<Vec3> mouth_pts = probe_shell(s, Region::InsideMouth, n_mouth, rng);

    auto build = [&](gs::Branch b, const std::vector<Vec3>& pts, const std::vector<Region>& regs) {
        gs::StructureField f = gs::StructureField::empty(b);
        Tensor points(pts.size(), 3);
        for (std::size_t i = 0; i < pts.size(); ++i)
            for (int a = 0; a < 3; ++a) points(i, a) = pts[i][a];
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const double nn = local_spacing(pts, i);
            gs::GaussianPrimitive g;
            g.mu = pts[i];
            const Vec3 n = regs[i] == Region::InsideMouth ? Vec3(0, 0, -1) : shell_normal(s, pts[i]);
            g.rotation = quat_from_z_to(n);
            g.log_scale = Vec3(std::log(0.7 * nn), std::log(0.7 * nn), std::log(0.1 * nn));
            g.opacity_logit = logit(0.97);
            const Vec3 c = shade(pal, regs[i], pts[i], s);
            g.color_logit = Vec3(logit(c.x()), logit(c.y()), logit(c.z()));
            f.push_back(g);
        }
        return std::make_pair(f, points);
    };

    std::vector<Vec3> fp;
    for (const auto& [r, p] : face_pts) {
        id.face_regions.push_back(r);
        fp.push_back(p);
    }
    std::tie(id.face, id.face_canonical) = build(gs::Branch::Face, fp, id.face_regions);
    std::tie(id.mouth, id.mouth_canonical) =
        build(gs::Branch::Mouth, mouth_pts, std::vector<Region>(mouth_pts.size(), Region::InsideMouth));

    id.personal.upper = gaussian_map(cfg.layout.total(), rng);
    id.personal.lips = gaussian_map(cfg.layout.total(), rng);
    normalize_personal(id, cfg.personal_ratio);
    return id;
}

std::vector<SyntheticIdentity> make_corpus(std::size_t k, std::uint64_t base_seed, const SceneConfig& cfg) {
    if (k == 0) throw UsageError("make_corpus: need at least one identity");
    std::vector<SyntheticIdentity> ids;
    for (std::size_t i = 0; i < k; ++i) ids.push_back(make_identity(base_seed + i, cfg));
    if (k == 1) return ids;
    for (std::uint64_t salt = 0; salt < 1000; ++salt) {
        std::mt19937_64 rng(base_seed * 0x2545F4914F6CDD1DULL + salt);
        for (auto& id : ids) {
            id.personal.upper = gaussian_map(cfg.layout.total(), rng);
            id.personal.lips = gaussian_map(cfg.layout.total(), rng);
        }
        for (Tensor PersonalMap::*part : {&PersonalMap::upper, &PersonalMap::lips}) {
            Tensor mean(3, cfg.layout.total());
            for (const auto& id : ids) mean.add_scaled_(id.personal.*part, 1.0 / static_cast<double>(k));
            for (auto& id : ids) (id.personal.*part).add_scaled_(mean, -1.0);
        }
        // One common factor per region keeps the corpus mean at zero.
        for (Region r : {Region::UpperFace, Region::Lips}) {
            double worst = 0.0;
            for (const auto& id : ids) {
                worst = std::max(worst, personal_ratio(id, r));
                if (r == Region::Lips) worst = std::max(worst, personal_ratio(id, Region::InsideMouth));
            }
            if (worst <= 0.0) continue;
            for (auto& id : ids) {
                Tensor& m = r == Region::UpperFace ? id.personal.upper : id.personal.lips;
                for (double& v : m.data) v *= cfg.personal_ratio / worst;
            }
        }
        bool ok = true;
        for (std::size_t i = 0; i < k && ok; ++i)
            for (std::size_t j = i + 1; j < k && ok; ++j)
                ok = map_cosine(ids[i].personal, ids[j].personal) <= cfg.max_pair_cosine;
        if (ok) return ids;
    }
    throw ConfigError("make_corpus: could not draw personal maps within the cosine limit");
}

Tensor condition_stream(std::uint64_t seed, std::size_t frames, const motion::ConditionLayout& layout, double cutoff) {
    if (frames == 0) throw UsageError("condition_stream: need at least one frame");
    const std::size_t c = layout.total();
    Tensor out(frames, c);
    std::mt19937_64 rng(seed ^ 0xC0DEC0DEULL);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int max_bin = std::max(1, static_cast<int>(std::floor(cutoff * static_cast<double>(frames))));
    std::uniform_int_distribution<int> bin(1, max_bin);
    std::uniform_int_distribution<int> parts(1, 5);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const int m = parts(rng);
        const double budget = 0.6 + 0.4 * u(rng);
        std::vector<double> amp(static_cast<std::size_t>(m)), phase(amp.size());
        std::vector<int> k(amp.size());
        double total = 0.0;
        for (std::size_t j = 0; j < amp.size(); ++j) {
            amp[j] = 0.2 + u(rng);
            total += amp[j];
            phase[j] = 2.0 * std::numbers::pi * u(rng);
            k[j] = bin(rng);
        }
        for (double& a : amp) a *= budget / total;
        for (std::size_t t = 0; t < frames; ++t) {
            double v = 0.0;
            for (std::size_t j = 0; j < amp.size(); ++j)
                v += amp[j] * std::sin(2.0 * std::numbers::pi * k[j] * static_cast<double>(t) / frames + phase[j]);
            out(t, ch) = v;
        }
    }
    return out;
}

std::vector<CameraPose> jittered_cameras(std::uint64_t seed, std::size_t count, double max_deg, int width, int height) {
    std::mt19937_64 rng(seed ^ 0xCA3E7A5ULL);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double lim = max_deg * std::numbers::pi / 180.0;
    std::vector<CameraPose> out(count);
    for (auto& p : out) {
        // Average of two uniforms: triangular, peaked at the frontal view.
        p.yaw = lim * 0.5 * (u(rng) + u(rng));
        p.pitch = lim * 0.5 * (u(rng) + u(rng));
        p.width = width;
        p.height = height;
    }
    return out;
}

namespace {

gs::StructureField displaced(const gs::StructureField& f, const Tensor& a, const Tensor& b) {
    gs::StructureField out = f;
    for (std::size_t i = 0; i < out.mu.size(); ++i) out.mu[i] += a[i] + b[i];
    return out;
}

}  // namespace

RenderedScene render_identity(const SyntheticIdentity& id, const DeformParts& parts, const render::Camera& cam,
                              const Eigen::Vector3d& background) {
    ad::Tape tape(false);
    const render::RenderSettings rs;
    const auto face = gs::field_constants(tape, displaced(id.face, parts.universal_face, parts.personal_face));
    const auto mouth = gs::field_constants(tape, displaced(id.mouth, parts.universal_mouth, parts.personal_mouth));
    const render::Layer fl = render::render_layer(face, cam, rs, Vec3::Zero());
    const render::Layer ml = render::render_layer(mouth, cam, rs, background);
    RenderedScene out;
    out.image = render::to_image(render::finish(render::composite(fl, ml)), cam);
    out.mouth_image = ml.color.value();
    return out;
}

Tensor mouth_region_mask(const SyntheticIdentity& id, const DeformParts& parts, const render::Camera& cam, int margin) {
    double u0 = 1e30, u1 = -1e30, v0 = 1e30, v1 = -1e30;
    auto visit = [&](const Tensor& mu, const Tensor& a, const Tensor& b, std::size_t i) {
        const Vec3 p(mu(i, 0) + a(i, 0) + b(i, 0), mu(i, 1) + a(i, 1) + b(i, 1), mu(i, 2) + a(i, 2) + b(i, 2));
        const Vec3 q = cam.R * p + cam.t;
        if (q.z() <= cam.znear) return;
        const double u = cam.fx * q.x() / q.z() + cam.cx, v = cam.fy * q.y() / q.z() + cam.cy;
        u0 = std::min(u0, u);
        u1 = std::max(u1, u);
        v0 = std::min(v0, v);
        v1 = std::max(v1, v);
    };
    for (std::size_t i = 0; i < id.face.size(); ++i)
        if (id.face_regions[i] == Region::Lips) visit(id.face.mu, parts.universal_face, parts.personal_face, i);
    for (std::size_t i = 0; i < id.mouth.size(); ++i)
        visit(id.mouth.mu, parts.universal_mouth, parts.personal_mouth, i);
    Tensor mask(cam.pixels(), 1);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            if (px >= u0 - margin && px <= u1 + margin && py >= v0 - margin && py <= v1 + margin)
                mask[static_cast<std::size_t>(y) * cam.width + x] = 1.0;
        }
    return mask;
}

loss::GeometryTargets corrupt_targets(const Tensor& depth, const Tensor& normal, const Tensor& alpha,
                                      std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0xDE9C0FFEEULL);
    std::uniform_real_distribution<double> ua(0.5, 2.0), ub(-0.1, 0.1);
    std::normal_distribution<double> noise(0.0, 0.01);
    const double a = ua(rng), b = ub(rng);
    loss::GeometryTargets t;
    const std::size_t p = depth.rows;
    t.depth = Tensor(p, 1);
    t.normal = Tensor(p, 3);
    t.mask = Tensor(p, 1);
    for (std::size_t i = 0; i < p; ++i) {
        if (alpha[i] <= 0.5) continue;
        t.mask[i] = 1.0;
        t.depth[i] = a * depth[i] + b + noise(rng);
        Vec3 n(normal(i, 0) + noise(rng), normal(i, 1) + noise(rng), normal(i, 2) + noise(rng));
        if (n.norm() > 0) n.normalize();
        for (int k = 0; k < 3; ++k) t.normal(i, k) = n[k];
    }
    return t;
}

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }
void round_f32(Tensor& t) {
    for (double& v : t.data) v = to_f32(v);
}
void round_u8(Tensor& t) {
    for (double& v : t.data) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

}  // namespace

Dataset build_dataset(const SyntheticIdentity& id, const Tensor& conditions, const std::vector<CameraPose>& poses,
                      const GenerateOptions& opts) {
    if (conditions.rows != poses.size()) throw UsageError("build_dataset: one camera per frame is required");
    if (conditions.cols != id.config.layout.total()) throw UsageError("build_dataset: condition width mismatch");
    Dataset ds;
    ds.identity = id;
    ds.background = opts.background;
    ds.width = opts.width;
    ds.height = opts.height;
    for (std::size_t t = 0; t < conditions.rows; ++t) {
        FrameRecord fr;
        fr.cond = cond_row(conditions, t);
        round_f32(fr.cond);
        fr.pose = poses[t];
        fr.pose.width = opts.width;
        fr.pose.height = opts.height;
        const render::Camera cam = fr.pose.camera();
        fr.deform = gt_deform(id, fr.cond);
        const RenderedScene sc = render_identity(id, fr.deform, cam, opts.background);
        fr.image = sc.image.color;
        fr.mouth_image = sc.mouth_image;
        fr.alpha = sc.image.alpha;
        fr.depth = sc.image.depth;
        fr.normal = sc.image.normal;
        fr.mouth_mask = mouth_region_mask(id, fr.deform, cam);
        fr.targets = corrupt_targets(fr.depth, fr.normal, fr.alpha, opts.seed * 1000003ULL + t);
        round_u8(fr.image);
        round_u8(fr.mouth_image);
        for (Tensor* x : {&fr.alpha, &fr.depth, &fr.normal, &fr.targets.depth, &fr.targets.normal,
                          &fr.deform.universal_face, &fr.deform.personal_face, &fr.deform.universal_mouth,
                          &fr.deform.personal_mouth})
            round_f32(*x);
        ds.frames.push_back(std::move(fr));
    }
    return ds;
}

Dataset generate(const SyntheticIdentity& id, std::size_t frames, const GenerateOptions& opts) {
    const Tensor cond = condition_stream(opts.seed, frames, id.config.layout, opts.cutoff);
    const auto poses = jittered_cameras(opts.seed, frames, opts.jitter_deg, opts.width, opts.height);
    return build_dataset(id, cond, poses, opts);
}

// ---------------------------------------------------------------------------
// files

namespace {

json tensor_json(const Tensor& t) { return json{{"rows", t.rows}, {"cols", t.cols}, {"data", t.data}}; }

Tensor tensor_from_json(const json& j) {
    Tensor t(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
    t.data = j.at("data").get<std::vector<double>>();
    if (t.data.size() != t.rows * t.cols) throw ConfigError("manifest: tensor payload size mismatch");
    return t;
}

json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
Vec3 vec3_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

std::string frame_name(std::size_t t) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", t);
    return buf;
}

Tensor join_cols(const Tensor& a, const Tensor& b) {
    Tensor out(a.rows, a.cols + b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < a.cols; ++j) out(i, j) = a(i, j);
        for (std::size_t j = 0; j < b.cols; ++j) out(i, a.cols + j) = b(i, j);
    }
    return out;
}

std::pair<Tensor, Tensor> split_cols(const Tensor& x, std::size_t k) {
    Tensor a(x.rows, k), b(x.rows, x.cols - k);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) (j < k ? a(i, j) : b(i, j - k)) = x(i, j);
    return {a, b};
}

void write_vector(const std::filesystem::path& p, const Tensor& t) {
    render::write_raster(p, t, static_cast<int>(t.rows), 1);
}

Tensor read_checked(const std::filesystem::path& p, std::size_t rows, std::size_t cols) {
    int w = 0, h = 0;
    Tensor t = render::read_raster(p, w, h);
    if (t.rows != rows || t.cols != cols)
        throw ConfigError("'" + p.string() + "' has shape " + std::to_string(t.rows) + "x" + std::to_string(t.cols) +
                          ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    return t;
}

}  // namespace

std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    for (const char* sub : {"frames", "mouth", "geometry", "targets", "deform"}) {
        fs::create_directories(dir / sub, ec);
        if (ec) throw IoError("cannot create '" + (dir / sub).string() + "': " + ec.message());
    }
    const auto& id = ds.identity;
    const auto& cfg = id.config;
    json m;
    m["format"] = "instag-dataset";
    m["version"] = 1;
    m["width"] = ds.width;
    m["height"] = ds.height;
    m["background"] = vec3_json(ds.background);
    m["layout"] = {{"audio", cfg.layout.audio}, {"expression", cfg.layout.expression}};
    m["identity"] = {{"seed", id.seed},
                     {"n_points", cfg.n_points},
                     {"fractions", {cfg.frac_upper, cfg.frac_lips, cfg.frac_mouth}},
                     {"personal_ratio", cfg.personal_ratio},
                     {"offset", vec3_json(id.offset)},
                     {"motion_scale", id.motion_scale},
                     {"personal_upper", tensor_json(id.personal.upper)},
                     {"personal_lips", tensor_json(id.personal.lips)}};
    Tensor conds(ds.size(), cfg.layout.total());
    json frames = json::array();
    for (std::size_t t = 0; t < ds.size(); ++t) {
        const FrameRecord& fr = ds.frames[t];
        for (std::size_t j = 0; j < conds.cols; ++j) conds(t, j) = fr.cond[j];
        const std::string n = frame_name(t);
        json f = {{"image", "frames/" + n + ".ppm"},
                  {"mouth", "mouth/" + n + ".ppm"},
                  {"alpha", "geometry/" + n + "_alpha.raw"},
                  {"depth", "geometry/" + n + "_depth.raw"},
                  {"normal", "geometry/" + n + "_normal.raw"},
                  {"mouth_mask", "geometry/" + n + "_mouth_mask.raw"},
                  {"target_depth", "targets/" + n + "_depth.raw"},
                  {"target_normal", "targets/" + n + "_normal.raw"},
                  {"target_mask", "targets/" + n + "_mask.raw"},
                  {"deform_face", "deform/" + n + "_face.raw"},
                  {"deform_mouth", "deform/" + n + "_mouth.raw"},
                  {"camera",
                   {{"yaw", fr.pose.yaw}, {"pitch", fr.pose.pitch}, {"distance", fr.pose.distance},
                    {"focal", fr.pose.focal}}}};
        render::write_ppm(dir / f["image"].get<std::string>(), fr.image, ds.width, ds.height);
        render::write_ppm(dir / f["mouth"].get<std::string>(), fr.mouth_image, ds.width, ds.height);
        render::write_raster(dir / f["alpha"].get<std::string>(), fr.alpha, ds.width, ds.height);
        render::write_raster(dir / f["depth"].get<std::string>(), fr.depth, ds.width, ds.height);
        render::write_raster(dir / f["normal"].get<std::string>(), fr.normal, ds.width, ds.height);
        render::write_raster(dir / f["mouth_mask"].get<std::string>(), fr.mouth_mask, ds.width, ds.height);
        render::write_raster(dir / f["target_depth"].get<std::string>(), fr.targets.depth, ds.width, ds.height);
        render::write_raster(dir / f["target_normal"].get<std::string>(), fr.targets.normal, ds.width, ds.height);
        render::write_raster(dir / f["target_mask"].get<std::string>(), fr.targets.mask, ds.width, ds.height);
        write_vector(dir / f["deform_face"].get<std::string>(),
                     join_cols(fr.deform.universal_face, fr.deform.personal_face));
        write_vector(dir / f["deform_mouth"].get<std::string>(),
                     join_cols(fr.deform.universal_mouth, fr.deform.personal_mouth));
        frames.push_back(std::move(f));
    }
    render::write_raster(dir / "conditions.raw", conds, static_cast<int>(ds.size()), 1);
    m["conditions"] = "conditions.raw";
    m["frame_count"] = ds.size();
    m["frames"] = std::move(frames);
    const auto path = dir / "manifest.json";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f << m.dump(1) << "\n";
    if (!f) throw IoError("write failed for '" + path.string() + "'");
    return path;
}

Dataset read_dataset(const std::filesystem::path& manifest) {
    std::ifstream in(manifest, std::ios::binary);
    if (!in) throw IoError("cannot open '" + manifest.string() + "'");
    json m;
    try {
        m = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("'" + manifest.string() + "' is not valid JSON: " + e.what());
    }
    const auto dir = manifest.parent_path();
    try {
        if (m.at("format").get<std::string>() != "instag-dataset") throw ConfigError("not a dataset manifest");
        SceneConfig cfg;
        const json& jid = m.at("identity");
        cfg.layout.audio = m.at("layout").at("audio").get<std::size_t>();
        cfg.layout.expression = m.at("layout").at("expression").get<std::size_t>();
        cfg.n_points = jid.at("n_points").get<std::size_t>();
        cfg.frac_upper = jid.at("fractions").at(0).get<double>();
        cfg.frac_lips = jid.at("fractions").at(1).get<double>();
        cfg.frac_mouth = jid.at("fractions").at(2).get<double>();
        cfg.personal_ratio = jid.at("personal_ratio").get<double>();
        Dataset ds;
        ds.identity = make_identity(jid.at("seed").get<std::uint64_t>(), cfg);
        ds.identity.personal.upper = tensor_from_json(jid.at("personal_upper"));
        ds.identity.personal.lips = tensor_from_json(jid.at("personal_lips"));
        ds.identity.set_structure(vec3_from(jid.at("offset")), jid.at("motion_scale").get<double>());
        ds.width = m.at("width").get<int>();
        ds.height = m.at("height").get<int>();
        ds.background = vec3_from(m.at("background"));
        const std::size_t n = m.at("frame_count").get<std::size_t>();
        const std::size_t p = static_cast<std::size_t>(ds.width) * ds.height;
        const std::size_t nf = ds.identity.face.size(), nm = ds.identity.mouth.size();
        const Tensor conds = read_checked(dir / m.at("conditions").get<std::string>(), n, cfg.layout.total());
        const json& frames = m.at("frames");
        if (frames.size() != n) throw ConfigError("manifest frame list length differs from frame_count");
        for (std::size_t t = 0; t < n; ++t) {
            const json& f = frames.at(t);
            FrameRecord fr;
            fr.cond = cond_row(conds, t);
            const json& c = f.at("camera");
            fr.pose.yaw = c.at("yaw").get<double>();
            fr.pose.pitch = c.at("pitch").get<double>();
            fr.pose.distance = c.at("distance").get<double>();
            fr.pose.focal = c.at("focal").get<double>();
            fr.pose.width = ds.width;
            fr.pose.height = ds.height;
            auto image = [&](const char* key) {
                int w = 0, h = 0;
                const auto path = dir / f.at(key).get<std::string>();
                Tensor img = render::read_ppm(path, w, h);
                if (w != ds.width || h != ds.height) throw ConfigError("'" + path.string() + "' has the wrong size");
                return img;
            };
            auto raster = [&](const char* key, std::size_t cols) {
                return read_checked(dir / f.at(key).get<std::string>(), p, cols);
            };
            fr.image = image("image");
            fr.mouth_image = image("mouth");
            fr.alpha = raster("alpha", 1);
            fr.depth = raster("depth", 1);
            fr.normal = raster("normal", 3);
            fr.mouth_mask = raster("mouth_mask", 1);
            fr.targets.depth = raster("target_depth", 1);
            fr.targets.normal = raster("target_normal", 3);
            fr.targets.mask = raster("target_mask", 1);
            std::tie(fr.deform.universal_face, fr.deform.personal_face) =
                split_cols(read_checked(dir / f.at("deform_face").get<std::string>(), nf, 6), 3);
            std::tie(fr.deform.universal_mouth, fr.deform.personal_mouth) =
                split_cols(read_checked(dir / f.at("deform_mouth").get<std::string>(), nm, 6), 3);
            ds.frames.push_back(std::move(fr));
        }
        return ds;
    } catch (const json::exception& e) {
        throw ConfigError("'" + manifest.string() + "': " + e.what());
    }
}

}  // namespace instag::synth
