// SPDX-License-Identifier: Apache-2.0
#include "instag/rasterizer.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <thread>

#include "instag/errors.hpp"

namespace instag::render {

namespace {

using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;

constexpr std::size_t kRawCols = 8;

Mat3 quat_to_matrix(const Vec4& q) { return gs::rotation_matrix(q); }

// Gradient of a loss w.r.t. the unit quaternion, given dL/dR.
Vec4 rotation_backward(const Vec4& q_raw, const Mat3& G) {
    const double len = q_raw.norm();
    const Vec4 q = q_raw / len;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Vec4 g;
    g[0] = 2 * (-z * G(0, 1) + y * G(0, 2) + z * G(1, 0) - x * G(1, 2) - y * G(2, 0) + x * G(2, 1));
    g[1] = 2 * (y * G(0, 1) + z * G(0, 2) + y * G(1, 0) - 2 * x * G(1, 1) - w * G(1, 2) + z * G(2, 0) + w * G(2, 1) -
                2 * x * G(2, 2));
    g[2] = 2 * (-2 * y * G(0, 0) + x * G(0, 1) + w * G(0, 2) + x * G(1, 0) + z * G(1, 2) - w * G(2, 0) + z * G(2, 1) -
                2 * y * G(2, 2));
    g[3] = 2 * (-2 * z * G(0, 0) - w * G(0, 1) + x * G(0, 2) + w * G(1, 0) - 2 * z * G(1, 1) + y * G(1, 2) +
                x * G(2, 0) + y * G(2, 1));
    return (g - q * q.dot(g)) / len;
}

struct ProjectCache {
    Vec3 p;     // camera-space center
    Mat3 Rq;    // rotation of the primitive
    Vec3 scale; // exp(log_scale)
    Mat3 sigma_cam;
    Mat23 J;
    Mat2 conic;
    int axis = 2;
    double sign = 1.0;
    bool visible = false;
};

template <typename F>
void parallel_for(int threads, std::size_t n, F&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    for (auto& t : pool) t.join();
}

}  // namespace

void Camera::validate() const {
    if (!(fx > 0) || !(fy > 0)) throw UsageError("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw UsageError("camera image size must be positive");
    if ((R.transpose() * R - Mat3::Identity()).norm() > 1e-6) throw UsageError("camera rotation is not orthonormal");
    if (!t.allFinite() || !R.allFinite()) throw UsageError("camera pose is not finite");
}

Camera Camera::orbit(double yaw, double pitch, double distance, int width, int height, double focal) {
    Camera c;
    c.width = width;
    c.height = height;
    c.fx = c.fy = focal;
    c.cx = 0.5 * width;
    c.cy = 0.5 * height;
    const Mat3 ry = Eigen::AngleAxisd(yaw, Vec3::UnitY()).toRotationMatrix();
    const Mat3 rx = Eigen::AngleAxisd(pitch, Vec3::UnitX()).toRotationMatrix();
    c.R = rx * ry;
    c.t = {0.0, 0.0, distance};
    return c;
}

RenderSettings RenderSettings::exact() {
    RenderSettings s;
    s.min_alpha = 0.0;
    s.min_transmittance = 0.0;
    s.extent_sigma = std::numeric_limits<double>::infinity();
    s.max_alpha = 1.0;
    return s;
}

// ---------------------------------------------------------------------------
// projection

ad::Var project(ad::Var mu_v, ad::Var ls_v, ad::Var rot_v, const Camera& cam, const RenderSettings& rs) {
    cam.validate();
    const Tensor& mu = mu_v.value();
    const Tensor& ls = ls_v.value();
    const Tensor& rot = rot_v.value();
    const std::size_t n = mu.rows;
    if (mu.cols != 3 || ls.cols != 3 || rot.cols != 4 || ls.rows != n || rot.rows != n)
        throw UsageError("project: expected N x 3 positions and scales and N x 4 rotations");

    auto cache = std::make_shared<std::vector<ProjectCache>>(n);
    Tensor out(n, kProjCols);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 m{mu(i, 0), mu(i, 1), mu(i, 2)};
        const Vec3 s{ls(i, 0), ls(i, 1), ls(i, 2)};
        const Vec4 q{rot(i, 0), rot(i, 1), rot(i, 2), rot(i, 3)};
        if (!m.allFinite() || !s.allFinite() || !q.allFinite() || q.norm() == 0.0)
            throw NumericError("primitive " + std::to_string(i) + " has a non-finite or degenerate parameter");
        ProjectCache& c = (*cache)[i];
        c.p = cam.R * m + cam.t;
        if (c.p.z() <= cam.znear) continue;
        c.visible = true;
        c.Rq = quat_to_matrix(q);
        c.scale = s.array().exp();
        const Mat3 M = c.Rq * c.scale.asDiagonal();
        c.sigma_cam = cam.R * (M * M.transpose()) * cam.R.transpose();
        const double x = c.p.x(), y = c.p.y(), z = c.p.z();
        c.J << cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z);
        const Mat2 cov = c.J * c.sigma_cam * c.J.transpose() + rs.blur * Mat2::Identity();
        c.conic = cov.inverse();
        c.axis = gs::flattest_axis(s);
        Vec3 normal = cam.R * c.Rq.col(c.axis);
        c.sign = normal.dot(c.p) > 0.0 ? -1.0 : 1.0;
        normal *= c.sign;
        const double mid = 0.5 * (cov(0, 0) + cov(1, 1));
        const double lambda = mid + std::sqrt(std::max(0.1, mid * mid - cov.determinant()));
        out(i, kU) = cam.fx * x / z + cam.cx;
        out(i, kV) = cam.fy * y / z + cam.cy;
        out(i, kConicA) = c.conic(0, 0);
        out(i, kConicB) = c.conic(0, 1);
        out(i, kConicC) = c.conic(1, 1);
        out(i, kDepth) = z;
        out(i, kNx) = normal.x();
        out(i, kNy) = normal.y();
        out(i, kNz) = normal.z();
        out(i, kSigma) = std::sqrt(lambda);
    }

    const std::size_t im = mu_v.id(), is = ls_v.id(), iq = rot_v.id();
    const Camera cam_copy = cam;
    return mu_v.tape().record(std::move(out), {mu_v, ls_v, rot_v}, [=](ad::Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& rot_val = t.value(iq);
        const bool want_mu = t.requires_grad(im), want_s = t.requires_grad(is), want_q = t.requires_grad(iq);
        Tensor* gmu = want_mu ? &t.grad_buffer(im) : nullptr;
        Tensor* gs_ = want_s ? &t.grad_buffer(is) : nullptr;
        Tensor* gq = want_q ? &t.grad_buffer(iq) : nullptr;
        const Camera& c0 = cam_copy;
        for (std::size_t i = 0; i < n; ++i) {
            const ProjectCache& c = (*cache)[i];
            if (!c.visible) continue;
            const double x = c.p.x(), y = c.p.y(), z = c.p.z();
            Vec3 dp = Vec3::Zero();
            // center and depth
            dp.x() += g(i, kU) * c0.fx / z;
            dp.y() += g(i, kV) * c0.fy / z;
            dp.z() += -g(i, kU) * c0.fx * x / (z * z) - g(i, kV) * c0.fy * y / (z * z) + g(i, kDepth);
            // conic -> covariance
            Mat2 Gq;
            Gq << g(i, kConicA), 0.5 * g(i, kConicB), 0.5 * g(i, kConicB), g(i, kConicC);
            const Mat2 Gcov = -c.conic * Gq * c.conic;
            const Eigen::Matrix<double, 2, 3> GJ = 2.0 * Gcov * c.J * c.sigma_cam;
            const Mat3 Gsig_cam = c.J.transpose() * Gcov * c.J;
            const double z2 = z * z, z3 = z2 * z;
            dp.x() += GJ(0, 2) * (-c0.fx / z2);
            dp.y() += GJ(1, 2) * (-c0.fy / z2);
            dp.z() += GJ(0, 0) * (-c0.fx / z2) + GJ(0, 2) * (2 * c0.fx * x / z3) + GJ(1, 1) * (-c0.fy / z2) +
                      GJ(1, 2) * (2 * c0.fy * y / z3);
            const Mat3 Gsig = c0.R.transpose() * Gsig_cam * c0.R;
            const Mat3 M = c.Rq * c.scale.asDiagonal();
            const Mat3 GM = 2.0 * Gsig * M;
            Mat3 GR = GM * c.scale.asDiagonal();
            // normal
            const Vec3 gn{g(i, kNx), g(i, kNy), g(i, kNz)};
            GR.col(c.axis) += c.sign * (c0.R.transpose() * gn);
            if (gmu) {
                const Vec3 dmu = c0.R.transpose() * dp;
                for (int k = 0; k < 3; ++k) (*gmu)(i, k) += dmu[k];
            }
            if (gs_) {
                const Mat3 RtGM = c.Rq.transpose() * GM;
                for (int k = 0; k < 3; ++k) (*gs_)(i, k) += RtGM(k, k) * c.scale[k];
            }
            if (gq) {
                const Vec4 q{rot_val(i, 0), rot_val(i, 1), rot_val(i, 2), rot_val(i, 3)};
                const Vec4 dq = rotation_backward(q, GR);
                for (int k = 0; k < 4; ++k) (*gq)(i, k) += dq[k];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// compositing

namespace {

struct RasterPlan {
    int width = 0, height = 0, tile = 8, tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<std::uint32_t>> lists;  // per tile, front to back
    std::vector<std::uint32_t> contrib;             // per pixel: list entries visited
    std::vector<double> final_t;                    // per pixel
};

struct Contribution {
    double alpha = 0.0;   // clamped opacity at the pixel
    double gauss = 0.0;   // exp(power)
    double dx = 0.0, dy = 0.0;
    bool used = false;
    bool clamped = false;
};

inline Contribution evaluate(const Tensor& proj, const Tensor& opacity, std::uint32_t k, double px, double py,
                             const RenderSettings& rs) {
    Contribution c;
    c.dx = px - proj(k, kU);
    c.dy = py - proj(k, kV);
    const double power = -0.5 * (proj(k, kConicA) * c.dx * c.dx + 2.0 * proj(k, kConicB) * c.dx * c.dy +
                                 proj(k, kConicC) * c.dy * c.dy);
    c.gauss = std::exp(std::min(power, 0.0));
    double a = opacity[k] * c.gauss;
    if (a > rs.max_alpha) {
        a = rs.max_alpha;
        c.clamped = true;
    }
    c.alpha = a;
    c.used = a >= rs.min_alpha && a > 0.0;
    return c;
}

}  // namespace

ad::Var rasterize_raw(ad::Var proj_v, ad::Var op_v, ad::Var col_v, const Camera& cam, const RenderSettings& rs,
                      const Eigen::Vector3d& bg) {
    const Tensor& proj = proj_v.value();
    const Tensor& op = op_v.value();
    const Tensor& col = col_v.value();
    const std::size_t n = proj.rows;
    if (proj.cols != kProjCols || op.rows != n || op.cols != 1 || col.rows != n || col.cols != 3)
        throw UsageError("rasterize: expected packed projection with N x 1 opacity and N x 3 color");
    if (rs.tile <= 0) throw UsageError("rasterize: tile size must be positive");

    auto plan = std::make_shared<RasterPlan>();
    plan->width = cam.width;
    plan->height = cam.height;
    plan->tile = rs.tile;
    plan->tiles_x = (cam.width + rs.tile - 1) / rs.tile;
    plan->tiles_y = (cam.height + rs.tile - 1) / rs.tile;
    const std::size_t n_tiles = static_cast<std::size_t>(plan->tiles_x) * static_cast<std::size_t>(plan->tiles_y);
    plan->lists.assign(n_tiles, {});
    plan->contrib.assign(cam.pixels(), 0);
    plan->final_t.assign(cam.pixels(), 1.0);

    std::vector<std::uint32_t> order;
    for (std::size_t i = 0; i < n; ++i)
        if (proj(i, kSigma) > 0.0) order.push_back(static_cast<std::uint32_t>(i));
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return proj(a, kDepth) < proj(b, kDepth); });
    for (std::uint32_t k : order) {
        const double r = rs.extent_sigma * proj(k, kSigma);
        int x0 = 0, x1 = plan->tiles_x - 1, y0 = 0, y1 = plan->tiles_y - 1;
        if (std::isfinite(r)) {
            const double u = proj(k, kU), v = proj(k, kV);
            if (u + r < 0 || v + r < 0 || u - r > cam.width || v - r > cam.height) continue;
            x0 = std::max(0, static_cast<int>(std::floor((u - r) / rs.tile)));
            x1 = std::min(plan->tiles_x - 1, static_cast<int>(std::floor((u + r) / rs.tile)));
            y0 = std::max(0, static_cast<int>(std::floor((v - r) / rs.tile)));
            y1 = std::min(plan->tiles_y - 1, static_cast<int>(std::floor((v + r) / rs.tile)));
        }
        for (int ty = y0; ty <= y1; ++ty)
            for (int tx = x0; tx <= x1; ++tx) plan->lists[static_cast<std::size_t>(ty * plan->tiles_x + tx)].push_back(k);
    }

    Tensor out(cam.pixels(), kRawCols);
    parallel_for(rs.threads, n_tiles, [&](std::size_t tile_id) {
        const auto& list = plan->lists[tile_id];
        const int tx = static_cast<int>(tile_id) % plan->tiles_x, ty = static_cast<int>(tile_id) / plan->tiles_x;
        for (int py = ty * rs.tile; py < std::min(cam.height, (ty + 1) * rs.tile); ++py)
            for (int px = tx * rs.tile; px < std::min(cam.width, (tx + 1) * rs.tile); ++px) {
                const std::size_t pix = static_cast<std::size_t>(py) * cam.width + px;
                double T = 1.0;
                double acc[kRawCols] = {0, 0, 0, 0, 0, 0, 0, 0};
                std::uint32_t visited = 0;
                for (std::uint32_t e = 0; e < list.size(); ++e) {
                    const std::uint32_t k = list[e];
                    const Contribution c = evaluate(proj, op, k, px + 0.5, py + 0.5, rs);
                    if (!c.used) continue;
                    const double next_t = T * (1.0 - c.alpha);
                    if (next_t < rs.min_transmittance) break;
                    const double w = c.alpha * T;
                    acc[0] += w * col(k, 0);
                    acc[1] += w * col(k, 1);
                    acc[2] += w * col(k, 2);
                    acc[3] += w;
                    acc[4] += w * proj(k, kDepth);
                    acc[5] += w * proj(k, kNx);
                    acc[6] += w * proj(k, kNy);
                    acc[7] += w * proj(k, kNz);
                    T = next_t;
                    visited = e + 1;
                }
                plan->contrib[pix] = visited;
                plan->final_t[pix] = T;
                for (int ch = 0; ch < 3; ++ch) acc[ch] += T * bg[ch];
                for (std::size_t ch = 0; ch < kRawCols; ++ch) out(pix, ch) = acc[ch];
            }
    });

    const std::size_t ip = proj_v.id(), io = op_v.id(), ic = col_v.id();
    const RenderSettings rs_copy = rs;
    const Vec3 bg_copy = bg;
    return proj_v.tape().record(std::move(out), {proj_v, op_v, col_v}, [=](ad::Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& proj = t.value(ip);
        const Tensor& op = t.value(io);
        const Tensor& col = t.value(ic);
        const RasterPlan& pl = *plan;
        const std::size_t n_tiles = pl.lists.size();
        // per tile, per list entry: proj grads (9), opacity, color (3)
        constexpr std::size_t kG = 13;
        std::vector<std::vector<double>> partial(n_tiles);
        parallel_for(rs_copy.threads, n_tiles, [&](std::size_t tile_id) {
            const auto& list = pl.lists[tile_id];
            auto& buf = partial[tile_id];
            buf.assign(list.size() * kG, 0.0);
            const int tx = static_cast<int>(tile_id) % pl.tiles_x, ty = static_cast<int>(tile_id) / pl.tiles_x;
            for (int py = ty * pl.tile; py < std::min(pl.height, (ty + 1) * pl.tile); ++py)
                for (int px = tx * pl.tile; px < std::min(pl.width, (tx + 1) * pl.tile); ++px) {
                    const std::size_t pix = static_cast<std::size_t>(py) * pl.width + px;
                    double gp[kRawCols];
                    bool any = false;
                    for (std::size_t ch = 0; ch < kRawCols; ++ch) {
                        gp[ch] = g(pix, ch);
                        any = any || gp[ch] != 0.0;
                    }
                    if (!any) continue;
                    double T = pl.final_t[pix];
                    // suffix: sum over later contributions of w * value, plus background
                    double suffix = T * (gp[0] * bg_copy[0] + gp[1] * bg_copy[1] + gp[2] * bg_copy[2]);
                    for (std::uint32_t e = pl.contrib[pix]; e-- > 0;) {
                        const std::uint32_t k = list[e];
                        const Contribution c = evaluate(proj, op, k, px + 0.5, py + 0.5, rs_copy);
                        if (!c.used) continue;
                        T /= (1.0 - c.alpha);
                        const double value = gp[0] * col(k, 0) + gp[1] * col(k, 1) + gp[2] * col(k, 2) + gp[3] +
                                             gp[4] * proj(k, kDepth) + gp[5] * proj(k, kNx) + gp[6] * proj(k, kNy) +
                                             gp[7] * proj(k, kNz);
                        const double w = c.alpha * T;
                        const double d_alpha = T * value - suffix / (1.0 - c.alpha);
                        suffix += w * value;
                        double* b = &buf[e * kG];
                        // values carried by the primitive
                        b[kDepth] += w * gp[4];
                        b[kNx] += w * gp[5];
                        b[kNy] += w * gp[6];
                        b[kNz] += w * gp[7];
                        b[10] += w * gp[0];
                        b[11] += w * gp[1];
                        b[12] += w * gp[2];
                        if (c.clamped) continue;
                        b[9] += d_alpha * c.gauss;
                        const double d_power = d_alpha * c.alpha;
                        const double A = proj(k, kConicA), B = proj(k, kConicB), C = proj(k, kConicC);
                        b[kU] += d_power * (A * c.dx + B * c.dy);
                        b[kV] += d_power * (B * c.dx + C * c.dy);
                        b[kConicA] += d_power * (-0.5 * c.dx * c.dx);
                        b[kConicB] += d_power * (-c.dx * c.dy);
                        b[kConicC] += d_power * (-0.5 * c.dy * c.dy);
                    }
                }
        });
        Tensor* gproj = t.requires_grad(ip) ? &t.grad_buffer(ip) : nullptr;
        Tensor* gop = t.requires_grad(io) ? &t.grad_buffer(io) : nullptr;
        Tensor* gcol = t.requires_grad(ic) ? &t.grad_buffer(ic) : nullptr;
        for (std::size_t tile_id = 0; tile_id < n_tiles; ++tile_id) {
            const auto& list = pl.lists[tile_id];
            const auto& buf = partial[tile_id];
            for (std::size_t e = 0; e < list.size(); ++e) {
                const std::uint32_t k = list[e];
                const double* b = &buf[e * kG];
                if (gproj)
                    for (std::size_t ch = 0; ch < 9; ++ch) (*gproj)(k, ch) += b[ch];
                if (gop) (*gop)[k] += b[9];
                if (gcol)
                    for (int ch = 0; ch < 3; ++ch) (*gcol)(k, ch) += b[10 + ch];
            }
        }
    });
}

// ---------------------------------------------------------------------------

Layer render_layer(const gs::GaussianVars& g, const Camera& cam, const RenderSettings& rs,
                   const Eigen::Vector3d& background) {
    Layer out;
    out.proj = project(g.mu, g.log_scale, g.rotation, cam, rs);
    const ad::Var raw =
        rasterize_raw(out.proj, ad::sigmoid(g.opacity_logit), ad::sigmoid(g.color_logit), cam, rs, background);
    out.color = ad::slice_cols(raw, 0, 3);
    out.alpha = ad::slice_cols(raw, 3, 1);
    out.depth_sum = ad::slice_cols(raw, 4, 1);
    out.normal_sum = ad::slice_cols(raw, 5, 3);
    return out;
}

Layer composite(const Layer& face, const Layer& mouth) {
    if (face.color.rows() != mouth.color.rows()) throw UsageError("composite: face and mouth sizes differ");
    const ad::Var through = ad::add_scalar(ad::neg(face.alpha), 1.0);
    Layer out;
    out.color = ad::add(face.color, ad::mul_col(mouth.color, through));
    out.alpha = ad::add(face.alpha, ad::mul(mouth.alpha, through));
    out.depth_sum = ad::add(face.depth_sum, ad::mul(mouth.depth_sum, through));
    out.normal_sum = ad::add(face.normal_sum, ad::mul_col(mouth.normal_sum, through));
    return out;
}

Frame finish(const Layer& layer, double eps) {
    return {layer.color, layer.alpha, ad::div_clamped(layer.depth_sum, layer.alpha, eps),
            ad::normalize_rows(layer.normal_sum, 1e-12)};
}

Frame render_frame(const gs::GaussianVars& g, const Camera& cam, const RenderSettings& rs,
             const Eigen::Vector3d& background) {
    return finish(render_layer(g, cam, rs, background), rs.depth_eps);
}

Image to_image(const Frame& f, const Camera& cam) {
    return {cam.width, cam.height, f.color.value(), f.alpha.value(), f.depth.value(), f.normal.value()};
}

Tensor screen_gradient(const Layer& layer) {
    const Tensor& grad = layer.proj.tape().grad(layer.proj);
    const std::size_t n = layer.proj.rows();
    Tensor out(n, 2);
    if (grad.empty()) return out;
    for (std::size_t i = 0; i < n; ++i) {
        out(i, 0) = grad(i, kU);
        out(i, 1) = grad(i, kV);
    }
    return out;
}

Tensor visible_mask(const Layer& layer) {
    const Tensor& p = layer.proj.value();
    Tensor out(p.rows, 1);
    for (std::size_t i = 0; i < p.rows; ++i) out[i] = p(i, kSigma) > 0.0 ? 1.0 : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// files

void write_ppm(const std::filesystem::path& path, const Tensor& rgb, int width, int height) {
    if (rgb.rows != static_cast<std::size_t>(width) * height || rgb.cols != 3)
        throw UsageError("write_ppm: image shape does not match size");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f << "P6\n" << width << " " << height << "\n255\n";
    std::vector<unsigned char> bytes(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i)
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(rgb[i], 0.0, 1.0) * 255.0));
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for '" + path.string() + "'");
}

Tensor read_ppm(const std::filesystem::path& path, int& width, int& height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    std::string magic;
    int maxval = 0;
    f >> magic >> width >> height >> maxval;
    f.get();
    if (magic != "P6" || maxval != 255 || width <= 0 || height <= 0)
        throw IoError("'" + path.string() + "' is not an 8-bit binary PPM");
    std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height * 3);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("'" + path.string() + "' is truncated");
    Tensor out(static_cast<std::size_t>(width) * height, 3);
    for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = bytes[i] / 255.0;
    return out;
}

namespace {

void put_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

}  // namespace

void write_raster(const std::filesystem::path& path, const Tensor& data, int width, int height) {
    if (data.rows != static_cast<std::size_t>(width) * height) throw UsageError("write_raster: shape mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f.write("ITRF", 4);
    put_u32(f, static_cast<std::uint32_t>(width));
    put_u32(f, static_cast<std::uint32_t>(height));
    put_u32(f, static_cast<std::uint32_t>(data.cols));
    for (double v : data.data) {
        const float x = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &x, 4);
        put_u32(f, bits);
    }
    if (!f) throw IoError("write failed for '" + path.string() + "'");
}

Tensor read_raster(const std::filesystem::path& path, int& width, int& height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "ITRF", 4) != 0)
        throw IoError("'" + path.string() + "' is not a raster file");
    width = static_cast<int>(get_u32(&bytes[4]));
    height = static_cast<int>(get_u32(&bytes[8]));
    const std::size_t ch = get_u32(&bytes[12]);
    const std::size_t count = static_cast<std::size_t>(width) * height * ch;
    if (bytes.size() != 16 + 4 * count) throw IoError("'" + path.string() + "' has the wrong payload size");
    Tensor out(static_cast<std::size_t>(width) * height, ch);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = get_u32(&bytes[16 + 4 * i]);
        float x;
        std::memcpy(&x, &bits, 4);
        out[i] = x;
    }
    return out;
}

double psnr(const Tensor& a, const Tensor& b, double cap) {
    if (!a.same_shape(b)) throw UsageError("psnr: shape mismatch");
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
    const double mse = se / static_cast<double>(a.size());
    if (mse <= 0.0) return cap;
    return std::min(cap, -10.0 * std::log10(mse));
}

}  // namespace instag::render
