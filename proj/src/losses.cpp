// SPDX-License-Identifier: Apache-2.0
#include "instag/losses.hpp"

#include <array>
#include <cmath>
#include <memory>

#include "instag/errors.hpp"

namespace instag::loss {

void LossWeights::validate() const {
    if (lambda_c < 0 || lambda_d < 0 || lambda_n < 0) throw ConfigError("loss weights must be non-negative");
    if (lambda_ssim < 0 || lambda_ssim > 1) throw ConfigError("lambda_ssim must lie in [0, 1]");
}

namespace {

constexpr int kRadius = 5;

const std::array<double, 2 * kRadius + 1>& window() {
    static const auto w = [] {
        std::array<double, 2 * kRadius + 1> k{};
        double total = 0.0;
        for (int i = -kRadius; i <= kRadius; ++i) total += k[i + kRadius] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
        for (double& v : k) v /= total;
        return k;
    }();
    return w;
}

// Separable Gaussian filter of one W x H plane with zero padding. The kernel
// is symmetric, so this is also its own adjoint.
std::vector<double> blur(const std::vector<double>& in, int W, int H) {
    const auto& k = window();
    std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0.0;
            for (int d = -kRadius; d <= kRadius; ++d) {
                const int xx = x + d;
                if (xx >= 0 && xx < W) s += k[d + kRadius] * in[static_cast<std::size_t>(y) * W + xx];
            }
            tmp[static_cast<std::size_t>(y) * W + x] = s;
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0.0;
            for (int d = -kRadius; d <= kRadius; ++d) {
                const int yy = y + d;
                if (yy >= 0 && yy < H) s += k[d + kRadius] * tmp[static_cast<std::size_t>(yy) * W + x];
            }
            out[static_cast<std::size_t>(y) * W + x] = s;
        }
    return out;
}

struct SsimPlane {
    std::vector<double> mx, my, sxx, syy, sxy;
};

}  // namespace

ad::Var ssim(ad::Var a_v, ad::Var b_v, int W, int H) {
    const Tensor& a = a_v.value();
    const Tensor& b = b_v.value();
    if (!a.same_shape(b)) throw UsageError("ssim: image shapes differ");
    if (W <= 0 || H <= 0 || a.rows != static_cast<std::size_t>(W) * H) throw UsageError("ssim: image size mismatch");
    const std::size_t P = a.rows, C = a.cols;
    auto planes = std::make_shared<std::vector<SsimPlane>>(C);
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> x(P), y(P), xx(P), yy(P), xy(P);
        for (std::size_t p = 0; p < P; ++p) {
            x[p] = a(p, c);
            y[p] = b(p, c);
            xx[p] = x[p] * x[p];
            yy[p] = y[p] * y[p];
            xy[p] = x[p] * y[p];
        }
        SsimPlane& s = (*planes)[c];
        s.mx = blur(x, W, H);
        s.my = blur(y, W, H);
        s.sxx = blur(xx, W, H);
        s.syy = blur(yy, W, H);
        s.sxy = blur(xy, W, H);
        for (std::size_t p = 0; p < P; ++p) {
            const double mx = s.mx[p], my = s.my[p];
            const double a1 = 2 * mx * my + kSsimC1, a2 = 2 * (s.sxy[p] - mx * my) + kSsimC2;
            const double b1 = mx * mx + my * my + kSsimC1, b2 = (s.sxx[p] - mx * mx) + (s.syy[p] - my * my) + kSsimC2;
            total += (a1 * a2) / (b1 * b2);
        }
    }
    const double norm = 1.0 / static_cast<double>(P * C);
    const std::size_t ia = a_v.id(), ib = b_v.id();
    return a_v.tape().record(Tensor::scalar(total * norm), {a_v, b_v}, [=](ad::Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] * norm;
        const Tensor& a = t.value(ia);
        const Tensor& b = t.value(ib);
        const bool want_a = t.requires_grad(ia), want_b = t.requires_grad(ib);
        for (std::size_t c = 0; c < C; ++c) {
            const SsimPlane& s = (*planes)[c];
            std::vector<double> gmx(P), gmy(P), gsxx(P), gsyy(P), gsxy(P);
            for (std::size_t p = 0; p < P; ++p) {
                const double mx = s.mx[p], my = s.my[p];
                const double a1 = 2 * mx * my + kSsimC1, a2 = 2 * (s.sxy[p] - mx * my) + kSsimC2;
                const double b1 = mx * mx + my * my + kSsimC1,
                             b2 = (s.sxx[p] - mx * mx) + (s.syy[p] - my * my) + kSsimC2;
                const double den = b1 * b2, S = a1 * a2 / den;
                gmx[p] = g * ((2 * my * a2 - 2 * my * a1) / den - S * (2 * mx / b1 - 2 * mx / b2));
                gmy[p] = g * ((2 * mx * a2 - 2 * mx * a1) / den - S * (2 * my / b1 - 2 * my / b2));
                gsxx[p] = gsyy[p] = g * (-S / b2);
                gsxy[p] = g * (2 * a1 / den);
            }
            const auto bmx = blur(gmx, W, H), bmy = blur(gmy, W, H), bsxx = blur(gsxx, W, H),
                       bsyy = blur(gsyy, W, H), bsxy = blur(gsxy, W, H);
            if (want_a) {
                Tensor& ga = t.grad_buffer(ia);
                for (std::size_t p = 0; p < P; ++p) ga(p, c) += bmx[p] + 2 * a(p, c) * bsxx[p] + b(p, c) * bsxy[p];
            }
            if (want_b) {
                Tensor& gb = t.grad_buffer(ib);
                for (std::size_t p = 0; p < P; ++p) gb(p, c) += bmy[p] + 2 * b(p, c) * bsyy[p] + a(p, c) * bsxy[p];
            }
        }
    });
}

ad::Var photometric(ad::Var image, ad::Var target, int width, int height, double lambda_ssim) {
    if (!image.value().same_shape(target.value())) throw UsageError("photometric: image shapes differ");
    const ad::Var l1 = ad::mean(ad::abs(ad::sub(image, target)));
    if (lambda_ssim == 0.0) return l1;
    const ad::Var dssim = ad::scale(ad::add_scalar(ad::neg(ssim(image, target, width, height)), 1.0), 0.5);
    return ad::add(ad::scale(l1, 1.0 - lambda_ssim), ad::scale(dssim, lambda_ssim));
}

ad::Var negative_contrast(ad::Var a, ad::Var b) {
    if (!a.value().same_shape(b.value())) throw UsageError("negative_contrast: batch lengths differ");
    if (a.rows() == 0) throw UsageError("negative_contrast: empty batch");
    return ad::mean(ad::relu(ad::row_dot(a, b)));
}

ad::Var scale_invariant_depth(ad::Var depth, const Tensor& target, const Tensor& mask) {
    const Tensor& D = depth.value();
    if (D.cols != 1 || !D.same_shape(target) || !D.same_shape(mask))
        throw UsageError("scale_invariant_depth: expected matching P x 1 maps");
    std::vector<std::size_t> idx;
    for (std::size_t p = 0; p < D.rows; ++p)
        if (mask[p] > 0.5) idx.push_back(p);
    const double n = static_cast<double>(idx.size());
    if (idx.size() < 2) return depth.tape().constant(Tensor::scalar(0.0));

    const double t_mean = [&] {
        double s = 0;
        for (std::size_t p : idx) s += target[p];
        return s / n;
    }();
    double t_var = 0.0, t_scale = 0.0;
    for (std::size_t p : idx) {
        t_var += (target[p] - t_mean) * (target[p] - t_mean);
        t_scale = std::max(t_scale, std::abs(target[p]));
    }
    const bool degenerate = t_var <= 1e-20 * std::max(1.0, t_scale * t_scale) * n;
    if (degenerate) t_var = 0.0;
    std::vector<double> centered(idx.size(), 0.0);
    if (!degenerate)
        for (std::size_t k = 0; k < idx.size(); ++k) centered[k] = target[idx[k]] - t_mean;
    // Residual after removing the span of {1, target} (or {1} alone).
    auto project_out = [centered, n, t_var](const std::vector<double>& v) {
        double m = 0, c = 0;
        for (std::size_t k = 0; k < v.size(); ++k) {
            m += v[k];
            c += v[k] * centered[k];
        }
        m /= n;
        const double slope = t_var > 0 ? c / t_var : 0.0;
        std::vector<double> r(v.size());
        for (std::size_t k = 0; k < v.size(); ++k) r[k] = v[k] - m - slope * centered[k];
        return r;
    };
    std::vector<double> d(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) d[k] = D[idx[k]];
    const std::vector<double> r = project_out(d);
    double value = 0.0;
    for (double x : r) value += std::abs(x);
    value /= n;
    const std::size_t id = depth.id();
    return depth.tape().record(Tensor::scalar(value), {depth}, [=](ad::Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        std::vector<double> s(r.size());
        for (std::size_t k = 0; k < r.size(); ++k) s[k] = (r[k] > 0 ? 1.0 : (r[k] < 0 ? -1.0 : 0.0)) * g / n;
        const std::vector<double> gs = project_out(s);
        Tensor& gd = t.grad_buffer(id);
        for (std::size_t k = 0; k < idx.size(); ++k) gd[idx[k]] += gs[k];
    });
}

GeometryLoss geometry_loss(ad::Var depth, ad::Var normal, const GeometryTargets& tg, const LossWeights& w) {
    ad::Tape& tape = depth.tape();
    if (normal.cols() != 3 || normal.rows() != depth.rows() || !tg.normal.same_shape(normal.value()))
        throw UsageError("geometry_loss: normal maps must be P x 3");
    GeometryLoss out;
    double count = 0.0;
    for (double m : tg.mask.data) count += m > 0.5 ? 1.0 : 0.0;
    if (count < 2.0) {
        out.empty_mask = true;
        out.value = out.depth_term = out.normal_term = tape.constant(Tensor::scalar(0.0));
        return out;
    }
    Tensor mask01(tg.mask.rows, 1);
    for (std::size_t p = 0; p < mask01.rows; ++p) mask01[p] = tg.mask[p] > 0.5 ? 1.0 : 0.0;
    out.depth_term = scale_invariant_depth(depth, tg.depth, mask01);
    const ad::Var cosine = ad::row_dot(normal, tape.constant(tg.normal));
    const ad::Var miss = ad::mul(ad::add_scalar(ad::neg(cosine), 1.0), tape.constant(mask01));
    out.normal_term = ad::scale(ad::sum(miss), 1.0 / count);
    out.value = ad::add(ad::scale(out.depth_term, w.lambda_d), ad::scale(out.normal_term, w.lambda_n));
    return out;
}

ad::Var pretrain_loss(ad::Var photo, std::size_t i, std::span<const ad::Var> offsets, const LossWeights& w) {
    if (offsets.size() < 2) return photo;
    if (i >= offsets.size()) throw UsageError("pretrain_loss: identity index out of range");
    ad::Var total = photo;
    for (std::size_t j = 0; j < offsets.size(); ++j) {
        if (j == i) continue;
        total = ad::add(total, ad::scale(negative_contrast(offsets[i], offsets[j]), w.lambda_c));
    }
    return total;
}

ad::Var adaptation_loss(ad::Var photo, const GeometryLoss& geometry, Stage stage) {
    if (stage == Stage::Warmup || !geometry.value.valid()) return photo;
    return ad::add(photo, geometry.value);
}

}  // namespace instag::loss
