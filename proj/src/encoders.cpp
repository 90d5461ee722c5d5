// SPDX-License-Identifier: Apache-2.0
#include "instag/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "instag/errors.hpp"

namespace instag::enc {

std::vector<int> HashGridConfig::resolutions() const {
    validate();
    std::vector<int> res(static_cast<std::size_t>(levels));
    const double b = levels > 1 ? std::exp((std::log(n_max) - std::log(n_min)) / (levels - 1)) : 1.0;
    for (int l = 0; l < levels; ++l) {
        // The small bias keeps exact powers from rounding down.
        res[static_cast<std::size_t>(l)] = static_cast<int>(std::floor(n_min * std::pow(b, l) + 1e-9));
        if (l > 0 && res[static_cast<std::size_t>(l)] <= res[static_cast<std::size_t>(l - 1)])
            throw ConfigError("hash grid resolutions are not strictly increasing");
    }
    return res;
}

void HashGridConfig::validate() const {
    if (levels < 1 || features < 1 || table_size < 4) throw ConfigError("hash grid needs levels, features and a table");
    if (!(n_min >= 1.0) || !(n_max >= n_min)) throw ConfigError("hash grid resolution range is invalid");
}

std::size_t hash_index(std::int64_t x, std::int64_t y, int resolution, std::size_t table_size) {
    const auto side = static_cast<std::size_t>(resolution) + 1;
    if (side * side <= table_size) return static_cast<std::size_t>(y) * side + static_cast<std::size_t>(x);
    const std::uint32_t h = static_cast<std::uint32_t>(x) ^ (static_cast<std::uint32_t>(y) * 2654435761u);
    return h % table_size;
}

namespace {

struct Corner {
    std::size_t slot[4];
    double w[4];
    double dwdx[4], dwdy[4];  // derivative of each weight w.r.t. the scaled coordinate
};

inline void corners(double u, double v, int res, std::size_t T, Corner& c) {
    const double x = std::clamp(u, 0.0, 1.0) * res, y = std::clamp(v, 0.0, 1.0) * res;
    const int cx = std::min(static_cast<int>(std::floor(x)), res - 1);
    const int cy = std::min(static_cast<int>(std::floor(y)), res - 1);
    const double fx = x - cx, fy = y - cy;
    for (int k = 0; k < 4; ++k) {
        const int dx = k & 1, dy = k >> 1;
        c.slot[k] = hash_index(cx + dx, cy + dy, res, T);
        const double wx = dx ? fx : 1.0 - fx, wy = dy ? fy : 1.0 - fy;
        c.w[k] = wx * wy;
        c.dwdx[k] = (dx ? 1.0 : -1.0) * wy;
        c.dwdy[k] = (dy ? 1.0 : -1.0) * wx;
    }
}

}  // namespace

ad::Var hash_grid_2d(ad::Var uv_v, ad::Var table_v, const HashGridConfig& cfg) {
    const Tensor& uv = uv_v.value();
    const Tensor& table = table_v.value();
    const std::vector<int> res = cfg.resolutions();
    const std::size_t F = static_cast<std::size_t>(cfg.features), T = cfg.table_size;
    if (uv.cols != 2) throw UsageError("hash_grid_2d: coordinates must be N x 2");
    if (table.rows != static_cast<std::size_t>(cfg.levels) * T || table.cols != F)
        throw UsageError("hash_grid_2d: table shape does not match the configuration");
    const std::size_t n = uv.rows;
    Tensor out(n, cfg.output_dim());
    Corner c;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < res.size(); ++l) {
            corners(uv(i, 0), uv(i, 1), res[l], T, c);
            const std::size_t base = l * T;
            for (int k = 0; k < 4; ++k)
                for (std::size_t f = 0; f < F; ++f) out(i, l * F + f) += c.w[k] * table(base + c.slot[k], f);
        }
    const std::size_t iu = uv_v.id(), it = table_v.id();
    return uv_v.tape().record(std::move(out), {uv_v, table_v}, [=](ad::Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& uv = t.value(iu);
        const Tensor& table = t.value(it);
        Tensor* gu = t.requires_grad(iu) ? &t.grad_buffer(iu) : nullptr;
        Tensor* gt = t.requires_grad(it) ? &t.grad_buffer(it) : nullptr;
        Corner c;
        for (std::size_t i = 0; i < uv.rows; ++i) {
            const bool free_u = uv(i, 0) > 0.0 && uv(i, 0) < 1.0, free_v = uv(i, 1) > 0.0 && uv(i, 1) < 1.0;
            for (std::size_t l = 0; l < res.size(); ++l) {
                corners(uv(i, 0), uv(i, 1), res[l], T, c);
                const std::size_t base = l * T;
                double du = 0.0, dv = 0.0;
                for (int k = 0; k < 4; ++k)
                    for (std::size_t f = 0; f < F; ++f) {
                        const double gf = g(i, l * F + f);
                        if (gt) (*gt)(base + c.slot[k], f) += c.w[k] * gf;
                        const double e = table(base + c.slot[k], f) * gf;
                        du += c.dwdx[k] * e;
                        dv += c.dwdy[k] * e;
                    }
                if (gu) {
                    if (free_u) (*gu)(i, 0) += du * res[l];
                    if (free_v) (*gu)(i, 1) += dv * res[l];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------

TriPlane::TriPlane(std::string prefix, HashGridConfig cfg) : prefix_(std::move(prefix)), cfg_(cfg) {
    const std::size_t count = cfg_.param_count();
    if (count != static_cast<std::size_t>(cfg_.levels) * cfg_.table_size * static_cast<std::size_t>(cfg_.features))
        throw ConfigError("tri-plane parameter count mismatch");
    cfg_.resolutions();
}

std::string TriPlane::plane_name(int plane) const {
    static const char* names[] = {"xy", "yz", "xz"};
    return prefix_ + "/plane_" + names[plane];
}

void TriPlane::register_params(ParameterStore& store, std::uint64_t seed, double init_range) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-init_range, init_range);
    for (int p = 0; p < 3; ++p) {
        Tensor t(static_cast<std::size_t>(cfg_.levels) * cfg_.table_size, static_cast<std::size_t>(cfg_.features));
        for (double& v : t.data) v = u(rng);
        store.add(plane_name(p), std::move(t), ParamGroup::Grid);
    }
    std::size_t total = 0;
    for (int p = 0; p < 3; ++p) total += store.at(plane_name(p)).value.size();
    if (total != param_count()) throw ConfigError("tri-plane registered an unexpected parameter count");
}

ad::Var TriPlane::encode(ad::Tape& tape, ParameterStore& store, ad::Var mu) const {
    if (mu.cols() != 3) throw UsageError("tri-plane input must be N x 3");
    const ad::Var unit = ad::add_scalar(ad::scale(mu, 0.5), 0.5);
    const ad::Var x = ad::slice_cols(unit, 0, 1), y = ad::slice_cols(unit, 1, 1), z = ad::slice_cols(unit, 2, 1);
    const ad::Var planes[3] = {ad::concat_cols({x, y}), ad::concat_cols({y, z}), ad::concat_cols({x, z})};
    std::vector<ad::Var> parts;
    for (int p = 0; p < 3; ++p) parts.push_back(hash_grid_2d(planes[p], tape.parameter(store, plane_name(p)), cfg_));
    return ad::concat_cols(parts);
}

// ---------------------------------------------------------------------------

Mlp::Mlp(std::string prefix, std::vector<std::size_t> dims, bool zero_last)
    : prefix_(std::move(prefix)), dims_(std::move(dims)), zero_last_(zero_last) {
    if (dims_.size() < 2) throw ConfigError("an MLP needs input and output sizes");
    for (std::size_t d : dims_)
        if (d == 0) throw ConfigError("MLP layer sizes must be positive");
}

std::string Mlp::weight_name(std::size_t layer) const { return prefix_ + "/w" + std::to_string(layer); }
std::string Mlp::bias_name(std::size_t layer) const { return prefix_ + "/b" + std::to_string(layer); }

void Mlp::register_params(ParameterStore& store, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
        Tensor w(dims_[l], dims_[l + 1]);
        if (!(zero_last_ && l + 2 == dims_.size())) {
            const double bound = std::sqrt(6.0 / static_cast<double>(dims_[l]));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (double& v : w.data) v = u(rng);
        }
        store.add(weight_name(l), std::move(w), ParamGroup::Network);
        store.add(bias_name(l), Tensor(1, dims_[l + 1]), ParamGroup::Network);
    }
}

ad::Var Mlp::forward(ad::Tape& tape, ParameterStore& store, ad::Var x) const {
    if (x.cols() != dims_.front())
        throw UsageError("MLP '" + prefix_ + "' expects " + std::to_string(dims_.front()) + " inputs, got " +
                         std::to_string(x.cols()));
    ad::Var h = x;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
        h = ad::linear(h, tape.parameter(store, weight_name(l)), tape.parameter(store, bias_name(l)));
        if (l + 2 < dims_.size()) h = ad::relu(h);
    }
    return h;
}

// ---------------------------------------------------------------------------

RegionAttention::RegionAttention(std::string prefix, std::size_t spatial_dim, std::size_t cond_dim, std::size_t hidden)
    : mlp_(std::move(prefix), {spatial_dim, hidden, cond_dim}, true) {}

ad::Var RegionAttention::gate(ad::Tape& tape, ParameterStore& store, ad::Var spatial) const {
    return ad::sigmoid(mlp_.forward(tape, store, spatial));
}

ad::Var RegionAttention::attend(ad::Tape& tape, ParameterStore& store, ad::Var spatial, ad::Var cond) const {
    if (cond.cols() != cond_dim())
        throw UsageError("region attention expects " + std::to_string(cond_dim()) + " condition channels, got " +
                         std::to_string(cond.cols()));
    const std::size_t n = spatial.rows();
    if (cond.rows() != 1 && cond.rows() != n) throw UsageError("region attention condition rows must be 1 or N");
    const ad::Var c = cond.rows() == n ? cond : ad::repeat_rows(cond, n);
    return ad::mul(c, gate(tape, store, spatial));
}

}  // namespace instag::enc
