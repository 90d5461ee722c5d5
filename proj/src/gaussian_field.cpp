// SPDX-License-Identifier: Apache-2.0
#include "instag/gaussian_field.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "instag/errors.hpp"

namespace instag::gs {

namespace {

constexpr const char* kAttrs[] = {"mu", "log_scale", "rotation", "opacity", "color"};

double logit(double p) { return std::log(p / (1.0 - p)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor& attr(StructureField& f, int k) {
    switch (k) {
    case 0: return f.mu;
    case 1: return f.log_scale;
    case 2: return f.rotation;
    case 3: return f.opacity;
    default: return f.color;
    }
}

const Tensor& attr(const StructureField& f, int k) { return attr(const_cast<StructureField&>(f), k); }

}  // namespace

std::string_view branch_name(Branch b) { return b == Branch::Face ? "face" : "mouth"; }

GaussianPrimitive StructureField::primitive(std::size_t i) const {
    GaussianPrimitive g;
    g.mu = {mu(i, 0), mu(i, 1), mu(i, 2)};
    g.log_scale = {log_scale(i, 0), log_scale(i, 1), log_scale(i, 2)};
    g.rotation = {rotation(i, 0), rotation(i, 1), rotation(i, 2), rotation(i, 3)};
    g.opacity_logit = opacity[i];
    g.color_logit = {color(i, 0), color(i, 1), color(i, 2)};
    return g;
}

void StructureField::push_back(const GaussianPrimitive& g) {
    auto append = [](Tensor& t, std::initializer_list<double> vals) {
        t.data.insert(t.data.end(), vals);
        ++t.rows;
    };
    append(mu, {g.mu.x(), g.mu.y(), g.mu.z()});
    append(log_scale, {g.log_scale.x(), g.log_scale.y(), g.log_scale.z()});
    append(rotation, {g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]});
    append(opacity, {g.opacity_logit});
    append(color, {g.color_logit.x(), g.color_logit.y(), g.color_logit.z()});
}

StructureField StructureField::empty(Branch b) {
    StructureField f;
    f.branch = b;
    f.mu = Tensor(0, 3);
    f.log_scale = Tensor(0, 3);
    f.rotation = Tensor(0, 4);
    f.opacity = Tensor(0, 1);
    f.color = Tensor(0, 3);
    return f;
}

std::string field_param(std::string_view prefix, std::string_view a) {
    return std::string(prefix) + "/gaussians/" + std::string(a);
}

void register_field(ParameterStore& store, std::string_view prefix, const StructureField& field) {
    if (field.size() == 0) throw UsageError("cannot register an empty structure field");
    // Per-attribute step sizes relative to the gaussian group rate.
    const double lr_scale[] = {1.0, 5.0, 1.0, 50.0, 2.5};
    for (int k = 0; k < 5; ++k) store.add(field_param(prefix, kAttrs[k]), attr(field, k), ParamGroup::Gaussian, lr_scale[k]);
}

StructureField read_field(const ParameterStore& store, std::string_view prefix, Branch branch) {
    StructureField f;
    f.branch = branch;
    for (int k = 0; k < 5; ++k) attr(f, k) = store.at(field_param(prefix, kAttrs[k])).value;
    return f;
}

GaussianVars field_vars(ad::Tape& tape, ParameterStore& store, std::string_view prefix) {
    return {tape.parameter(store, field_param(prefix, "mu")), tape.parameter(store, field_param(prefix, "log_scale")),
            tape.parameter(store, field_param(prefix, "rotation")), tape.parameter(store, field_param(prefix, "opacity")),
            tape.parameter(store, field_param(prefix, "color"))};
}

GaussianVars field_constants(ad::Tape& tape, const StructureField& f) {
    return {tape.constant(f.mu), tape.constant(f.log_scale), tape.constant(f.rotation), tape.constant(f.opacity),
            tape.constant(f.color)};
}

GaussianVars apply_deformation(const GaussianVars& g, const DeformationVars& d) {
    const std::size_t n = g.size();
    if (!d.d_mu.valid() || d.d_mu.rows() != n || d.d_mu.cols() != 3)
        throw UsageError("apply_deformation: position offsets must be " + std::to_string(n) + "x3");
    GaussianVars out = g;
    out.mu = ad::add(g.mu, d.d_mu);
    if (d.d_log_scale.valid()) {
        if (d.d_log_scale.rows() != n) throw UsageError("apply_deformation: scale offset length mismatch");
        out.log_scale = ad::add(g.log_scale, d.d_log_scale);
    }
    if (d.d_rotation.valid()) {
        if (d.d_rotation.rows() != n) throw UsageError("apply_deformation: rotation offset length mismatch");
        out.rotation = ad::normalize_rows(ad::add(g.rotation, d.d_rotation));
    } else {
        out.rotation = ad::normalize_rows(g.rotation);
    }
    return out;
}

DeformationVars add_deformations(const DeformationVars& a, const DeformationVars& b) {
    auto sum = [](ad::Var x, ad::Var y) -> ad::Var {
        if (!x.valid()) return y;
        if (!y.valid()) return x;
        return ad::add(x, y);
    };
    return {sum(a.d_mu, b.d_mu), sum(a.d_log_scale, b.d_log_scale), sum(a.d_rotation, b.d_rotation)};
}

Eigen::Matrix3d rotation_matrix(const Eigen::Vector4d& q_in) {
    const Eigen::Vector4d q = q_in.normalized();
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Eigen::Matrix3d R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return R;
}

Eigen::Matrix3d covariance(const Eigen::Vector3d& log_scale, const Eigen::Vector4d& q) {
    const Eigen::Matrix3d M = rotation_matrix(q) * log_scale.array().exp().matrix().asDiagonal();
    return M * M.transpose();
}

int flattest_axis(const Eigen::Vector3d& s) {
    int best = 2;
    for (int k : {1, 0})
        if (s[k] < s[best]) best = k;
    return best;
}

Eigen::Vector3d primitive_normal(const Eigen::Vector3d& log_scale, const Eigen::Vector4d& q) {
    return rotation_matrix(q).col(flattest_axis(log_scale));
}

double mean_nearest_neighbor_distance(const Tensor& p) {
    const std::size_t n = p.rows;
    if (n < 2) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double dx = p(i, 0) - p(j, 0), dy = p(i, 1) - p(j, 1), dz = p(i, 2) - p(j, 2);
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        total += std::sqrt(best);
    }
    return total / static_cast<double>(n);
}

StructureField random_init(std::size_t n, const Box& b, std::uint64_t seed, Branch branch) {
    if (n == 0) throw UsageError("random_init needs at least one primitive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    StructureField f = StructureField::empty(branch);
    Tensor pts(n, 3);
    for (std::size_t i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) pts(i, k) = b.lo[k] + (b.hi[k] - b.lo[k]) * u(rng);
    double extent = mean_nearest_neighbor_distance(pts);
    if (n < 2) extent = 0.1 * (b.hi - b.lo).minCoeff();
    const double ls = std::log(std::max(extent, 1e-6));
    for (std::size_t i = 0; i < n; ++i) {
        GaussianPrimitive g;
        g.mu = {pts(i, 0), pts(i, 1), pts(i, 2)};
        g.log_scale = Eigen::Vector3d::Constant(ls);
        g.opacity_logit = logit(0.1);
        for (int k = 0; k < 3; ++k) g.color_logit[k] = logit(std::clamp(u(rng), 0.02, 0.98));
        f.push_back(g);
    }
    return f;
}

// ---------------------------------------------------------------------------

void DensifyStats::reset(std::size_t n) {
    grad_accum = Tensor(n, 1);
    count = Tensor(n, 1);
}

void DensifyStats::accumulate(const Tensor& g, const Tensor& visible, int width, int height) {
    if (grad_accum.rows != g.rows) reset(g.rows);
    for (std::size_t i = 0; i < g.rows; ++i) {
        if (visible[i] <= 0.0) continue;
        const double gx = g(i, 0) * 0.5 * width, gy = g(i, 1) * 0.5 * height;
        grad_accum[i] += std::sqrt(gx * gx + gy * gy);
        count[i] += 1.0;
    }
}

DensifyReport densify_and_prune(ParameterStore& store, AdamW& opt, std::string_view prefix, DensifyStats& stats,
                                const DensifyThresholds& th, std::uint64_t seed) {
    const StructureField f = read_field(store, prefix, Branch::Face);
    const std::size_t n = f.size();
    if (stats.grad_accum.rows != n) stats.reset(n);
    DensifyReport rep;

    std::vector<std::size_t> hot;
    for (std::size_t i = 0; i < n; ++i)
        if (stats.count[i] > 0 && stats.grad_accum[i] / stats.count[i] >= th.grad) hot.push_back(i);
    std::stable_sort(hot.begin(), hot.end(), [&](std::size_t a, std::size_t b) {
        return stats.grad_accum[a] / stats.count[a] > stats.grad_accum[b] / stats.count[b];
    });

    std::vector<char> split_parent(n, 0);
    std::vector<GaussianPrimitive> added;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::size_t budget = th.max_count > n ? th.max_count - n : 0;
    for (std::size_t i : hot) {
        const GaussianPrimitive g = f.primitive(i);
        const double max_scale = g.log_scale.array().exp().maxCoeff();
        if (max_scale <= th.dense_extent) {
            if (budget < 1) break;
            added.push_back(g);
            ++rep.cloned;
            --budget;
        } else {
            if (budget < 1) break;
            const Eigen::Matrix3d R = rotation_matrix(g.rotation);
            const Eigen::Vector3d sd = g.log_scale.array().exp();
            for (int c = 0; c < 2; ++c) {
                GaussianPrimitive child = g;
                const Eigen::Vector3d z{normal(rng), normal(rng), normal(rng)};
                child.mu = g.mu + R * sd.cwiseProduct(z);
                child.log_scale = g.log_scale.array() - std::log(th.split_factor);
                added.push_back(child);
            }
            split_parent[i] = 1;
            ++rep.split;
            --budget;
        }
    }

    // Candidate rows: survivors of the split pass, then new primitives.
    struct Row {
        GaussianPrimitive g;
        std::int64_t source;
    };
    std::vector<Row> rows;
    for (std::size_t i = 0; i < n; ++i)
        if (!split_parent[i]) rows.push_back({f.primitive(i), static_cast<std::int64_t>(i)});
    for (const auto& g : added) rows.push_back({g, -1});

    std::vector<std::size_t> low;
    for (std::size_t r = 0; r < rows.size(); ++r)
        if (sigmoid(rows[r].g.opacity_logit) < th.prune_opacity) low.push_back(r);
    std::vector<char> drop(rows.size(), 0);
    if (!low.empty() && low.size() >= rows.size()) {
        rep.refused_prune_all = true;
    } else {
        std::stable_sort(low.begin(), low.end(),
                         [&](std::size_t a, std::size_t b) { return rows[a].g.opacity_logit < rows[b].g.opacity_logit; });
        const std::size_t floor = std::max<std::size_t>(th.min_count, 1);
        std::size_t allowed = rows.size() > floor ? rows.size() - floor : 0;
        for (std::size_t r : low) {
            if (allowed == 0) break;
            drop[r] = 1;
            --allowed;
            ++rep.pruned;
        }
    }

    StructureField out = StructureField::empty(f.branch);
    std::vector<std::int64_t> source;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (drop[r]) continue;
        if (!rows[r].g.mu.allFinite() || !rows[r].g.log_scale.allFinite())
            throw NumericError("density control produced a non-finite primitive under '" + std::string(prefix) + "'");
        out.push_back(rows[r].g);
        source.push_back(rows[r].source);
    }
    rep.final_count = out.size();
    if (rep.cloned + rep.split + rep.pruned == 0) {
        stats.reset(n);
        return rep;
    }
    for (int k = 0; k < 5; ++k) {
        const std::string name = field_param(prefix, kAttrs[k]);
        const Tensor& t = attr(out, k);
        store.resize_rows(name, t);
        opt.remap_rows(name, source, t.cols);
    }
    stats.reset(out.size());
    return rep;
}

}  // namespace instag::gs
