// SPDX-License-Identifier: Apache-2.0
#include "instag/optimizer.hpp"

#include <cmath>

#include "instag/errors.hpp"

namespace instag {

Moments& AdamW::moments(std::string_view name) {
    auto it = moments_.find(name);
    if (it == moments_.end()) throw UsageError("no optimizer moments for '" + std::string(name) + "'");
    return it->second;
}

void AdamW::step(ParameterStore& store, const LrMap& lr) {
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (Parameter* p : store.all()) {
        if (!p->trainable) continue;
        if (!p->grad.same_shape(p->value))
            throw UsageError("adamw: gradient buffer of '" + p->name + "' does not match its parameter");
        auto lr_it = lr.find(p->group);
        if (lr_it == lr.end())
            throw UsageError("adamw: no learning rate for group '" + std::string(group_name(p->group)) + "'");
        const double rate = lr_it->second * p->lr_scale;
        auto wd_it = cfg_.weight_decay.find(p->group);
        const double wd = wd_it == cfg_.weight_decay.end() ? 0.0 : wd_it->second;

        auto it = moments_.find(p->name);
        if (it == moments_.end())
            it = moments_.emplace(p->name, Moments{Tensor(p->value.rows, p->value.cols), Tensor(p->value.rows, p->value.cols)})
                     .first;
        Moments& mo = it->second;
        if (!mo.m.same_shape(p->value))
            throw UsageError("adamw: moment shape of '" + p->name + "' does not match its parameter");

        double* w = p->value.data.data();
        const double* g = p->grad.data.data();
        double* m = mo.m.data.data();
        double* v = mo.v.data.data();
        const double b1 = cfg_.beta1, b2 = cfg_.beta2, eps = cfg_.eps;
        const double decay = 1.0 - rate * wd;
        const std::size_t n = p->value.size();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] *= decay;
            w[i] -= rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
    store.round_to_storage();
    store.zero_grad();
}

void AdamW::remap_rows(std::string_view name, std::span<const std::int64_t> source, std::size_t cols) {
    auto it = moments_.find(name);
    if (it == moments_.end()) return;
    Moments fresh{Tensor(source.size(), cols), Tensor(source.size(), cols)};
    const Moments& old = it->second;
    for (std::size_t i = 0; i < source.size(); ++i) {
        if (source[i] < 0) continue;
        const auto r = static_cast<std::size_t>(source[i]);
        for (std::size_t j = 0; j < cols; ++j) {
            fresh.m(i, j) = old.m(r, j);
            fresh.v(i, j) = old.v(r, j);
        }
    }
    it->second = std::move(fresh);
}

void AdamW::forget(std::string_view name) {
    auto it = moments_.find(name);
    if (it != moments_.end()) moments_.erase(it);
}

}  // namespace instag
