// SPDX-License-Identifier: Apache-2.0
#include "instag/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "instag/errors.hpp"

namespace instag {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const LossFn& fn, const std::string& what) {
    ad::Tape tape(false);
    const double v = fn(tape).item();
    if (!std::isfinite(v)) throw NumericError("non-finite loss " + what);
    return v;
}

double central(const LossFn& fn, Parameter& p, std::size_t i, double eps) {
    const double orig = p.value[i];
    const std::string where = "while perturbing " + p.name + "[" + std::to_string(i) + "]";
    p.value[i] = orig + eps;
    const double fp = evaluate(fn, where);
    p.value[i] = orig - eps;
    const double fm = evaluate(fn, where);
    p.value[i] = orig;
    return (fp - fm) / (2.0 * eps);
}

}  // namespace

FiniteDiffResult finite_diff_check(const LossFn& loss_fn, ParameterStore& store, const FiniteDiffOptions& opts) {
    store.zero_grad();
    {
        ad::Tape tape;
        ad::Var loss = loss_fn(tape);
        if (!std::isfinite(loss.item())) throw NumericError("non-finite loss at the unperturbed point");
        tape.backward(loss);
    }

    std::vector<Parameter*> targets;
    for (Parameter* p : store.all()) {
        if (!p->trainable) continue;
        if (!opts.only.empty() && std::find(opts.only.begin(), opts.only.end(), p->name) == opts.only.end()) continue;
        targets.push_back(p);
    }
    // Analytic gradients are snapshotted before any perturbation.
    std::vector<Tensor> analytic;
    for (Parameter* p : targets) analytic.push_back(p->grad);
    store.zero_grad();

    std::mt19937_64 rng(opts.seed);
    FiniteDiffResult res;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        Parameter& p = *targets[k];
        const Tensor& g = analytic[k];
        const std::size_t n = p.value.size();
        if (n == 0) continue;
        std::vector<std::size_t> nonzero;
        for (std::size_t i = 0; i < n; ++i)
            if (g[i] != 0.0) nonzero.push_back(i);
        std::set<std::size_t> picks;
        const std::size_t want = std::min(opts.samples, n);
        std::uniform_int_distribution<std::size_t> any(0, n - 1);
        for (std::size_t s = 0; s < want / 2 && !nonzero.empty(); ++s)
            picks.insert(nonzero[std::uniform_int_distribution<std::size_t>(0, nonzero.size() - 1)(rng)]);
        for (std::size_t guard = 0; picks.size() < want && guard < 8 * want; ++guard) picks.insert(any(rng));

        for (std::size_t i : picks) {
            const double a = g[i] * opts.analytic_scale;
            double num = central(loss_fn, p, i, opts.eps);
            double err = relative_error(a, num);
            if (opts.refine && err > opts.tolerance) {
                ++res.refined;
                for (double e : {opts.eps * 1e-1, opts.eps * 1e-2, opts.eps * 10.0}) {
                    const double n2 = central(loss_fn, p, i, e);
                    const double e2 = relative_error(a, n2);
                    if (e2 < err) {
                        err = e2;
                        num = n2;
                    }
                }
            }
            ++res.checked;
            if (err >= res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_parameter = p.name;
                res.worst_index = i;
                res.worst_analytic = a;
                res.worst_numeric = num;
            }
        }
    }
    return res;
}

}  // namespace instag
