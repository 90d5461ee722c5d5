// SPDX-License-Identifier: Apache-2.0
#include "instag/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "instag/errors.hpp"

namespace instag::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_mat(const Tensor& t) { return ConstMapMat(t.data.data(), Eigen::Index(t.rows), Eigen::Index(t.cols)); }
MapMat as_mat(Tensor& t) { return MapMat(t.data.data(), Eigen::Index(t.rows), Eigen::Index(t.cols)); }

void require_same_tape(Var a, Var b) {
    if (&a.tape() != &b.tape()) throw UsageError("operands recorded on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw UsageError(std::string(op) + ": shape mismatch " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                         " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
}

template <typename F>
Var unary(Var a, F&& f, Tape::BackwardFn bw) {
    const Tensor& x = a.value();
    Tensor out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return a.tape().record(std::move(out), {a}, std::move(bw));
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }

double Var::item() const {
    const Tensor& v = value();
    if (v.size() != 1) throw UsageError("item() on a non-scalar");
    return v[0];
}

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor v) {
    Node n;
    n.owned = std::move(v);
    return push(std::move(n));
}

Var Tape::constant_view(const Tensor& v) {
    Node n;
    n.borrowed = &v;
    return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
    Node n;
    n.borrowed = &p.value;
    if (record_grad_ && p.trainable) {
        n.sink = &p.grad;
        n.requires_grad = true;
    }
    return push(std::move(n));
}

Var Tape::parameter(ParameterStore& store, std::string_view name) { return parameter(store.at(name)); }

Var Tape::variable(Tensor v) {
    Node n;
    n.owned = std::move(v);
    n.requires_grad = record_grad_;
    return push(std::move(n));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    if (consumed_) throw UsageError("recording on a consumed tape");
    Node n;
    n.owned = std::move(value);
    if (record_grad_) {
        for (const Var& v : inputs) {
            if (&v.tape() != this) throw UsageError("operand recorded on a different tape");
            if (nodes_[v.id()].requires_grad) n.requires_grad = true;
        }
        if (n.requires_grad) n.backward = std::move(fn);
    }
    return push(std::move(n));
}

const Tensor& Tape::value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.owned;
}

const Tensor& Tape::grad(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.sink ? *n.sink : n.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.sink) return *n.sink;
    if (n.grad.empty()) {
        const Tensor& v = value(id);
        n.grad = Tensor(v.rows, v.cols);
    }
    return n.grad;
}

void Tape::backward(Var loss) {
    if (consumed_) throw UsageError("backward called twice on the same tape");
    if (&loss.tape() != this) throw UsageError("loss was not recorded on this tape");
    if (loss.value().size() != 1) throw UsageError("backward requires a scalar loss");
    consumed_ = true;
    if (!record_grad_ || !nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())[0] += 1.0;
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
        Node& n = nodes_[k];
        if (!n.requires_grad || !n.backward) continue;
        if (n.grad.empty()) continue;
        n.backward(*this, k);
    }
}

// ---------------------------------------------------------------------------
// elementwise

Var add(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    out.add_(b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad_buffer(ia).add_(g);
        if (t.requires_grad(ib)) t.grad_buffer(ib).add_(g);
    });
}

Var sub(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    out.add_scaled_(b.value(), -1.0);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad_buffer(ia).add_(g);
        if (t.requires_grad(ib)) t.grad_buffer(ib).add_scaled_(g, -1.0);
    });
}

Var mul(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Tensor out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(ib);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        }
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
        }
    });
}

Var scale(Var a, double s) {
    return unary(a, [s](double v) { return v * s; }, [ia = a.id(), s](Tape& t, std::size_t self) {
        t.grad_buffer(ia).add_scaled_(t.grad(self), s);
    });
}

Var add_scalar(Var a, double s) {
    return unary(a, [s](double v) { return v + s; },
                 [ia = a.id()](Tape& t, std::size_t self) { t.grad_buffer(ia).add_(t.grad(self)); });
}

Var neg(Var a) { return scale(a, -1.0); }

Var add_row(Var a, Var row) {
    require_same_tape(a, row);
    const Tensor& x = a.value();
    const Tensor& r = row.value();
    if (r.rows != 1 || r.cols != x.cols) throw UsageError("add_row: row must be 1xC");
    Tensor out = x;
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) out(i, j) += r[j];
    const std::size_t ia = a.id(), ir = row.id();
    return a.tape().record(std::move(out), {a, row}, [ia, ir](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) t.grad_buffer(ia).add_(g);
        if (t.requires_grad(ir)) {
            Tensor& gr = t.grad_buffer(ir);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) gr[j] += g(i, j);
        }
    });
}

Var mul_row(Var a, Var row) {
    require_same_tape(a, row);
    const Tensor& x = a.value();
    const Tensor& r = row.value();
    if (r.rows != 1 || r.cols != x.cols) throw UsageError("mul_row: row must be 1xC");
    Tensor out = x;
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) out(i, j) *= r[j];
    const std::size_t ia = a.id(), ir = row.id();
    return a.tape().record(std::move(out), {a, row}, [ia, ir](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        const Tensor& r = t.value(ir);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) ga(i, j) += g(i, j) * r[j];
        }
        if (t.requires_grad(ir)) {
            Tensor& gr = t.grad_buffer(ir);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) gr[j] += g(i, j) * x(i, j);
        }
    });
}

Var mul_col(Var a, Var col) {
    require_same_tape(a, col);
    const Tensor& x = a.value();
    const Tensor& c = col.value();
    if (c.cols != 1 || c.rows != x.rows) throw UsageError("mul_col: column must be Nx1");
    Tensor out = x;
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) out(i, j) *= c[i];
    const std::size_t ia = a.id(), ic = col.id();
    return a.tape().record(std::move(out), {a, col}, [ia, ic](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        const Tensor& c = t.value(ic);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) ga(i, j) += g(i, j) * c[i];
        }
        if (t.requires_grad(ic)) {
            Tensor& gc = t.grad_buffer(ic);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) gc[i] += g(i, j) * x(i, j);
        }
    });
}

// ---------------------------------------------------------------------------
// matrix products

Var matmul(Var a, Var b) {
    require_same_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& w = b.value();
    if (x.cols != w.rows) throw UsageError("matmul: inner dimensions differ");
    Tensor out(x.rows, w.cols);
    as_mat(out).noalias() = as_mat(x) * as_mat(w);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) as_mat(t.grad_buffer(ia)).noalias() += as_mat(g) * as_mat(t.value(ib)).transpose();
        if (t.requires_grad(ib)) as_mat(t.grad_buffer(ib)).noalias() += as_mat(t.value(ia)).transpose() * as_mat(g);
    });
}

Var linear(Var x, Var w, Var b) {
    require_same_tape(x, w);
    require_same_tape(x, b);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (xv.cols != wv.rows) throw UsageError("linear: input width " + std::to_string(xv.cols) + " != weight rows " +
                                             std::to_string(wv.rows));
    if (bv.rows != 1 || bv.cols != wv.cols) throw UsageError("linear: bias must be 1xM");
    Tensor out(xv.rows, wv.cols);
    auto o = as_mat(out);
    o.noalias() = as_mat(xv) * as_mat(wv);
    o.rowwise() += as_mat(bv).row(0);
    const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
    return x.tape().record(std::move(out), {x, w, b}, [ix, iw, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ix)) as_mat(t.grad_buffer(ix)).noalias() += as_mat(g) * as_mat(t.value(iw)).transpose();
        if (t.requires_grad(iw)) as_mat(t.grad_buffer(iw)).noalias() += as_mat(t.value(ix)).transpose() * as_mat(g);
        if (t.requires_grad(ib)) as_mat(t.grad_buffer(ib)).row(0) += as_mat(g).colwise().sum();
    });
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

Var relu(Var a) {
    return unary(a, [](double v) { return v > 0.0 ? v : 0.0; }, [ia = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) ga[i] += g[i];
    });
}

Var tanh(Var a) {
    return unary(a, [](double v) { return std::tanh(v); }, [ia = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

Var sigmoid(Var a) {
    return unary(a, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [ia = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Var exp(Var a) {
    return unary(a, [](double v) { return std::exp(v); }, [ia = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    });
}

Var sin(Var a) {
    return unary(a, [](double v) { return std::sin(v); }, [ia = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * std::cos(x[i]);
    });
}

Var log(Var a) {
    return unary(a, [](double v) { return std::log(v); }, [ia = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
    });
}

Var square(Var a) {
    return unary(a, [](double v) { return v * v; }, [ia = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * g[i] * x[i];
    });
}

Var abs(Var a) {
    return unary(a, [](double v) { return std::abs(v); }, [ia = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : (x[i] < 0.0 ? -g[i] : 0.0);
    });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(Var a) {
    return a.tape().record(Tensor::scalar(a.value().sum()), {a}, [ia = a.id()](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        for (double& v : t.grad_buffer(ia).data) v += g;
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw UsageError("mean of an empty array");
    return a.tape().record(Tensor::scalar(a.value().sum() / n), {a}, [ia = a.id(), n](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0] / n;
        for (double& v : t.grad_buffer(ia).data) v += g;
    });
}

Var sum_rows(Var a) {
    const Tensor& x = a.value();
    Tensor out(1, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) out[j] += x(i, j);
    return a.tape().record(std::move(out), {a}, [ia = a.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < ga.rows; ++i)
            for (std::size_t j = 0; j < ga.cols; ++j) ga(i, j) += g[j];
    });
}

Var row_dot(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "row_dot");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Tensor out(x.rows, 1);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) s += x(i, j) * y(i, j);
        out[i] = s;
    }
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(ib);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < x.rows; ++i)
                for (std::size_t j = 0; j < x.cols; ++j) ga(i, j) += g[i] * y(i, j);
        }
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < x.rows; ++i)
                for (std::size_t j = 0; j < x.cols; ++j) gb(i, j) += g[i] * x(i, j);
        }
    });
}

// ---------------------------------------------------------------------------
// layout

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw UsageError("concat_cols of nothing");
    const std::size_t n = parts[0].rows();
    std::size_t width = 0;
    for (const Var& p : parts) {
        require_same_tape(parts[0], p);
        if (p.rows() != n) throw UsageError("concat_cols: row counts differ");
        width += p.cols();
    }
    Tensor out(n, width);
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(v.data.data() + i * v.cols, v.cols, out.data.data() + i * width + off);
        ids.push_back(p.id());
        offsets.push_back(off);
        off += v.cols;
    }
    return parts[0].tape().record(std::move(out), parts, [ids, offsets](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k])) continue;
            Tensor& gp = t.grad_buffer(ids[k]);
            for (std::size_t i = 0; i < gp.rows; ++i)
                for (std::size_t j = 0; j < gp.cols; ++j) gp(i, j) += g(i, offsets[k] + j);
        }
    });
}

Var concat_cols(std::initializer_list<Var> parts) { return concat_cols(std::span<const Var>(parts.begin(), parts.size())); }

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    const Tensor& x = a.value();
    if (begin + count > x.cols) throw UsageError("slice_cols out of range");
    Tensor out(x.rows, count);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = x(i, begin + j);
    return a.tape().record(std::move(out), {a}, [ia = a.id(), begin](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) ga(i, begin + j) += g(i, j);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw UsageError("concat_rows of nothing");
    const std::size_t c = parts[0].cols();
    std::size_t n = 0;
    for (const Var& p : parts) {
        require_same_tape(parts[0], p);
        if (p.cols() != c) throw UsageError("concat_rows: column counts differ");
        n += p.rows();
    }
    Tensor out(n, c);
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off * c));
        ids.push_back(p.id());
        offsets.push_back(off);
        off += v.rows;
    }
    return parts[0].tape().record(std::move(out), parts, [ids, offsets, c](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k])) continue;
            Tensor& gp = t.grad_buffer(ids[k]);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] * c + i];
        }
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    const Tensor& x = a.value();
    if (begin + count > x.rows) throw UsageError("slice_rows out of range");
    Tensor out(count, x.cols);
    std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(begin * x.cols), count * x.cols, out.data.begin());
    return a.tape().record(std::move(out), {a}, [ia = a.id(), begin](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * g.cols + i] += g[i];
    });
}

Var repeat_rows(Var row, std::size_t n) {
    const Tensor& r = row.value();
    if (r.rows != 1) throw UsageError("repeat_rows expects a 1xC row");
    Tensor out(n, r.cols);
    for (std::size_t i = 0; i < n; ++i) std::copy(r.data.begin(), r.data.end(), out.data.begin() + i * r.cols);
    return row.tape().record(std::move(out), {row}, [ir = row.id()](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gr = t.grad_buffer(ir);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) gr[j] += g(i, j);
    });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
    const Tensor& x = a.value();
    Tensor out(index.size(), x.cols);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.rows) throw UsageError("gather_rows: index out of range");
        std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(index[i] * x.cols), x.cols, out.data.begin() + i * x.cols);
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return a.tape().record(std::move(out), {a}, [ia = a.id(), idx = std::move(idx)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < g.cols; ++j) ga(idx[i], j) += g(i, j);
    });
}

// ---------------------------------------------------------------------------
// geometry helpers

Var normalize_rows(Var a, double eps) {
    const Tensor& x = a.value();
    Tensor out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double n2 = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) n2 += x(i, j) * x(i, j);
        const double inv = 1.0 / std::max(std::sqrt(n2), eps);
        for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = x(i, j) * inv;
    }
    return a.tape().record(std::move(out), {a}, [ia = a.id(), eps](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < x.rows; ++i) {
            double n2 = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < x.cols; ++j) {
                n2 += x(i, j) * x(i, j);
                gy += g(i, j) * y(i, j);
            }
            const double n = std::sqrt(n2);
            if (n > eps) {
                for (std::size_t j = 0; j < x.cols; ++j) ga(i, j) += (g(i, j) - y(i, j) * gy) / n;
            } else {
                for (std::size_t j = 0; j < x.cols; ++j) ga(i, j) += g(i, j) / eps;
            }
        }
    });
}

Var div_clamped(Var a, Var b, double eps) {
    require_same_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& d = b.value();
    const bool broadcast = d.cols == 1 && x.cols != 1;
    if (d.rows != x.rows || (!broadcast && d.cols != x.cols)) throw UsageError("div_clamped: shape mismatch");
    Tensor out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = x(i, j) / std::max(broadcast ? d[i] : d(i, j), eps);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib, eps, broadcast](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& d = t.value(ib);
        const Tensor& y = t.value(self);
        const bool ga_needed = t.requires_grad(ia), gb_needed = t.requires_grad(ib);
        for (std::size_t i = 0; i < g.rows; ++i) {
            for (std::size_t j = 0; j < g.cols; ++j) {
                const double den = broadcast ? d[i] : d(i, j);
                const double cl = std::max(den, eps);
                if (ga_needed) t.grad_buffer(ia)(i, j) += g(i, j) / cl;
                if (gb_needed && den > eps) {
                    Tensor& gb = t.grad_buffer(ib);
                    (broadcast ? gb[i] : gb(i, j)) -= g(i, j) * y(i, j) / cl;
                }
            }
        }
    });
}

namespace {

template <typename Better>
Var extreme_rows(Var a, Better better, const char* op) {
    const Tensor& x = a.value();
    if (x.rows == 0) throw UsageError(std::string(op) + " of an empty batch");
    Tensor out(1, x.cols);
    std::vector<std::size_t> arg(x.cols, 0);
    for (std::size_t j = 0; j < x.cols; ++j) {
        out[j] = x(0, j);
        for (std::size_t i = 1; i < x.rows; ++i)
            if (better(x(i, j), out[j])) {
                out[j] = x(i, j);
                arg[j] = i;
            }
    }
    return a.tape().record(std::move(out), {a}, [ia = a.id(), arg = std::move(arg)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t j = 0; j < arg.size(); ++j) ga(arg[j], j) += g[j];
    });
}

}  // namespace

Var max_rows(Var a) { return extreme_rows(a, [](double v, double best) { return v > best; }, "max_rows"); }
Var min_rows(Var a) { return extreme_rows(a, [](double v, double best) { return v < best; }, "min_rows"); }

}  // namespace instag::ad
