// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "instag/parameter_store.hpp"
#include "instag/tensor.hpp"

namespace instag::ad {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows; }
    std::size_t cols() const { return value().cols; }
    double item() const;

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Linear record of operations. Nodes are appended in evaluation order and
/// backward visits them in exact reverse. A tape supports one backward pass.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    /// With `record_grad == false` no backward closures are kept (forward-only).
    explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor v);
    /// Borrowed constant; `v` must outlive the tape and stay unmodified.
    Var constant_view(const Tensor& v);
    /// Borrowed parameter; gradients accumulate into the store's buffer.
    Var parameter(Parameter& p);
    Var parameter(ParameterStore& store, std::string_view name);
    /// Owned leaf that requires grad; read its gradient with grad().
    Var variable(Tensor v);

    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
    }

    const Tensor& value(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Gradient accumulated so far at `id`; empty tensor if none reached it.
    const Tensor& grad(std::size_t id) const;
    const Tensor& grad(Var v) const { return grad(v.id()); }
    /// Accumulation buffer for `id`, allocated as zeros on first use.
    Tensor& grad_buffer(std::size_t id);

    void backward(Var loss);
    bool consumed() const { return consumed_; }
    bool recording() const { return record_grad_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;
        const Tensor* borrowed = nullptr;
        Tensor grad;
        Tensor* sink = nullptr;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Var push(Node n);

    std::vector<Node> nodes_;
    bool record_grad_;
    bool consumed_ = false;
};

// Elementwise on equal shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

// Broadcasting limited to rows/columns of 2D arrays.
Var add_row(Var a, Var row);  ///< a[N,C] + row[1,C]
Var mul_row(Var a, Var row);  ///< a[N,C] * row[1,C]
Var mul_col(Var a, Var col);  ///< a[N,C] * col[N,1]

Var matmul(Var a, Var b);
/// x[N,K] * w[K,M] + b[1,M]
Var linear(Var x, Var w, Var b);

Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var sin(Var a);
Var log(Var a);
Var square(Var a);
Var abs(Var a);

Var sum(Var a);
Var mean(Var a);
Var sum_rows(Var a);  ///< [N,C] -> [1,C]
Var row_dot(Var a, Var b);  ///< [N,C]x[N,C] -> [N,1]

Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var repeat_rows(Var row, std::size_t n);
Var gather_rows(Var a, std::span<const std::size_t> index);

/// Each row divided by max(|row|, eps).
Var normalize_rows(Var a, double eps = 1e-12);
/// a / max(b, eps) with b broadcast over columns when b is [N,1].
Var div_clamped(Var a, Var b, double eps);
/// Columnwise extremes over rows; gradient routes to the first arg-extreme.
Var max_rows(Var a);
Var min_rows(Var a);

}  // namespace instag::ad
