// SPDX-License-Identifier: Apache-2.0
#include "instag/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace instag {

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw std::invalid_argument("tensor: value count does not match shape");
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

void Tensor::add_(const Tensor& o) {
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
}

void Tensor::add_scaled_(const Tensor& o, double s) {
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += s * o.data[i];
}

double Tensor::sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::abs(v));
    return m;
}

bool Tensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace instag
