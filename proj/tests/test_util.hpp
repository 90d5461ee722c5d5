// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>

#include "instag/tensor.hpp"

namespace instag::test {

inline Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(r, c);
    for (double& v : t.data) v = u(rng);
    return t;
}

}  // namespace instag::test
