// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit suites.

#ifndef SOTSEP_TESTS_TEST_UTIL_HPP
#define SOTSEP_TESTS_TEST_UTIL_HPP

#include <random>
#include <vector>

#include "sotsep/autodiff.hpp"

namespace sotsep::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

// sum(x * w) for a fixed random w, so every output element carries a
// distinct, non-trivial weight into the gradient.
inline Tensor weighted_sum(Tape& tape, const Tensor& x, const Tensor& w) {
  return sum(tape, mul(tape, x, w));
}

inline std::size_t uniform_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace sotsep::testing

#endif  // SOTSEP_TESTS_TEST_UTIL_HPP
