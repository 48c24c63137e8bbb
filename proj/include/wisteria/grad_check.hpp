// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wisteria/tensor.hpp"

namespace wisteria {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of a scalarized function against central
// finite differences. The function output (any shape) is reduced to
// sum(out * w) with fixed pseudo-random weights w, so that constant-sum
// outputs such as softmax still have informative gradients.
//
// The error per coordinate is |analytic - numeric| / max(1, |analytic|).
// Throws OracleError when two evaluations at the same point differ.
class GradChecker {
 public:
  explicit GradChecker(double step = 1e-5, std::uint64_t weight_seed = 0x5eed) : step_(step), seed_(weight_seed) {}

  // `f` must read the current values of `inputs`; they are perturbed in
  // place and restored afterwards. `names` label the report.
  GradCheckReport check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                        std::vector<std::string> names = {}) const;

 private:
  double step_;
  std::uint64_t seed_;
};

// Single-input convenience form.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

}  // namespace wisteria
