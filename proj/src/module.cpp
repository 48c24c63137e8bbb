// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/module.hpp"

#include <cmath>
#include <numbers>

#include "wisteria/data.hpp"

namespace wisteria {

std::size_t count_parameters(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

double Initializer::uniform() { return unit_uniform(rng_); }

double Initializer::normal() {
  // Box-Muller on our own uniform draws keeps init identical across
  // standard library implementations.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor Initializer::truncated_normal(Shape shape, double std) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    v = z * std;
  }
  return t;
}

Tensor Initializer::normal(Shape shape, double std) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = normal() * std;
  return t;
}

Tensor Initializer::uniform(Shape shape, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = lo + (hi - lo) * uniform();
  return t;
}

}  // namespace wisteria
