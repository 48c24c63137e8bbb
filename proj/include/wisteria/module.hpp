// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "wisteria/tensor.hpp"

namespace wisteria {

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = true;  // false for biases and normalization affine terms
};

using ParamList = std::vector<NamedParam>;

std::size_t count_parameters(const ParamList& params);

// Deterministic parameter initializer. Draws are sequential, so building the
// same modules in the same order from the same seed yields identical values.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  double uniform();  // [0, 1)
  double normal();
  // Normal(0, std) resampled outside +-2 std.
  Tensor truncated_normal(Shape shape, double std);
  Tensor normal(Shape shape, double std);
  Tensor uniform(Shape shape, double lo, double hi);

  std::mt19937_64& engine() noexcept { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline constexpr double kProjectionStd = 0.02;

}  // namespace wisteria
