// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cstddef>

namespace wisteria::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat, Eigen::Unaligned, Eigen::OuterStride<>>;
using ConstMapMat = Eigen::Map<const RowMat, Eigen::Unaligned, Eigen::OuterStride<>>;

inline ConstMapMat cmap(const double* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return ConstMapMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

inline MapMat mmap(double* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return MapMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

// C[M,P] (+)= op(A) * op(B) for dense row-major operands.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p,
                 bool trans_a, bool trans_b, bool accumulate) {
  auto cm = mmap(c, m, p, p);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) {
    run(cmap(a, m, k, k), cmap(b, k, p, p));
  } else if (trans_a && !trans_b) {
    run(cmap(a, k, m, m).transpose(), cmap(b, k, p, p));
  } else if (!trans_a && trans_b) {
    run(cmap(a, m, k, k), cmap(b, p, k, k).transpose());
  } else {
    run(cmap(a, k, m, m).transpose(), cmap(b, p, k, k).transpose());
  }
}

}  // namespace wisteria::detail
