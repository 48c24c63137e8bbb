// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

#include "wisteria/module.hpp"
#include "wisteria/ops.hpp"

namespace wisteria {

struct SsmConfig {
  std::size_t d_model = 64;
  std::size_t expand = 2;       // inner width E * d_model
  std::size_t state_dim = 16;   // N_s
  std::size_t conv_width = 4;   // causal pre-convolution
  std::size_t dt_rank = 0;      // 0 selects ceil(d_model / 16)
  double dt_min = 1e-3;
  double dt_max = 1e-1;

  std::size_t inner() const noexcept { return expand * d_model; }
  std::size_t resolved_dt_rank() const noexcept { return dt_rank ? dt_rank : (d_model + 15) / 16; }
  void validate() const;
};

// Selective scan over x[B, L, C] with input-dependent step delta[B, L, C]
// (already positive), per-channel decay A = -exp(a_log) with a_log[C, N],
// input/output projections b, c[B, L, N] shared across channels and skip
// gain d_skip[C]:
//
//   h_t = exp(delta_t * A) * h_{t-1} + (delta_t * B_t) * x_t,   h_0 = 0
//   y_t = <C_t, h_t> + d_skip * x_t
//
// Strictly causal in t. Throws NumericError naming the step when the state
// overflows. Backward recomputes the states per channel instead of storing
// B * L * C * N values.
Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a_log, const Tensor& b, const Tensor& c,
                      const Tensor& d_skip);

// One directional Mamba block:
// in-proj -> causal conv + SiLU -> selective scan -> SiLU(z) gate -> out-proj.
struct MambaStream {
  SsmConfig cfg;
  Tensor in_proj;   // [D, 2C]
  Tensor conv_w;    // [C, W]
  Tensor conv_b;    // [C]
  Tensor x_proj;    // [C, R + 2N]
  Tensor dt_w;      // [R, C]
  Tensor dt_b;      // [C]
  Tensor a_log;     // [C, N]
  Tensor d_skip;    // [C]
  Tensor out_proj;  // [C, D]

  static MambaStream init(const SsmConfig& cfg, Initializer& init);
  // u: [B, L, D] or [L, D]
  Tensor forward(const Tensor& u) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Bidirectional wrapper: H = 1/2 (fwd(x) + flip(bwd(flip(x)))). Flips act
// on each row's valid prefix so padding never leaks into real positions.
struct BiMamba {
  MambaStream fwd;
  MambaStream bwd;
  bool tied = false;  // bwd shares fwd's tensors

  static BiMamba init(const SsmConfig& cfg, Initializer& init, bool tie_weights = false);
  Tensor forward(const Tensor& x, const SeqLengths& lengths = {}) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace wisteria
