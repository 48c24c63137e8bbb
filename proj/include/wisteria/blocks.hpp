// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "wisteria/module.hpp"
#include "wisteria/ops.hpp"
#include "wisteria/ssm.hpp"

namespace wisteria {

// Feature-branch dilations for the GCMB stack: [1, 1, n, n^2, n^3, n^4, ...].
std::vector<std::size_t> dilation_schedule(std::size_t base, std::size_t num_gcmb);
// Gate-branch dilation paired with a feature-branch dilation: max(1, d / n).
std::size_t gate_dilation(std::size_t feature_dilation, std::size_t base);

// Gated-convolution BiMamba block:
//   H = BiMamba(x); h = GeLU(convA(H)); g = sigmoid(convB(H))
//   Y = LayerNorm(MLP(H + h * g))
struct GcmbBlock {
  BiMamba bimamba;
  Tensor conv_a_w, conv_a_b;  // [D, K], [D]
  Tensor conv_b_w, conv_b_b;
  std::size_t dilation_a = 1;
  std::size_t dilation_b = 1;
  Tensor mlp_w1, mlp_b1;  // [D, 2D], [2D]
  Tensor mlp_w2, mlp_b2;  // [2D, D], [D]
  Tensor ln_gamma, ln_beta;

  static GcmbBlock init(const SsmConfig& ssm, std::size_t kernel, std::size_t dilation_a, std::size_t dilation_b,
                        Initializer& init);
  Tensor forward(const Tensor& x, const SeqLengths& lengths = {}) const;
  // Everything after the BiMamba: LayerNorm(MLP(H + h * g)) from H.
  Tensor fuse(const Tensor& big_h, const SeqLengths& lengths = {}) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// [U, G] = split(W1 y + b1); Z = y + W2 (SiLU(U) * sigmoid(G)) + b2.
// No normalization inside the block.
struct GatedMlp {
  Tensor w1, b1;  // [D, 2h], [2h]
  Tensor w2, b2;  // [h, D], [D]

  static GatedMlp init(std::size_t dim, std::size_t hidden, Initializer& init);
  Tensor forward(const Tensor& y) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Fourier position embedding. Coordinate pair m of every head is treated as
// a complex number and multiplied by
//   f_m(n) = 1                                          if w_m < w_cut
//   f_m(n) = e^{i w_m n} + sum_j a[m, j] e^{i w_{m,j} n}  otherwise
// with w_m = theta^(-2m / d_head), w_cut = 2 pi / N_train and learnable real
// coefficients a[m, j] over a fixed set of harmonic frequencies w_{m,j}.
struct FopeParams {
  std::size_t d_head = 0;
  std::vector<double> base_freqs;      // [d_head / 2]
  double cutoff = 0.0;                 // w_cut
  std::size_t num_harmonics = 0;
  std::vector<double> harmonic_freqs;  // [d_head / 2 * num_harmonics]
  Tensor coeffs;                       // [d_head / 2, num_harmonics]

  static std::vector<double> rope_frequencies(std::size_t d_head, double theta = 10000.0);

  // Harmonic frequencies are drawn from the layer's own spectrum (pairs at
  // or above the cutoff other than m); coefficients start at
  // Normal(0, 0.02 / sqrt(num_harmonics)).
  static FopeParams init(std::size_t d_head, std::size_t train_len, std::size_t num_harmonics, Initializer& init,
                         double theta = 10000.0);
  bool passes_through(std::size_t pair) const { return base_freqs[pair] < cutoff; }
};

// x: [B, L, H, d_head] or [L, H, d_head]. Positions default to 0..L-1.
Tensor fope_rotate(const Tensor& x, const FopeParams& p, std::span<const double> positions = {});
// Classic rotary embedding on interleaved pairs.
Tensor rope_rotate(const Tensor& x, double theta = 10000.0, std::span<const double> positions = {});

// Fused bidirectional softmax attention over q, k, v[B, L, H, d_head] with
// logits scaled by 1/sqrt(d_head). Keys at positions >= lengths[b] are
// masked; a row with no valid key yields zeros. Keeps the [B, H, L, L]
// probability buffer for the backward pass.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, const SeqLengths& lengths = {});

enum class PositionMode { kFope, kRope, kNone };

PositionMode parse_position_mode(const std::string& name);
std::string position_mode_name(PositionMode mode);

struct Attention {
  std::size_t heads = 1;
  PositionMode mode = PositionMode::kFope;
  double theta = 10000.0;
  Tensor wq, wk, wv, wo;  // [D, D]
  FopeParams fope;        // used in kFope mode

  static Attention init(std::size_t dim, std::size_t heads, PositionMode mode, std::size_t train_len,
                        std::size_t num_harmonics, Initializer& init);
  std::size_t d_head() const { return wq.dim(0) / heads; }

  // x: [B, L, D] or [L, D]; output has the same shape (no residual).
  Tensor forward(const Tensor& x, const SeqLengths& lengths = {}) const;
  // Pre-softmax logits [B, H, L, L] after positional treatment (no masking).
  Tensor logits(const Tensor& x) const;
  // Softmax weights [B, H, L, L] with padding masked.
  Tensor weights(const Tensor& x, const SeqLengths& lengths = {}) const;
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  std::pair<Tensor, Tensor> positioned_qk(const Tensor& x3) const;
};

}  // namespace wisteria
