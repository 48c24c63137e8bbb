// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "wisteria/tensor.hpp"

namespace wisteria {

// Valid-prefix length of each batch row. Padding is always a suffix, so a
// sequence-mixing op only has to know where the real tokens stop. An empty
// vector means every row is fully valid.
using SeqLengths = std::vector<std::size_t>;

// a[..., M, K] x b[..., K, P] with numpy-style broadcasting of the leading
// (batch) dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);

// x[..., K] * w[K, P] (+ bias[P]).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// Binary elementwise ops. Operands must have equal shapes, or the shape of
// one must be a trailing suffix of the other (bias-style broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor gelu(const Tensor& x);  // exact erf form
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor softplus(const Tensor& x);

// Sum of all elements as a shape-[1] tensor.
Tensor sum(const Tensor& x);
// Mean along `axis`; the axis is removed (a rank-1 input yields shape [1]).
Tensor mean(const Tensor& x, int axis);

Tensor softmax(const Tensor& x, int axis);

// Normalizes over the last (feature) axis. gamma/beta are optional [D]
// affine parameters. Any other axis is a DimensionError.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis = -1,
                 double eps = 1e-10);

Tensor flip(const Tensor& x, int axis);
// Reverses axis 1 of x[B, L, ...] within each row's valid prefix; padded
// positions stay where they are.
Tensor flip_valid(const Tensor& x, const SeqLengths& lengths);

std::vector<Tensor> split_last(const Tensor& x, const std::vector<std::size_t>& sizes);
std::pair<Tensor, Tensor> split_last_dim_in_two(const Tensor& x);
Tensor concat_last(const std::vector<Tensor>& parts);

Tensor reshape(const Tensor& x, Shape shape);

// Gathers rows of table[V, D] for ids laid out as `ids_shape`.
Tensor embedding(std::span<const std::int32_t> ids, const Shape& ids_shape, const Tensor& table);

enum class ConvPadding {
  kSame,    // symmetric zero padding, output length == input length, odd K only
  kCausal,  // left padding only; output t sees inputs <= t
};

// Per-channel 1-D convolution of x[..., L, D] with kernel[D, K] (cross-
// correlation convention) and optional bias[D]. Inputs at positions
// >= lengths[b] are treated as zero padding.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t dilation,
                        ConvPadding padding = ConvPadding::kSame, const SeqLengths& lengths = {});

// Number of input positions that can influence one output.
constexpr std::size_t receptive_span(std::size_t kernel_size, std::size_t dilation) {
  return 1 + (kernel_size - 1) * dilation;
}

// Mean cross-entropy of logits[..., V] against targets at positions where
// mask is non-zero. Throws InputError when the mask selects nothing.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask);

// Mean over the valid prefix of x[B, L, D] -> [B, D].
Tensor masked_mean_pool(const Tensor& x, const SeqLengths& lengths);

// Global L2 norm of the gradients of `params`.
double grad_norm(const std::vector<Tensor>& params);

}  // namespace wisteria
