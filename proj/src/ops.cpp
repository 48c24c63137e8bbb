// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "gemm.hpp"
#include "wisteria/errors.hpp"

namespace wisteria {
namespace {

std::size_t normalize_axis(int axis, std::size_t rank, const Shape& shape) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " + shape_to_string(shape));
  }
  return static_cast<std::size_t>(a);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Sequence view of x[..., L, D]: leading dims folded into a batch count.
struct SeqView {
  std::size_t batch;
  std::size_t length;
  std::size_t channels;
};

SeqView seq_view(const Tensor& x, const char* op) {
  if (x.rank() < 2) {
    throw DimensionError(std::string(op) + " expects [..., L, D], got " + shape_to_string(x.shape()));
  }
  const auto& s = x.shape();
  const std::size_t l = s[s.size() - 2];
  const std::size_t d = s.back();
  return {x.numel() / (l * d), l, d};
}

void check_lengths(const SeqLengths& lengths, std::size_t batch, std::size_t length, const char* op) {
  if (lengths.empty()) return;
  if (lengths.size() != batch) {
    throw DimensionError(std::string(op) + ": " + std::to_string(lengths.size()) + " lengths for batch of " +
                         std::to_string(batch));
  }
  for (auto n : lengths) {
    if (n > length) throw DimensionError(std::string(op) + ": valid length exceeds sequence length");
  }
}

std::size_t row_length(const SeqLengths& lengths, std::size_t b, std::size_t full) {
  return lengths.empty() ? full : lengths[b];
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto in = x.data();
  Buffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_op_result(x.shape(), std::move(out), {x}, [x, deriv](const Tensor& y) {
    if (!x.requires_grad()) return;
    Tensor xin = x;
    const auto g = y.grad();
    const auto xv = x.data();
    const auto yv = y.data();
    auto gx = xin.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const bool a_big = a.rank() >= b.rank();
  const Tensor& big = a_big ? a : b;
  const Tensor& small = a_big ? b : a;
  if (!(big.shape() == small.shape() || is_suffix(small.shape(), big.shape()))) {
    throw DimensionError("elementwise shapes incompatible: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  const std::size_t n = big.numel();
  const std::size_t m = small.numel();
  const double* av = a.data().data();
  const double* bv = b.data().data();
  const bool a_is_big = a.numel() == n;
  Buffer out(n);
  // The small operand repeats every m elements of the big one.
  for (std::size_t o = 0; o < n; o += m) {
    const double* x = a_is_big ? av + o : av;
    const double* y = a_is_big ? bv : bv + o;
    double* z = out.data() + o;
    switch (kind) {
      case BinaryKind::kAdd:
        for (std::size_t i = 0; i < m; ++i) z[i] = x[i] + y[i];
        break;
      case BinaryKind::kSub:
        for (std::size_t i = 0; i < m; ++i) z[i] = x[i] - y[i];
        break;
      case BinaryKind::kMul:
        for (std::size_t i = 0; i < m; ++i) z[i] = x[i] * y[i];
        break;
    }
  }
  return make_op_result(big.shape(), std::move(out), {a, b}, [a, b, kind, n, m, a_is_big](const Tensor& y) {
    const double* g = y.grad().data();
    const double* av = a.data().data();
    const double* bv = b.data().data();
    // Offsets of a and b inside the block starting at o.
    auto a_off = [&](std::size_t o) { return a_is_big ? o : 0; };
    auto b_off = [&](std::size_t o) { return a_is_big ? 0 : o; };
    if (a.requires_grad()) {
      Tensor t = a;
      double* ga = t.mutable_grad().data();
      for (std::size_t o = 0; o < n; o += m) {
        double* gp = ga + a_off(o);
        const double* gg = g + o;
        if (kind == BinaryKind::kMul) {
          const double* bp = bv + b_off(o);
          for (std::size_t i = 0; i < m; ++i) gp[i] += gg[i] * bp[i];
        } else {
          for (std::size_t i = 0; i < m; ++i) gp[i] += gg[i];
        }
      }
    }
    if (b.requires_grad()) {
      Tensor t = b;
      double* gb = t.mutable_grad().data();
      for (std::size_t o = 0; o < n; o += m) {
        double* gp = gb + b_off(o);
        const double* gg = g + o;
        switch (kind) {
          case BinaryKind::kAdd:
            for (std::size_t i = 0; i < m; ++i) gp[i] += gg[i];
            break;
          case BinaryKind::kSub:
            for (std::size_t i = 0; i < m; ++i) gp[i] -= gg[i];
            break;
          case BinaryKind::kMul: {
            const double* ap = av + a_off(o);
            for (std::size_t i = 0; i < m; ++i) gp[i] += gg[i] * ap[i];
            break;
          }
        }
      }
    }
  });
}

double sigmoid_scalar(double v) {
  if (v >= 0) {
    const double e = std::exp(-v);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double softplus_scalar(double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t k2 = bs[bs.size() - 2];
  const std::size_t p = bs.back();
  if (k != k2) {
    throw DimensionError("matmul inner dimensions differ: " + shape_to_string(as) + " x " + shape_to_string(bs));
  }
  // Broadcast leading batch dimensions.
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  const std::size_t rank = std::max(a_batch.size(), b_batch.size());
  Shape batch(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + a_batch.size() >= rank ? a_batch[i + a_batch.size() - rank] : 1;
    const std::size_t db = i + b_batch.size() >= rank ? b_batch[i + b_batch.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("matmul batch dimensions not broadcastable: " + shape_to_string(as) + " x " +
                           shape_to_string(bs));
    }
    batch[i] = std::max(da, db);
  }
  const std::size_t nbatch = shape_numel(batch);
  // Per output batch index, offset (in matrices) into a and b.
  std::vector<std::size_t> a_idx(nbatch), b_idx(nbatch);
  for (std::size_t flat = 0; flat < nbatch; ++flat) {
    std::size_t rem = flat;
    std::size_t ai = 0, bi = 0, a_stride = 1, b_stride = 1;
    for (std::size_t i = rank; i-- > 0;) {
      const std::size_t coord = rem % batch[i];
      rem /= batch[i];
      const std::size_t da = i + a_batch.size() >= rank ? a_batch[i + a_batch.size() - rank] : 1;
      const std::size_t db = i + b_batch.size() >= rank ? b_batch[i + b_batch.size() - rank] : 1;
      if (da > 1) ai += coord * a_stride;
      if (db > 1) bi += coord * b_stride;
      a_stride *= da;
      b_stride *= db;
    }
    a_idx[flat] = ai;
    b_idx[flat] = bi;
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(p);
  Buffer out(nbatch * m * p);
  const bool shared_b = shape_numel(b_batch) == 1;
  const bool contiguous_a = shape_numel(a_batch) == nbatch;
  if (shared_b && contiguous_a) {
    detail::gemm(a.data().data(), b.data().data(), out.data(), nbatch * m, k, p, false, false, false);
  } else {
    for (std::size_t i = 0; i < nbatch; ++i) {
      detail::gemm(a.data().data() + a_idx[i] * m * k, b.data().data() + b_idx[i] * k * p, out.data() + i * m * p,
                   m, k, p, false, false, false);
    }
  }
  return make_op_result(std::move(out_shape), std::move(out), {a, b},
                        [a, b, m, k, p, nbatch, a_idx, b_idx, shared_b, contiguous_a](const Tensor& y) {
                          const double* g = y.grad().data();
                          if (a.requires_grad()) {
                            Tensor t = a;
                            double* ga = t.mutable_grad().data();
                            if (shared_b && contiguous_a) {
                              detail::gemm(g, b.data().data(), ga, nbatch * m, p, k, false, true, true);
                            } else {
                              for (std::size_t i = 0; i < nbatch; ++i) {
                                detail::gemm(g + i * m * p, b.data().data() + b_idx[i] * k * p, ga + a_idx[i] * m * k,
                                             m, p, k, false, true, true);
                              }
                            }
                          }
                          if (b.requires_grad()) {
                            Tensor t = b;
                            double* gb = t.mutable_grad().data();
                            if (shared_b && contiguous_a) {
                              detail::gemm(a.data().data(), g, gb, k, nbatch * m, p, true, false, true);
                            } else {
                              for (std::size_t i = 0; i < nbatch; ++i) {
                                detail::gemm(a.data().data() + a_idx[i] * m * k, g + i * m * p, gb + b_idx[i] * k * p,
                                             k, m, p, true, false, true);
                              }
                            }
                          }
                        });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2) throw DimensionError("linear weight must be [K, P], got " + shape_to_string(w.shape()));
  Tensor y = matmul(x, w);
  if (bias.defined()) y = add(y, bias);
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul); }

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor softplus(const Tensor& x) {
  return unary(x, softplus_scalar, [](double v, double) { return sigmoid_scalar(v); });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Buffer out{total};
  return make_op_result({1}, std::move(out), {x}, [x](const Tensor& y) {
    if (!x.requires_grad()) return;
    Tensor t = x;
    const double g = y.grad()[0];
    for (auto& v : t.mutable_grad()) v += g;
  });
}

Tensor mean(const Tensor& x, int axis) {
  const auto& s = x.shape();
  const std::size_t ax = normalize_axis(axis, s.size(), s);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != ax) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Buffer out(outer * inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + j) * inner + i];
    }
  }
  for (auto& v : out) v /= static_cast<double>(n);
  return make_op_result(std::move(out_shape), std::move(out), {x}, [x, outer, inner, n](const Tensor& y) {
    if (!x.requires_grad()) return;
    Tensor t = x;
    auto gx = t.mutable_grad();
    const auto g = y.grad();
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < inner; ++i) gx[(o * n + j) * inner + i] += g[o * inner + i] * inv;
      }
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const auto& s = x.shape();
  const std::size_t ax = normalize_axis(axis, s.size(), s);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  return make_op_result(s, std::move(out), {x}, [x, outer, inner, n](const Tensor& y) {
    if (!x.requires_grad()) return;
    Tensor t = x;
    auto gx = t.mutable_grad();
    const auto g = y.grad();
    const auto yv = y.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * yv[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          gx[base + j * inner] += yv[base + j * inner] * (g[base + j * inner] - dot);
        }
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis, double eps) {
  const auto& s = x.shape();
  const std::size_t ax = normalize_axis(axis, s.size(), s);
  if (ax != s.size() - 1) {
    throw DimensionError("layernorm normalizes the last (feature) axis only; got axis " + std::to_string(axis) +
                         " for shape " + shape_to_string(s));
  }
  const std::size_t d = s.back();
  const std::size_t rows = x.numel() / d;
  if (gamma.defined() && gamma.shape() != Shape{d}) {
    throw DimensionError("layernorm gamma must be [" + std::to_string(d) + "]");
  }
  if (beta.defined() && beta.shape() != Shape{d}) {
    throw DimensionError("layernorm beta must be [" + std::to_string(d) + "]");
  }
  const auto xv = x.data();
  Buffer xhat(xv.size());
  Buffer inv_std(rows);
  Buffer out(xv.size());
  const double* gv = gamma.defined() ? gamma.data().data() : nullptr;
  const double* bv = beta.defined() ? beta.data().data() : nullptr;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (row[i] - mu) * is;
      xhat[r * d + i] = h;
      out[r * d + i] = h * (gv ? gv[i] : 1.0) + (bv ? bv[i] : 0.0);
    }
  }
  return make_op_result(s, std::move(out), {x, gamma, beta},
                        [x, gamma, beta, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            const Tensor& y) {
                          const auto g = y.grad();
                          const double* gv = gamma.defined() ? gamma.data().data() : nullptr;
                          if (gamma.defined() && gamma.requires_grad()) {
                            Tensor t = gamma;
                            auto gg = t.mutable_grad();
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * xhat[r * d + i];
                            }
                          }
                          if (beta.defined() && beta.requires_grad()) {
                            Tensor t = beta;
                            auto gb = t.mutable_grad();
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
                            }
                          }
                          if (!x.requires_grad()) return;
                          Tensor t = x;
                          auto gx = t.mutable_grad();
                          const double inv_d = 1.0 / static_cast<double>(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            double mean_g = 0.0, mean_gx = 0.0;
                            for (std::size_t i = 0; i < d; ++i) {
                              const double gh = g[r * d + i] * (gv ? gv[i] : 1.0);
                              mean_g += gh;
                              mean_gx += gh * xhat[r * d + i];
                            }
                            mean_g *= inv_d;
                            mean_gx *= inv_d;
                            for (std::size_t i = 0; i < d; ++i) {
                              const double gh = g[r * d + i] * (gv ? gv[i] : 1.0);
                              gx[r * d + i] += inv_std[r] * (gh - mean_g - xhat[r * d + i] * mean_gx);
                            }
                          }
                        });
}

namespace {

// Shared permutation machinery for flips: out[i] = in[perm[i]].
Tensor permute_flat(const Tensor& x, std::vector<std::size_t> perm) {
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = xv[perm[i]];
  return make_op_result(x.shape(), std::move(out), {x}, [x, perm = std::move(perm)](const Tensor& y) {
    if (!x.requires_grad()) return;
    Tensor t = x;
    auto gx = t.mutable_grad();
    const auto g = y.grad();
    for (std::size_t i = 0; i < perm.size(); ++i) gx[perm[i]] += g[i];
  });
}

}  // namespace

Tensor flip(const Tensor& x, int axis) {
  const auto& s = x.shape();
  const std::size_t ax = normalize_axis(axis, s.size(), s);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  std::vector<std::size_t> perm(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < inner; ++i) perm[(o * n + j) * inner + i] = (o * n + (n - 1 - j)) * inner + i;
    }
  }
  return permute_flat(x, std::move(perm));
}

Tensor flip_valid(const Tensor& x, const SeqLengths& lengths) {
  const auto& s = x.shape();
  if (s.size() < 2) throw DimensionError("flip_valid expects [B, L, ...], got " + shape_to_string(s));
  const std::size_t batch = s[0];
  const std::size_t n = s[1];
  check_lengths(lengths, batch, n, "flip_valid");
  const std::size_t inner = x.numel() / (batch * n);
  std::vector<std::size_t> perm(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = row_length(lengths, b, n);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t src = j < len ? len - 1 - j : j;
      for (std::size_t i = 0; i < inner; ++i) perm[(b * n + j) * inner + i] = (b * n + src) * inner + i;
    }
  }
  return permute_flat(x, std::move(perm));
}

std::vector<Tensor> split_last(const Tensor& x, const std::vector<std::size_t>& sizes) {
  const auto& s = x.shape();
  if (s.empty()) throw DimensionError("split_last on rank-0 tensor");
  const std::size_t d = s.back();
  std::size_t total = 0;
  for (auto v : sizes) total += v;
  if (total != d) {
    throw DimensionError("split sizes sum to " + std::to_string(total) + " but last dim is " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  for (auto width : sizes) {
    Shape ps = s;
    ps.back() = width;
    Buffer out(rows * width);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(xv.data() + r * d + offset, width, out.data() + r * width);
    }
    parts.push_back(make_op_result(std::move(ps), std::move(out), {x}, [x, rows, d, offset, width](const Tensor& y) {
      if (!x.requires_grad()) return;
      Tensor t = x;
      auto gx = t.mutable_grad();
      const auto g = y.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < width; ++i) gx[r * d + offset + i] += g[r * width + i];
      }
    }));
    offset += width;
  }
  return parts;
}

std::pair<Tensor, Tensor> split_last_dim_in_two(const Tensor& x) {
  const std::size_t d = x.dim(-1);
  if (d % 2 != 0) throw DimensionError("cannot halve odd last dimension " + std::to_string(d));
  auto parts = split_last(x, {d / 2, d / 2});
  return {parts[0], parts[1]};
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last of zero tensors");
  Shape s = parts[0].shape();
  const Shape lead(s.begin(), s.end() - 1);
  std::size_t d = 0;
  for (const auto& p : parts) {
    const Shape ps(p.shape().begin(), p.shape().end() - 1);
    if (ps != lead) throw DimensionError("concat_last leading shapes differ");
    d += p.dim(-1);
  }
  const std::size_t rows = shape_numel(lead);
  s.back() = d;
  Buffer out(rows * d);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(-1);
    const auto pv = p.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.data() + r * w, w, out.data() + r * d + offset);
    offset += w;
  }
  return make_op_result(std::move(s), std::move(out), parts, [parts, rows, d](const Tensor& y) {
    const auto g = y.grad();
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t w = p.dim(-1);
      if (p.requires_grad()) {
        Tensor t = p;
        auto gp = t.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < w; ++i) gp[r * w + i] += g[r * d + offset + i];
        }
      }
      offset += w;
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  }
  const auto xv = x.data();
  Buffer out(xv.begin(), xv.end());
  return make_op_result(std::move(shape), std::move(out), {x}, [x](const Tensor& y) {
    accumulate_grad(x, y.grad());
  });
}

Tensor embedding(std::span<const std::int32_t> ids, const Shape& ids_shape, const Tensor& table) {
  if (table.rank() != 2) throw DimensionError("embedding table must be [V, D]");
  if (shape_numel(ids_shape) != ids.size()) throw DimensionError("ids do not match ids_shape");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  const auto tv = table.data();
  Buffer out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Shape s = ids_shape;
  s.push_back(d);
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return make_op_result(std::move(s), std::move(out), {table}, [table, idv = std::move(idv), d](const Tensor& y) {
    if (!table.requires_grad()) return;
    Tensor t = table;
    auto gt = t.mutable_grad();
    const auto g = y.grad();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      const std::size_t row = static_cast<std::size_t>(idv[i]) * d;
      for (std::size_t j = 0; j < d; ++j) gt[row + j] += g[i * d + j];
    }
  });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t dilation,
                        ConvPadding padding, const SeqLengths& lengths) {
  const SeqView v = seq_view(x, "depthwise_conv1d");
  if (kernel.rank() != 2 || kernel.dim(0) != v.channels) {
    throw DimensionError("depthwise kernel must be [" + std::to_string(v.channels) + ", K], got " +
                         shape_to_string(kernel.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{v.channels}) {
    throw DimensionError("depthwise bias must be [" + std::to_string(v.channels) + "]");
  }
  if (dilation == 0) throw ConfigError("dilation must be >= 1");
  const std::size_t k = kernel.dim(1);
  if (padding == ConvPadding::kSame && k % 2 == 0) {
    throw ConfigError("symmetric padding needs an odd kernel size, got K=" + std::to_string(k));
  }
  check_lengths(lengths, v.batch, v.length, "depthwise_conv1d");
  const std::size_t d = v.channels;
  const std::size_t n = v.length;
  // Signed tap offsets relative to the output position.
  std::vector<std::ptrdiff_t> offsets(k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto jj = static_cast<std::ptrdiff_t>(j);
    const auto kk = static_cast<std::ptrdiff_t>(k);
    const auto dil = static_cast<std::ptrdiff_t>(dilation);
    offsets[j] = padding == ConvPadding::kSame ? (jj - (kk - 1) / 2) * dil : -(kk - 1 - jj) * dil;
  }
  // Kernel transposed to [K, D] so the channel loop is contiguous.
  Buffer kt(k * d);
  const auto kv = kernel.data();
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t j = 0; j < k; ++j) kt[j * d + c] = kv[c * k + j];
  }
  const auto xv = x.data();
  Buffer out(x.numel(), 0.0);
  const double* bv = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t b = 0; b < v.batch; ++b) {
    const auto len = static_cast<std::ptrdiff_t>(row_length(lengths, b, n));
    for (std::size_t t = 0; t < n; ++t) {
      double* o = out.data() + (b * n + t) * d;
      if (bv) std::copy_n(bv, d, o);
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + offsets[j];
        if (src < 0 || src >= len) continue;
        const double* xi = xv.data() + (b * n + static_cast<std::size_t>(src)) * d;
        const double* w = kt.data() + j * d;
        for (std::size_t c = 0; c < d; ++c) o[c] += w[c] * xi[c];
      }
    }
  }
  return make_op_result(
      x.shape(), std::move(out), {x, kernel, bias},
      [x, kernel, bias, v, k, offsets, lengths, kt = std::move(kt)](const Tensor& y) {
        const std::size_t d = v.channels;
        const std::size_t n = v.length;
        const auto g = y.grad();
        const auto xv = x.data();
        Tensor xh = x, kh = kernel, bh = bias;
        double* gx = x.requires_grad() ? xh.mutable_grad().data() : nullptr;
        Buffer gk_t(kernel.requires_grad() ? k * d : 0, 0.0);
        double* gb = bias.defined() && bias.requires_grad() ? bh.mutable_grad().data() : nullptr;
        for (std::size_t b = 0; b < v.batch; ++b) {
          const auto len = static_cast<std::ptrdiff_t>(row_length(lengths, b, n));
          for (std::size_t t = 0; t < n; ++t) {
            const double* go = g.data() + (b * n + t) * d;
            if (gb) {
              for (std::size_t c = 0; c < d; ++c) gb[c] += go[c];
            }
            for (std::size_t j = 0; j < k; ++j) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + offsets[j];
              if (src < 0 || src >= len) continue;
              const std::size_t off = (b * n + static_cast<std::size_t>(src)) * d;
              if (gx) {
                const double* w = kt.data() + j * d;
                for (std::size_t c = 0; c < d; ++c) gx[off + c] += w[c] * go[c];
              }
              if (!gk_t.empty()) {
                double* gk = gk_t.data() + j * d;
                for (std::size_t c = 0; c < d; ++c) gk[c] += go[c] * xv[off + c];
              }
            }
          }
        }
        if (!gk_t.empty()) {
          auto gk = kh.mutable_grad();
          for (std::size_t c = 0; c < d; ++c) {
            for (std::size_t j = 0; j < k; ++j) gk[c * k + j] += gk_t[j * d + c];
          }
        }
      });
}

Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask) {
  const std::size_t vocab = logits.dim(-1);
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("cross_entropy_masked: " + std::to_string(rows) + " positions but " +
                         std::to_string(targets.size()) + " targets / " + std::to_string(mask.size()) + " mask");
  }
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw InputError("loss mask selects no positions");
  const auto lv = logits.data();
  Buffer probs(rows * vocab, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const auto tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
      throw InputError("target id " + std::to_string(tgt) + " outside vocabulary");
    }
    const double* row = lv.data() + r * vocab;
    double mx = row[0];
    for (std::size_t i = 1; i < vocab; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < vocab; ++i) z += std::exp(row[i] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[static_cast<std::size_t>(tgt)];
    for (std::size_t i = 0; i < vocab; ++i) probs[r * vocab + i] = std::exp(row[i] - lse);
  }
  Buffer out{total / static_cast<double>(count)};
  std::vector<std::int32_t> tv(targets.begin(), targets.end());
  std::vector<std::uint8_t> mv(mask.begin(), mask.end());
  return make_op_result({1}, std::move(out), {logits},
                        [logits, rows, vocab, count, probs = std::move(probs), tv = std::move(tv),
                         mv = std::move(mv)](const Tensor& y) {
                          if (!logits.requires_grad()) return;
                          Tensor t = logits;
                          auto gl = t.mutable_grad();
                          const double g = y.grad()[0] / static_cast<double>(count);
                          for (std::size_t r = 0; r < rows; ++r) {
                            if (!mv[r]) continue;
                            for (std::size_t i = 0; i < vocab; ++i) gl[r * vocab + i] += g * probs[r * vocab + i];
                            gl[r * vocab + static_cast<std::size_t>(tv[r])] -= g;
                          }
                        });
}

Tensor masked_mean_pool(const Tensor& x, const SeqLengths& lengths) {
  if (x.rank() != 3) throw DimensionError("masked_mean_pool expects [B, L, D], got " + shape_to_string(x.shape()));
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  check_lengths(lengths, batch, n, "masked_mean_pool");
  const auto xv = x.data();
  Buffer out(batch * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = row_length(lengths, b, n);
    if (len == 0) throw InputError("cannot pool sequence " + std::to_string(b) + ": every position is padding");
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t c = 0; c < d; ++c) out[b * d + c] += xv[(b * n + t) * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) out[b * d + c] /= static_cast<double>(len);
  }
  return make_op_result({batch, d}, std::move(out), {x}, [x, lengths, batch, n, d](const Tensor& y) {
    if (!x.requires_grad()) return;
    Tensor t = x;
    auto gx = t.mutable_grad();
    const auto g = y.grad();
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t len = row_length(lengths, b, n);
      const double inv = 1.0 / static_cast<double>(len);
      for (std::size_t tt = 0; tt < len; ++tt) {
        for (std::size_t c = 0; c < d; ++c) gx[(b * n + tt) * d + c] += g[b * d + c] * inv;
      }
    }
  });
}

double grad_norm(const std::vector<Tensor>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) total += g * g;
  }
  return std::sqrt(total);
}

}  // namespace wisteria
