// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/blocks.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "wisteria/errors.hpp"

namespace wisteria {

std::vector<std::size_t> dilation_schedule(std::size_t base, std::size_t num_gcmb) {
  if (base == 0) throw ConfigError("dilation base must be >= 1");
  std::vector<std::size_t> out;
  out.reserve(num_gcmb);
  std::size_t d = 1;
  for (std::size_t i = 0; i < num_gcmb; ++i) {
    if (i >= 2) d *= base;
    out.push_back(d);
  }
  return out;
}

std::size_t gate_dilation(std::size_t feature_dilation, std::size_t base) {
  if (base == 0) throw ConfigError("dilation base must be >= 1");
  return std::max<std::size_t>(1, feature_dilation / base);
}

// ---------------------------------------------------------------- GCMB

GcmbBlock GcmbBlock::init(const SsmConfig& ssm, std::size_t kernel, std::size_t dilation_a, std::size_t dilation_b,
                          Initializer& init) {
  if (kernel % 2 == 0) throw ConfigError("gcmb kernel size must be odd, got " + std::to_string(kernel));
  if (dilation_a == 0 || dilation_b == 0) throw ConfigError("gcmb dilations must be >= 1");
  const std::size_t d = ssm.d_model;
  GcmbBlock b;
  b.bimamba = BiMamba::init(ssm, init);
  const double bound = 1.0 / std::sqrt(static_cast<double>(kernel));
  b.conv_a_w = init.uniform({d, kernel}, -bound, bound);
  b.conv_a_b = Tensor::zeros({d}, true);
  b.conv_b_w = init.uniform({d, kernel}, -bound, bound);
  b.conv_b_b = Tensor::zeros({d}, true);
  b.dilation_a = dilation_a;
  b.dilation_b = dilation_b;
  b.mlp_w1 = init.truncated_normal({d, 2 * d}, kProjectionStd);
  b.mlp_b1 = Tensor::zeros({2 * d}, true);
  b.mlp_w2 = init.truncated_normal({2 * d, d}, kProjectionStd);
  b.mlp_b2 = Tensor::zeros({d}, true);
  b.ln_gamma = Tensor::full({d}, 1.0, true);
  b.ln_beta = Tensor::zeros({d}, true);
  return b;
}

Tensor GcmbBlock::forward(const Tensor& x, const SeqLengths& lengths) const {
  return fuse(bimamba.forward(x, lengths), lengths);
}

Tensor GcmbBlock::fuse(const Tensor& big_h, const SeqLengths& lengths) const {
  const Tensor h = gelu(depthwise_conv1d(big_h, conv_a_w, conv_a_b, dilation_a, ConvPadding::kSame, lengths));
  const Tensor g = sigmoid(depthwise_conv1d(big_h, conv_b_w, conv_b_b, dilation_b, ConvPadding::kSame, lengths));
  const Tensor fused = add(big_h, mul(h, g));
  const Tensor m = linear(gelu(linear(fused, mlp_w1, mlp_b1)), mlp_w2, mlp_b2);
  return layernorm(m, ln_gamma, ln_beta);
}

void GcmbBlock::collect(const std::string& prefix, ParamList& out) const {
  bimamba.collect(prefix + "bimamba.", out);
  out.push_back({prefix + "conv_a_w", conv_a_w, true});
  out.push_back({prefix + "conv_a_b", conv_a_b, false});
  out.push_back({prefix + "conv_b_w", conv_b_w, true});
  out.push_back({prefix + "conv_b_b", conv_b_b, false});
  out.push_back({prefix + "mlp_w1", mlp_w1, true});
  out.push_back({prefix + "mlp_b1", mlp_b1, false});
  out.push_back({prefix + "mlp_w2", mlp_w2, true});
  out.push_back({prefix + "mlp_b2", mlp_b2, false});
  out.push_back({prefix + "ln_gamma", ln_gamma, false});
  out.push_back({prefix + "ln_beta", ln_beta, false});
}

// ----------------------------------------------------------- gated MLP

GatedMlp GatedMlp::init(std::size_t dim, std::size_t hidden, Initializer& init) {
  if (dim == 0 || hidden == 0) throw ConfigError("gated mlp dimensions must be positive");
  GatedMlp m;
  m.w1 = init.truncated_normal({dim, 2 * hidden}, kProjectionStd);
  m.b1 = Tensor::zeros({2 * hidden}, true);
  m.w2 = init.truncated_normal({hidden, dim}, kProjectionStd);
  m.b2 = Tensor::zeros({dim}, true);
  return m;
}

Tensor GatedMlp::forward(const Tensor& y) const {
  auto [u, g] = split_last_dim_in_two(linear(y, w1, b1));
  return add(y, linear(mul(silu(u), sigmoid(g)), w2, b2));
}

void GatedMlp::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + "w1", w1, true});
  out.push_back({prefix + "b1", b1, false});
  out.push_back({prefix + "w2", w2, true});
  out.push_back({prefix + "b2", b2, false});
}

// ---------------------------------------------------- position encoding

std::vector<double> FopeParams::rope_frequencies(std::size_t d_head, double theta) {
  if (d_head == 0 || d_head % 2 != 0) throw ConfigError("d_head must be even, got " + std::to_string(d_head));
  std::vector<double> w(d_head / 2);
  for (std::size_t m = 0; m < w.size(); ++m) {
    w[m] = std::pow(theta, -2.0 * static_cast<double>(m) / static_cast<double>(d_head));
  }
  return w;
}

FopeParams FopeParams::init(std::size_t d_head, std::size_t train_len, std::size_t num_harmonics,
                            Initializer& init, double theta) {
  if (train_len == 0) throw ConfigError("FoPE train_len must be positive");
  FopeParams p;
  p.d_head = d_head;
  p.base_freqs = rope_frequencies(d_head, theta);
  p.cutoff = 2.0 * std::numbers::pi / static_cast<double>(train_len);
  p.num_harmonics = num_harmonics;
  const std::size_t pairs = d_head / 2;
  p.harmonic_freqs.assign(pairs * num_harmonics, 0.0);
  if (num_harmonics > 0) {
    for (std::size_t m = 0; m < pairs; ++m) {
      std::vector<double> pool;
      for (std::size_t j = 0; j < pairs; ++j) {
        if (j != m && p.base_freqs[j] >= p.cutoff) pool.push_back(p.base_freqs[j]);
      }
      if (pool.empty()) pool.push_back(p.base_freqs[m]);
      for (std::size_t j = 0; j < num_harmonics; ++j) {
        const auto pick = static_cast<std::size_t>(init.uniform() * static_cast<double>(pool.size()));
        p.harmonic_freqs[m * num_harmonics + j] = pool[std::min(pick, pool.size() - 1)];
      }
    }
    p.coeffs = init.normal({pairs, num_harmonics}, 0.02 / std::sqrt(static_cast<double>(num_harmonics)));
  } else {
    p.coeffs = Tensor::zeros({pairs, 1}, true);  // placeholder; never read
  }
  return p;
}

namespace {

struct PairLayout {
  std::size_t positions;  // L
  std::size_t outer;      // B
  std::size_t heads;
  std::size_t d_head;
};

PairLayout pair_layout(const Tensor& x, std::span<const double> positions, const char* what) {
  PairLayout lay{};
  if (x.rank() == 3) {
    lay = {x.dim(0), 1, x.dim(1), x.dim(2)};
  } else if (x.rank() == 4) {
    lay = {x.dim(1), x.dim(0), x.dim(2), x.dim(3)};
  } else {
    throw DimensionError(std::string(what) + " expects [L, H, d_head] or [B, L, H, d_head], got " +
                         shape_to_string(x.shape()));
  }
  if (lay.d_head % 2 != 0) throw ConfigError(std::string(what) + ": d_head must be even");
  if (!positions.empty() && positions.size() != lay.positions) {
    throw DimensionError(std::string(what) + ": positions length does not match L");
  }
  return lay;
}

double position_at(std::span<const double> positions, std::size_t t) {
  return positions.empty() ? static_cast<double>(t) : positions[t];
}

// Applies per-(position, pair) complex factors (fr + i fi); the backward of
// the multiplication with respect to x is the conjugate factor.
struct ComplexFactors {
  std::size_t positions = 0, pairs = 0;
  std::vector<double> re, im;  // [L, pairs]
};

Buffer apply_factors(const Tensor& x, const PairLayout& lay, const ComplexFactors& f, bool conjugate) {
  Buffer out(x.numel());
  const double* xv = x.data().data();
  const double sign = conjugate ? -1.0 : 1.0;
  const std::size_t pairs = lay.d_head / 2;
  for (std::size_t b = 0; b < lay.outer; ++b) {
    for (std::size_t t = 0; t < lay.positions; ++t) {
      const double* fr = f.re.data() + t * pairs;
      const double* fi = f.im.data() + t * pairs;
      for (std::size_t h = 0; h < lay.heads; ++h) {
        const std::size_t base = ((b * lay.positions + t) * lay.heads + h) * lay.d_head;
        for (std::size_t m = 0; m < pairs; ++m) {
          const double x0 = xv[base + 2 * m], x1 = xv[base + 2 * m + 1];
          const double r = fr[m], i = sign * fi[m];
          out[base + 2 * m] = x0 * r - x1 * i;
          out[base + 2 * m + 1] = x0 * i + x1 * r;
        }
      }
    }
  }
  return out;
}

}  // namespace

Tensor fope_rotate(const Tensor& x, const FopeParams& p, std::span<const double> positions) {
  const PairLayout lay = pair_layout(x, positions, "fope_rotate");
  if (lay.d_head != p.d_head) throw DimensionError("fope_rotate: d_head does not match FoPE parameters");
  const std::size_t pairs = lay.d_head / 2, nh = p.num_harmonics;
  const double* a = nh ? p.coeffs.data().data() : nullptr;

  ComplexFactors f;
  f.positions = lay.positions;
  f.pairs = pairs;
  f.re.assign(lay.positions * pairs, 1.0);
  f.im.assign(lay.positions * pairs, 0.0);
  for (std::size_t t = 0; t < lay.positions; ++t) {
    const double n = position_at(positions, t);
    for (std::size_t m = 0; m < pairs; ++m) {
      if (p.passes_through(m)) continue;
      double re = std::cos(p.base_freqs[m] * n), im = std::sin(p.base_freqs[m] * n);
      for (std::size_t j = 0; j < nh; ++j) {
        const double w = p.harmonic_freqs[m * nh + j];
        re += a[m * nh + j] * std::cos(w * n);
        im += a[m * nh + j] * std::sin(w * n);
      }
      f.re[t * pairs + m] = re;
      f.im[t * pairs + m] = im;
    }
  }
  Buffer out = apply_factors(x, lay, f, false);

  std::vector<Tensor> inputs{x};
  if (nh) inputs.push_back(p.coeffs);
  std::vector<double> pos(positions.begin(), positions.end());
  return make_op_result(
      x.shape(), std::move(out), inputs,
      [x, p, lay, f = std::move(f), pos = std::move(pos)](const Tensor& y) {
        const std::size_t pairs = lay.d_head / 2, nh = p.num_harmonics;
        const double* g = y.grad().data();
        if (x.requires_grad()) {
          Tensor gy = Tensor::from_buffer(y.shape(), Buffer(y.grad().begin(), y.grad().end()));
          const Buffer gx = apply_factors(gy, lay, f, true);
          accumulate_grad(x, gx);
        }
        if (nh && p.coeffs.requires_grad()) {
          // dL/dfr and dL/dfi summed over batch and heads, then chained into a.
          std::vector<double> gre(lay.positions * pairs, 0.0), gim(lay.positions * pairs, 0.0);
          const double* xv = x.data().data();
          for (std::size_t b = 0; b < lay.outer; ++b) {
            for (std::size_t t = 0; t < lay.positions; ++t) {
              for (std::size_t h = 0; h < lay.heads; ++h) {
                const std::size_t base = ((b * lay.positions + t) * lay.heads + h) * lay.d_head;
                for (std::size_t m = 0; m < pairs; ++m) {
                  const double x0 = xv[base + 2 * m], x1 = xv[base + 2 * m + 1];
                  const double g0 = g[base + 2 * m], g1 = g[base + 2 * m + 1];
                  gre[t * pairs + m] += g0 * x0 + g1 * x1;
                  gim[t * pairs + m] += g1 * x0 - g0 * x1;
                }
              }
            }
          }
          std::vector<double> ga(pairs * nh, 0.0);
          for (std::size_t t = 0; t < lay.positions; ++t) {
            const double n = position_at(pos, t);
            for (std::size_t m = 0; m < pairs; ++m) {
              if (p.passes_through(m)) continue;
              for (std::size_t j = 0; j < nh; ++j) {
                const double w = p.harmonic_freqs[m * nh + j];
                ga[m * nh + j] += gre[t * pairs + m] * std::cos(w * n) + gim[t * pairs + m] * std::sin(w * n);
              }
            }
          }
          accumulate_grad(p.coeffs, ga);
        }
      });
}

Tensor rope_rotate(const Tensor& x, double theta, std::span<const double> positions) {
  const PairLayout lay = pair_layout(x, positions, "rope_rotate");
  const std::size_t pairs = lay.d_head / 2;
  std::vector<double> cos_t(lay.positions * pairs), sin_t(lay.positions * pairs);
  for (std::size_t t = 0; t < lay.positions; ++t) {
    const double n = position_at(positions, t);
    for (std::size_t m = 0; m < pairs; ++m) {
      const double w = std::pow(theta, -2.0 * static_cast<double>(m) / static_cast<double>(lay.d_head));
      cos_t[t * pairs + m] = std::cos(w * n);
      sin_t[t * pairs + m] = std::sin(w * n);
    }
  }
  auto rotate = [lay, pairs](const double* in, double* out, const std::vector<double>& c,
                             const std::vector<double>& s, double sign) {
    for (std::size_t b = 0; b < lay.outer; ++b) {
      for (std::size_t t = 0; t < lay.positions; ++t) {
        for (std::size_t h = 0; h < lay.heads; ++h) {
          const std::size_t base = ((b * lay.positions + t) * lay.heads + h) * lay.d_head;
          for (std::size_t m = 0; m < pairs; ++m) {
            const double cs = c[t * pairs + m], sn = sign * s[t * pairs + m];
            const double x0 = in[base + 2 * m], x1 = in[base + 2 * m + 1];
            out[base + 2 * m] = cs * x0 - sn * x1;
            out[base + 2 * m + 1] = sn * x0 + cs * x1;
          }
        }
      }
    }
  };
  Buffer out(x.numel());
  rotate(x.data().data(), out.data(), cos_t, sin_t, 1.0);
  return make_op_result(x.shape(), std::move(out), {x},
                        [x, rotate, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](const Tensor& y) {
                          Buffer gx(x.numel());
                          rotate(y.grad().data(), gx.data(), cos_t, sin_t, -1.0);
                          accumulate_grad(x, gx);
                        });
}

// ----------------------------------------------------------- attention

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;
using ConstHeadMap = Eigen::Map<const RowMat, 0, Strided>;
using HeadMap = Eigen::Map<RowMat, 0, Strided>;

struct AttnDims {
  std::size_t batch, length, heads, d_head;
};

AttnDims attn_dims(const Tensor& q, const Tensor& k, const Tensor& v, const SeqLengths& lengths) {
  if (q.rank() != 4) throw DimensionError("attention expects q[B, L, H, d_head], got " + shape_to_string(q.shape()));
  if (k.shape() != q.shape() || v.shape() != q.shape()) throw DimensionError("attention q, k, v shapes differ");
  const AttnDims d{q.dim(0), q.dim(1), q.dim(2), q.dim(3)};
  if (!lengths.empty()) {
    if (lengths.size() != d.batch) throw DimensionError("attention lengths must have one entry per batch row");
    for (auto n : lengths) {
      if (n > d.length) throw DimensionError("attention length exceeds sequence length");
    }
  }
  return d;
}

// Computes masked softmax probabilities into probs[B, H, L, L].
void attention_probs(const double* q, const double* k, const AttnDims& d, const SeqLengths& lengths,
                     double* probs) {
  const auto ld = static_cast<Eigen::Index>(d.heads * d.d_head);
  const auto nl = static_cast<Eigen::Index>(d.length), dh = static_cast<Eigen::Index>(d.d_head);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.d_head));
  for (std::size_t b = 0; b < d.batch; ++b) {
    const std::size_t valid = lengths.empty() ? d.length : lengths[b];
    for (std::size_t h = 0; h < d.heads; ++h) {
      const std::size_t off = b * d.length * d.heads * d.d_head + h * d.d_head;
      ConstHeadMap qm(q + off, nl, dh, Strided(ld));
      ConstHeadMap km(k + off, nl, dh, Strided(ld));
      double* p = probs + (b * d.heads + h) * d.length * d.length;
      Eigen::Map<RowMat> pm(p, nl, nl);
      if (valid == 0) {
        pm.setZero();
        continue;
      }
      pm.noalias() = scale * (qm * km.transpose());
      for (std::size_t i = 0; i < d.length; ++i) {
        double* row = p + i * d.length;
        const double mx = *std::max_element(row, row + valid);
        double total = 0.0;
        for (std::size_t j = 0; j < valid; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        const double inv = 1.0 / total;
        for (std::size_t j = 0; j < valid; ++j) row[j] *= inv;
        std::fill(row + valid, row + d.length, 0.0);
      }
    }
  }
}

}  // namespace

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, const SeqLengths& lengths) {
  const AttnDims d = attn_dims(q, k, v, lengths);
  const auto ld = static_cast<Eigen::Index>(d.heads * d.d_head);
  const auto nl = static_cast<Eigen::Index>(d.length), dh = static_cast<Eigen::Index>(d.d_head);

  auto probs = std::make_shared<Buffer>(d.batch * d.heads * d.length * d.length);
  attention_probs(q.data().data(), k.data().data(), d, lengths, probs->data());

  Buffer out(q.numel());
  const double* vv = v.data().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < d.heads; ++h) {
      const std::size_t off = b * d.length * d.heads * d.d_head + h * d.d_head;
      Eigen::Map<const RowMat> pm(probs->data() + (b * d.heads + h) * d.length * d.length, nl, nl);
      ConstHeadMap vm(vv + off, nl, dh, Strided(ld));
      HeadMap om(out.data() + off, nl, dh, Strided(ld));
      om.noalias() = pm * vm;
    }
  }

  return make_op_result(q.shape(), std::move(out), {q, k, v}, [q, k, v, d, probs](const Tensor& y) {
    const auto ld = static_cast<Eigen::Index>(d.heads * d.d_head);
    const auto nl = static_cast<Eigen::Index>(d.length), dh = static_cast<Eigen::Index>(d.d_head);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d.d_head));
    Buffer gq(q.numel(), 0.0), gk(k.numel(), 0.0), gv(v.numel(), 0.0);
    RowMat gp(nl, nl);
    const double* g = y.grad().data();
    for (std::size_t b = 0; b < d.batch; ++b) {
      for (std::size_t h = 0; h < d.heads; ++h) {
        const std::size_t off = b * d.length * d.heads * d.d_head + h * d.d_head;
        Eigen::Map<const RowMat> pm(probs->data() + (b * d.heads + h) * d.length * d.length, nl, nl);
        ConstHeadMap gom(g + off, nl, dh, Strided(ld));
        ConstHeadMap qm(q.data().data() + off, nl, dh, Strided(ld));
        ConstHeadMap km(k.data().data() + off, nl, dh, Strided(ld));
        ConstHeadMap vm(v.data().data() + off, nl, dh, Strided(ld));
        HeadMap(gv.data() + off, nl, dh, Strided(ld)).noalias() += pm.transpose() * gom;
        gp.noalias() = gom * vm.transpose();
        // softmax backward: gs = p * (gp - rowsum(gp * p))
        for (Eigen::Index i = 0; i < nl; ++i) {
          const double dot = gp.row(i).dot(pm.row(i));
          gp.row(i) = (pm.row(i).array() * (gp.row(i).array() - dot)).matrix();
        }
        HeadMap(gq.data() + off, nl, dh, Strided(ld)).noalias() += scale * (gp * km);
        HeadMap(gk.data() + off, nl, dh, Strided(ld)).noalias() += scale * (gp.transpose() * qm);
      }
    }
    accumulate_grad(q, gq);
    accumulate_grad(k, gk);
    accumulate_grad(v, gv);
  });
}

PositionMode parse_position_mode(const std::string& name) {
  if (name == "fope") return PositionMode::kFope;
  if (name == "rope") return PositionMode::kRope;
  if (name == "none") return PositionMode::kNone;
  throw ConfigError("unknown attention mode '" + name + "' (expected fope, rope or none)");
}

std::string position_mode_name(PositionMode mode) {
  switch (mode) {
    case PositionMode::kFope:
      return "fope";
    case PositionMode::kRope:
      return "rope";
    case PositionMode::kNone:
      return "none";
  }
  return "none";
}

Attention Attention::init(std::size_t dim, std::size_t heads, PositionMode mode, std::size_t train_len,
                          std::size_t num_harmonics, Initializer& init) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  const std::size_t dh = dim / heads;
  if (dh % 2 != 0) throw ConfigError("attention d_head must be even, got " + std::to_string(dh));
  Attention a;
  a.heads = heads;
  a.mode = mode;
  a.wq = init.truncated_normal({dim, dim}, kProjectionStd);
  a.wk = init.truncated_normal({dim, dim}, kProjectionStd);
  a.wv = init.truncated_normal({dim, dim}, kProjectionStd);
  a.wo = init.truncated_normal({dim, dim}, kProjectionStd);
  if (mode == PositionMode::kFope) a.fope = FopeParams::init(dh, train_len, num_harmonics, init, a.theta);
  return a;
}

std::pair<Tensor, Tensor> Attention::positioned_qk(const Tensor& x3) const {
  const Shape split{x3.dim(0), x3.dim(1), heads, d_head()};
  Tensor q = reshape(matmul(x3, wq), split);
  Tensor k = reshape(matmul(x3, wk), split);
  switch (mode) {
    case PositionMode::kFope:
      q = fope_rotate(q, fope);
      k = fope_rotate(k, fope);
      break;
    case PositionMode::kRope:
      q = rope_rotate(q, theta);
      k = rope_rotate(k, theta);
      break;
    case PositionMode::kNone:
      break;
  }
  return {q, k};
}

Tensor Attention::forward(const Tensor& x, const SeqLengths& lengths) const {
  if (x.rank() == 2) {
    Tensor y = forward(reshape(x, {1, x.dim(0), x.dim(1)}), lengths);
    return reshape(y, x.shape());
  }
  if (x.rank() != 3 || x.dim(2) != wq.dim(0)) {
    throw DimensionError("attention expects [B, L, " + std::to_string(wq.dim(0)) + "], got " +
                         shape_to_string(x.shape()));
  }
  auto [q, k] = positioned_qk(x);
  const Tensor v = reshape(matmul(x, wv), q.shape());
  const Tensor o = attention_core(q, k, v, lengths);
  return matmul(reshape(o, x.shape()), wo);
}

Tensor Attention::logits(const Tensor& x) const {
  NoGradGuard guard;
  const Tensor x3 = x.rank() == 2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  auto [q, k] = positioned_qk(x3);
  const AttnDims d{q.dim(0), q.dim(1), q.dim(2), q.dim(3)};
  const auto ld = static_cast<Eigen::Index>(d.heads * d.d_head);
  const auto nl = static_cast<Eigen::Index>(d.length), dh = static_cast<Eigen::Index>(d.d_head);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.d_head));
  Buffer out(d.batch * d.heads * d.length * d.length);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < d.heads; ++h) {
      const std::size_t off = b * d.length * d.heads * d.d_head + h * d.d_head;
      ConstHeadMap qm(q.data().data() + off, nl, dh, Strided(ld));
      ConstHeadMap km(k.data().data() + off, nl, dh, Strided(ld));
      Eigen::Map<RowMat>(out.data() + (b * d.heads + h) * d.length * d.length, nl, nl).noalias() =
          scale * (qm * km.transpose());
    }
  }
  return Tensor::from_buffer({d.batch, d.heads, d.length, d.length}, std::move(out));
}

Tensor Attention::weights(const Tensor& x, const SeqLengths& lengths) const {
  NoGradGuard guard;
  const Tensor x3 = x.rank() == 2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  auto [q, k] = positioned_qk(x3);
  const AttnDims d = attn_dims(q, k, q, lengths);
  Buffer out(d.batch * d.heads * d.length * d.length);
  attention_probs(q.data().data(), k.data().data(), d, lengths, out.data());
  return Tensor::from_buffer({d.batch, d.heads, d.length, d.length}, std::move(out));
}

void Attention::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + "wq", wq, true});
  out.push_back({prefix + "wk", wk, true});
  out.push_back({prefix + "wv", wv, true});
  out.push_back({prefix + "wo", wo, true});
  if (mode == PositionMode::kFope && fope.num_harmonics > 0) out.push_back({prefix + "fope_coeffs", fope.coeffs, false});
}

}  // namespace wisteria
