// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/ssm.hpp"

#include <Eigen/Core>
#include <cmath>

#include "wisteria/errors.hpp"

namespace wisteria {

void SsmConfig::validate() const {
  if (d_model == 0 || expand == 0 || state_dim == 0 || conv_width == 0) {
    throw ConfigError("ssm dimensions (d_model, expand, state_dim, conv_width) must be positive");
  }
  if (!(dt_min > 0.0 && dt_max >= dt_min)) throw ConfigError("ssm dt range must satisfy 0 < dt_min <= dt_max");
}

namespace {

void exp_inplace(Buffer& v) {
  Eigen::Map<Eigen::ArrayXd> m(v.data(), static_cast<Eigen::Index>(v.size()));
  m = m.exp();
}

struct ScanDims {
  std::size_t batch, length, channels, state;
};

ScanDims scan_dims(const Tensor& x, const Tensor& delta, const Tensor& a_log, const Tensor& b, const Tensor& c,
                   const Tensor& d_skip) {
  if (x.rank() != 3) throw DimensionError("selective_scan expects x[B, L, C], got " + shape_to_string(x.shape()));
  const ScanDims d{x.dim(0), x.dim(1), x.dim(2), a_log.rank() == 2 ? a_log.dim(1) : 0};
  if (delta.shape() != x.shape()) throw DimensionError("selective_scan delta must match x");
  if (a_log.shape() != Shape{d.channels, d.state}) throw DimensionError("selective_scan a_log must be [C, N]");
  const Shape bc{d.batch, d.length, d.state};
  if (b.shape() != bc || c.shape() != bc) throw DimensionError("selective_scan B and C must be [B, L, N]");
  if (d_skip.shape() != Shape{d.channels}) throw DimensionError("selective_scan d_skip must be [C]");
  return d;
}

}  // namespace

Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a_log, const Tensor& b, const Tensor& c,
                      const Tensor& d_skip) {
  const ScanDims dims = scan_dims(x, delta, a_log, b, c, d_skip);
  const std::size_t nb = dims.batch, nl = dims.length, nc = dims.channels, ns = dims.state;
  Buffer a(nc * ns);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log.data()[i]);

  const double* xv = x.data().data();
  const double* dv = delta.data().data();
  const double* bv = b.data().data();
  const double* cv = c.data().data();
  const double* skip = d_skip.data().data();
  Buffer out(nb * nl * nc);
  Buffer h(nc * ns);
  Buffer decay(nc * ns);
  for (std::size_t bi = 0; bi < nb; ++bi) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < nl; ++t) {
      const std::size_t row = bi * nl + t;
      const double* bt = bv + row * ns;
      const double* ct = cv + row * ns;
      for (std::size_t ch = 0; ch < nc; ++ch) {
        const double dt = dv[row * nc + ch];
        for (std::size_t n = 0; n < ns; ++n) decay[ch * ns + n] = dt * a[ch * ns + n];
      }
      exp_inplace(decay);
      double step_sum = 0.0;
      const auto en = static_cast<Eigen::Index>(ns);
      Eigen::Map<const Eigen::ArrayXd> bt_a(bt, en), ct_a(ct, en);
      for (std::size_t ch = 0; ch < nc; ++ch) {
        const double xt = xv[row * nc + ch];
        const double dx = dv[row * nc + ch] * xt;
        Eigen::Map<Eigen::ArrayXd> hc(h.data() + ch * ns, en);
        hc = Eigen::Map<const Eigen::ArrayXd>(decay.data() + ch * ns, en) * hc + dx * bt_a;
        double y = (ct_a * hc).sum();
        y += skip[ch] * xt;
        out[row * nc + ch] = y;
        step_sum += y;
      }
      if (!std::isfinite(step_sum)) {
        throw NumericError("selective scan state became non-finite at step " + std::to_string(t) + " (batch row " +
                           std::to_string(bi) + ")");
      }
    }
  }

  return make_op_result(
      x.shape(), std::move(out), {x, delta, a_log, b, c, d_skip},
      [x, delta, a_log, b, c, d_skip, dims, a = std::move(a)](const Tensor& y) {
        using Arr = Eigen::Map<Eigen::ArrayXd>;
        using CArr = Eigen::Map<const Eigen::ArrayXd>;
        const std::size_t nb = dims.batch, nl = dims.length, nc = dims.channels, ns = dims.state;
        const auto en = static_cast<Eigen::Index>(ns);
        const double* g = y.grad().data();
        const double* xv = x.data().data();
        const double* dv = delta.data().data();
        const double* bv = b.data().data();
        const double* cv = c.data().data();
        const double* skip = d_skip.data().data();
        Buffer gx(x.numel(), 0.0), gd(x.numel(), 0.0), gs(nc, 0.0);
        Buffer gb(b.numel(), 0.0), gc(c.numel(), 0.0);
        Buffer ga(nc * ns, 0.0);      // dL/dA
        Buffer hs((nl + 1) * ns, 0.0);  // states of one channel, row 0 is h_0 = 0
        Buffer as(nl * ns);           // decays of one channel
        Eigen::ArrayXd carry(en), gh(en), gdecay(en);
        for (std::size_t bi = 0; bi < nb; ++bi) {
          for (std::size_t ch = 0; ch < nc; ++ch) {
            CArr ac(a.data() + ch * ns, en);
            // recompute the forward states of this channel
            for (std::size_t t = 0; t < nl; ++t) {
              Arr(as.data() + t * ns, en) = dv[(bi * nl + t) * nc + ch] * ac;
            }
            exp_inplace(as);
            for (std::size_t t = 0; t < nl; ++t) {
              const std::size_t row = bi * nl + t;
              const double dx = dv[row * nc + ch] * xv[row * nc + ch];
              Arr(hs.data() + (t + 1) * ns, en) =
                  CArr(as.data() + t * ns, en) * CArr(hs.data() + t * ns, en) + dx * CArr(bv + row * ns, en);
            }
            carry.setZero();
            Arr gac(ga.data() + ch * ns, en);
            for (std::size_t t = nl; t-- > 0;) {
              const std::size_t row = bi * nl + t;
              const std::size_t idx = row * nc + ch;
              const double gy = g[idx], dt = dv[idx], xt = xv[idx];
              CArr bt(bv + row * ns, en), ct(cv + row * ns, en);
              CArr ht(hs.data() + (t + 1) * ns, en), hp(hs.data() + t * ns, en), at(as.data() + t * ns, en);
              gh = gy * ct + carry;
              Arr(gc.data() + row * ns, en) += gy * ht;
              gdecay = gh * hp * at;
              gac += dt * gdecay;
              const double ghb = (gh * bt).sum();
              Arr(gb.data() + row * ns, en) += (dt * xt) * gh;
              carry = at * gh;
              gx[idx] += gy * skip[ch] + dt * ghb;
              gd[idx] += (gdecay * ac).sum() + xt * ghb;
              gs[ch] += gy * xt;
            }
          }
        }
        accumulate_grad(x, gx);
        accumulate_grad(delta, gd);
        accumulate_grad(b, gb);
        accumulate_grad(c, gc);
        accumulate_grad(d_skip, gs);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= a[i];
        accumulate_grad(a_log, ga);
      });
}

MambaStream MambaStream::init(const SsmConfig& cfg, Initializer& init) {
  cfg.validate();
  const std::size_t d = cfg.d_model, c = cfg.inner(), n = cfg.state_dim, r = cfg.resolved_dt_rank();
  MambaStream s;
  s.cfg = cfg;
  s.in_proj = init.truncated_normal({d, 2 * c}, kProjectionStd);
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(cfg.conv_width));
  s.conv_w = init.uniform({c, cfg.conv_width}, -conv_bound, conv_bound);
  s.conv_b = Tensor::zeros({c}, true);
  s.x_proj = init.truncated_normal({c, r + 2 * n}, kProjectionStd);
  s.dt_w = init.truncated_normal({r, c}, kProjectionStd);
  s.dt_b = Tensor::zeros({c}, true);
  {
    // softplus(bias) log-uniform in [dt_min, dt_max]
    auto bias = s.dt_b.mutable_data();
    const double lo = std::log(cfg.dt_min), hi = std::log(cfg.dt_max);
    for (auto& v : bias) {
      const double dt = std::exp(lo + (hi - lo) * init.uniform());
      v = dt + std::log(-std::expm1(-dt));
    }
  }
  s.a_log = Tensor::zeros({c, n}, true);
  {
    auto al = s.a_log.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t k = 0; k < n; ++k) al[ch * n + k] = std::log(static_cast<double>(k + 1));
    }
  }
  s.d_skip = Tensor::full({c}, 1.0, true);
  s.out_proj = init.truncated_normal({c, d}, kProjectionStd);
  return s;
}

Tensor MambaStream::forward(const Tensor& u) const {
  if (u.rank() == 2) {
    Tensor y = forward(reshape(u, {1, u.dim(0), u.dim(1)}));
    return reshape(y, u.shape());
  }
  if (u.rank() != 3 || u.dim(2) != cfg.d_model) {
    throw DimensionError("mamba stream expects [B, L, " + std::to_string(cfg.d_model) + "], got " +
                         shape_to_string(u.shape()));
  }
  const std::size_t n = cfg.state_dim, r = cfg.resolved_dt_rank();
  auto [xs, z] = split_last_dim_in_two(matmul(u, in_proj));
  xs = silu(depthwise_conv1d(xs, conv_w, conv_b, 1, ConvPadding::kCausal));
  auto parts = split_last(matmul(xs, x_proj), {r, n, n});
  Tensor delta = softplus(linear(parts[0], dt_w, dt_b));
  Tensor y = selective_scan(xs, delta, a_log, parts[1], parts[2], d_skip);
  y = mul(y, silu(z));
  return matmul(y, out_proj);
}

void MambaStream::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + "in_proj", in_proj, true});
  out.push_back({prefix + "conv_w", conv_w, true});
  out.push_back({prefix + "conv_b", conv_b, false});
  out.push_back({prefix + "x_proj", x_proj, true});
  out.push_back({prefix + "dt_w", dt_w, true});
  out.push_back({prefix + "dt_b", dt_b, false});
  out.push_back({prefix + "a_log", a_log, true});
  out.push_back({prefix + "d_skip", d_skip, true});
  out.push_back({prefix + "out_proj", out_proj, true});
}

BiMamba BiMamba::init(const SsmConfig& cfg, Initializer& init, bool tie_weights) {
  BiMamba m;
  m.fwd = MambaStream::init(cfg, init);
  m.tied = tie_weights;
  m.bwd = tie_weights ? m.fwd : MambaStream::init(cfg, init);
  return m;
}

Tensor BiMamba::forward(const Tensor& x, const SeqLengths& lengths) const {
  if (x.rank() == 2) {
    Tensor y = forward(reshape(x, {1, x.dim(0), x.dim(1)}), lengths);
    return reshape(y, x.shape());
  }
  Tensor forward_h = fwd.forward(x);
  Tensor backward_h = flip_valid(bwd.forward(flip_valid(x, lengths)), lengths);
  return scale(add(forward_h, backward_h), 0.5);
}

void BiMamba::collect(const std::string& prefix, ParamList& out) const {
  fwd.collect(prefix + "fwd.", out);
  if (!tied) bwd.collect(prefix + "bwd.", out);
}

}  // namespace wisteria
