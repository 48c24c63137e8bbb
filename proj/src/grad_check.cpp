// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/grad_check.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "wisteria/errors.hpp"
#include "wisteria/ops.hpp"

namespace wisteria {
namespace {

double weighted_sum(const Tensor& out, const std::vector<double>& w) {
  const auto v = out.data();
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) total += v[i] * w[i];
  return total;
}

}  // namespace

GradCheckReport GradChecker::check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                   std::vector<std::string> names) const {
  if (step_ <= 0.0) throw ConfigError("finite-difference step must be positive");
  for (std::size_t i = names.size(); i < inputs.size(); ++i) names.push_back("input" + std::to_string(i));

  std::vector<bool> saved_flags;
  for (auto& t : inputs) {
    saved_flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }

  std::vector<double> weights;
  Tensor base_out;
  {
    NoGradGuard no_grad;
    base_out = f();
    Tensor again = f();
    if (again.shape() != base_out.shape() ||
        std::memcmp(again.data().data(), base_out.data().data(), base_out.numel() * sizeof(double)) != 0) {
      throw OracleError("function under check is not deterministic");
    }
  }
  std::mt19937_64 rng(seed_);
  std::normal_distribution<double> normal(0.0, 1.0);
  weights.resize(base_out.numel());
  for (auto& w : weights) w = normal(rng);

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor out = f();
    if (!out.requires_grad()) throw OracleError("function output does not depend on the checked inputs");
    Tensor w = Tensor::from_data(out.shape(), weights);
    Tensor loss = sum(mul(out, w));
    tape.backward(loss);
    for (auto& t : inputs) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(t.numel(), 0.0);
      }
    }
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step_;
      const double plus = weighted_sum(f(), weights);
      values[i] = saved - step_;
      const double minus = weighted_sum(f(), weights);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step_);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++report.coordinates;
      if (!(err <= report.max_rel_error)) {
        report.max_rel_error = err;
        report.worst_tensor = names[k];
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    inputs[k].zero_grad();
    inputs[k].set_requires_grad(saved_flags[k]);
  }
  return report;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor input = x;
  return GradChecker(h).check([&] { return f(input); }, {input}, {"x"}).max_rel_error;
}

}  // namespace wisteria
