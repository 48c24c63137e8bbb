// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/tensor.hpp"

#include <cmath>
#include <sstream>

#include "wisteria/errors.hpp"

namespace wisteria {
namespace {

thread_local Tape* t_current_tape = nullptr;

detail::TensorNode& checked(const std::shared_ptr<detail::TensorNode>& node) {
  if (!node) throw UsageError("operation on an undefined tensor");
  return *node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  Tensor t = zeros(std::move(shape), requires_grad);
  std::copy(values.begin(), values.end(), t.node_->data.begin());
  return t;
}

Tensor Tensor::from_buffer(Shape shape, Buffer values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(s));
  }
  return s[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return checked(node_).data.size(); }

std::span<const double> Tensor::data() const { return checked(node_).data; }

std::span<double> Tensor::mutable_data() { return checked(node_).data; }

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_to_string(s));
  std::size_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v >= s[i]) throw DimensionError("index out of range for " + shape_to_string(s));
    flat = flat * s[i] + v;
    ++i;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool value) { checked(node_).requires_grad = value; }

bool Tensor::is_leaf() const { return checked(node_).is_leaf; }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

std::span<double> Tensor::mutable_grad() {
  auto& n = checked(node_);
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = checked(node_);
  if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = shape();
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

void Tensor::check_finite(const std::string& what) const {
  const auto& d = checked(node_).data;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NumericError(what + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

Tape::Tape() : previous_(t_current_tape) { t_current_tape = this; }

Tape::~Tape() { t_current_tape = previous_; }

Tape* Tape::current() noexcept { return t_current_tape; }

void Tape::record(const Tensor& output, BackwardFn fn) { entries_.push_back({output, std::move(fn)}); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " +
                     (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw UsageError("loss does not depend on any tensor requiring grad");
  for (auto& e : entries_) Buffer().swap(e.output.node_->grad);
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->fn(it->output);
    // Consumed; leaves keep theirs.
    if (!it->output.is_leaf()) Buffer().swap(it->output.node_->grad);
  }
}

NoGradGuard::NoGradGuard() : saved_(t_current_tape) { t_current_tape = nullptr; }

NoGradGuard::~NoGradGuard() { t_current_tape = saved_; }

void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (!tape) throw UsageError("backward called without an active tape");
  tape->backward(loss);
}

Tensor make_op_result(Shape shape, Buffer values, const std::vector<Tensor>& inputs,
                      std::function<void(const Tensor&)> fn) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->is_leaf = false;
  Tensor out(std::move(node));
  Tape* tape = Tape::current();
  if (tape) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
    if (needs) {
      out.node_->requires_grad = true;
      tape->record(out, std::move(fn));
    }
  }
  return out;
}

void accumulate_grad(const Tensor& t, std::span<const double> values) {
  if (!t.defined() || !t.requires_grad()) return;
  auto& g = t.node()->grad;
  if (g.empty()) {
    g.assign(values.begin(), values.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

}  // namespace wisteria
