// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "wisteria/memory.hpp"

namespace wisteria {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_to_string(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

// Dense row-major f64 array with optional gradient slot. Copies share the
// underlying node (handle semantics), so a parameter captured by an op and
// the same parameter held by a module see one gradient buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor from_buffer(Shape shape, Buffer values);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; only legal outside of a recorded computation
  // (parameter updates, test fixtures).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates zeros on first use
  void zero_grad();

  // New leaf holding a copy of the values, outside of any tape.
  Tensor detach() const;
  Tensor clone() const;

  // Throws NumericError when any value is NaN or infinite.
  void check_finite(const std::string& what) const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }
  detail::TensorNode* node() const noexcept { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  friend class Tape;
  friend Tensor make_op_result(Shape, Buffer, const std::vector<Tensor>&,
                               std::function<void(const Tensor&)>);

  std::shared_ptr<detail::TensorNode> node_;
};

// Ordered record of differentiable operations executed while the tape is
// active on the current thread. Tapes nest: constructing one installs it,
// destroying it restores the previous tape. Without an active tape nothing
// is recorded and ops run in inference mode.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& output)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() noexcept;

  void record(const Tensor& output, BackwardFn fn);
  std::size_t size() const noexcept { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1 and walks entries in exact reverse recording
  // order. Intermediate gradients are released once consumed, so repeated
  // calls accumulate only into leaves.
  void backward(const Tensor& loss);
  void clear() noexcept { entries_.clear(); }

 private:
  struct Entry {
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
};

// Suspends recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// Runs backward on the current tape. Throws UsageError for a non-scalar loss
// or when no tape is active.
void backward(const Tensor& loss);

// Builds an op output. When a tape is active and any input requires grad,
// the output requires grad and `fn` is recorded; otherwise fn is dropped.
Tensor make_op_result(Shape shape, Buffer values, const std::vector<Tensor>& inputs,
                      std::function<void(const Tensor&)> fn);

// Adds `values` into the gradient of `t` if it requires grad.
void accumulate_grad(const Tensor& t, std::span<const double> values);

}  // namespace wisteria
