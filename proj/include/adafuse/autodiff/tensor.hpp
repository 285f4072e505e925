// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace adafuse::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless has_grad
  bool has_grad = false;
  bool trainable = false;
  // Trainable leaf, or the output of a recorded op with a grad-requiring input.
  bool requires_grad = false;
  std::string name;

  void accumulate_grad(std::span<const double> g);
  std::span<double> ensure_grad();
};

}  // namespace detail

/// Shared handle to a dense float64 array. Copies alias the same storage;
/// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, std::string name = {});
  static Tensor full(Shape shape, double value, std::string name = {});
  static Tensor from(Shape shape, std::vector<double> data, std::string name = {});
  static Tensor scalar(double value);
  /// A named leaf that optimizers may update.
  static Tensor parameter(std::string name, Shape shape, std::vector<double> data,
                          bool trainable = true);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }
  /// Number of rows when the tensor is viewed as [rows x last_dim].
  std::size_t rows() const;
  std::size_t last_dim() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool has_grad() const { return impl_->has_grad; }
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  bool trainable() const { return impl_->trainable; }
  void set_trainable(bool flag);
  bool requires_grad() const { return impl_->requires_grad; }

  const std::string& name() const { return impl_->name; }
  void set_name(std::string name) { impl_->name = std::move(name); }

  /// Deep copy of values and flags; the copy has no grad and no history.
  Tensor clone() const;
  /// Deep copy of values only, never requiring grad.
  Tensor detach() const;
  /// Overwrite values from another tensor of identical shape.
  void assign(const Tensor& other);

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of executed primitive ops. Each forward builds it afresh;
/// backward() walks it once in reverse and then clears it.
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward;
  };

  bool enabled() const { return enabled_ > 0; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  void record(Entry entry) { entries_.push_back(std::move(entry)); }

  /// Reverse-mode sweep from a scalar loss. Throws UsageError when `loss`
  /// holds more than one value.
  void backward(const Tensor& loss);

 private:
  friend class NoGradGuard;
  int enabled_ = 1;
  std::vector<Entry> entries_;
};

/// The calling thread's tape. Tapes are never shared between threads.
Tape& active_tape();

/// Disables recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Backward on the active tape.
void backward(const Tensor& loss);

}  // namespace adafuse::ad
