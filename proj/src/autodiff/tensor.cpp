// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/autodiff/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "adafuse/error.hpp"

namespace adafuse::ad {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::span<double> TensorImpl::ensure_grad() {
  if (!has_grad) {
    grad.assign(data.size(), 0.0);
    has_grad = true;
  }
  return grad;
}

void TensorImpl::accumulate_grad(std::span<const double> g) {
  auto dst = ensure_grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> data,
                                              std::string name) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extent must be positive, got " + shape_str(shape));
  }
  if (data.size() != shape_numel(shape)) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->name = std::move(name);
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, std::string name) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0), std::move(name)));
}

Tensor Tensor::full(Shape shape, double value, std::string name) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, value), std::move(name)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, std::string name) {
  return Tensor(make_impl(std::move(shape), std::move(data), std::move(name)));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::parameter(std::string name, Shape shape, std::vector<double> data,
                         bool trainable) {
  Tensor t(make_impl(std::move(shape), std::move(data), std::move(name)));
  t.set_trainable(trainable);
  return t;
}

std::size_t Tensor::rows() const {
  return rank() == 0 ? 1 : numel() / impl_->shape.back();
}

std::size_t Tensor::last_dim() const { return rank() == 0 ? 1 : impl_->shape.back(); }

double Tensor::item() const {
  if (numel() != 1) {
    throw UsageError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (!impl_->has_grad) throw UsageError("tensor '" + name() + "' has no gradient");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() { return impl_->ensure_grad(); }

void Tensor::zero_grad() {
  if (impl_->has_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
  impl_->has_grad = false;
}

void Tensor::set_trainable(bool flag) {
  impl_->trainable = flag;
  impl_->requires_grad = flag;
}

Tensor Tensor::clone() const {
  Tensor t(make_impl(impl_->shape, impl_->data, impl_->name));
  t.set_trainable(impl_->trainable);
  return t;
}

Tensor Tensor::detach() const { return Tensor(make_impl(impl_->shape, impl_->data, impl_->name)); }

void Tensor::assign(const Tensor& other) {
  if (other.shape() != shape()) {
    throw DimensionError("assign " + shape_str(other.shape()) + " into " + shape_str(shape()));
  }
  impl_->data = other.impl_->data;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    entries_.clear();
    return;
  }
  loss.impl()->ensure_grad()[0] += 1.0;
  // Each op writes its contribution into a fresh buffer which is then added
  // to any gradient already present, so a tensor used along several paths
  // receives exactly the sum of the per-path gradients.
  std::vector<std::pair<detail::TensorImpl*, std::vector<double>>> stash;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->has_grad) continue;
    stash.clear();
    for (const auto& in : it->inputs) {
      if (!in->requires_grad || !in->has_grad) continue;
      bool seen = false;
      for (const auto& s : stash) seen = seen || s.first == in.get();
      if (seen) continue;
      stash.emplace_back(in.get(), std::move(in->grad));
      in->grad.clear();
      in->has_grad = false;
    }
    it->backward();
    for (auto& [impl, old] : stash) {
      if (impl->has_grad) {
        for (std::size_t i = 0; i < old.size(); ++i) old[i] += impl->grad[i];
      }
      impl->grad = std::move(old);
      impl->has_grad = true;
    }
  }
  entries_.clear();
}

Tape& active_tape() {
  thread_local Tape tape;
  return tape;
}

NoGradGuard::NoGradGuard() { --active_tape().enabled_; }
NoGradGuard::~NoGradGuard() { ++active_tape().enabled_; }

void backward(const Tensor& loss) { active_tape().backward(loss); }

}  // namespace adafuse::ad
