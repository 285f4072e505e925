// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/autodiff/param_set.hpp"

#include <cstdio>
#include <cstring>

#include "adafuse/error.hpp"
#include "adafuse/rng.hpp"

namespace adafuse::ad {

void ParamSet::add(Tensor t) {
  if (!t.defined()) throw UsageError("ParamSet::add: undefined tensor");
  if (t.name().empty()) throw UsageError("ParamSet::add: parameter needs a name");
  if (index_.contains(t.name())) {
    throw UsageError("duplicate parameter name '" + t.name() + "'");
  }
  index_.emplace(t.name(), tensors_.size());
  tensors_.push_back(std::move(t));
}

void ParamSet::extend(const ParamSet& other) {
  for (const auto& t : other) add(t);
}

bool ParamSet::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

const Tensor& ParamSet::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
  return tensors_[it->second];
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& t : tensors_) out.push_back(t.name());
  return out;
}

void ParamSet::set_trainable(bool flag) const {
  for (auto t : tensors_) t.set_trainable(flag);
}

void ParamSet::set_trainable(const std::vector<std::string>& names, bool flag) const {
  for (const auto& n : names) {
    if (!contains(n)) throw UsageError("set_trainable: unknown parameter '" + n + "'");
  }
  for (const auto& n : names) {
    Tensor t = get(n);
    t.set_trainable(flag);
  }
}

void ParamSet::set_trainable_if(const std::function<bool(const std::string&)>& pred,
                                bool flag) const {
  for (auto t : tensors_) {
    if (pred(t.name())) t.set_trainable(flag);
  }
}

void ParamSet::zero_grad() const {
  for (auto t : tensors_) t.zero_grad();
}

void ParamSet::clear_grad() const {
  for (auto t : tensors_) t.clear_grad();
}

std::string tensor_digest(const Tensor& t) {
  std::uint64_t h = fnv1a(shape_str(t.shape()));
  const auto d = t.data();
  h = fnv1a(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)),
            h);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::map<std::string, std::string> digest_map(const ParamSet& params) {
  std::map<std::string, std::string> out;
  for (const auto& t : params) out.emplace(t.name(), tensor_digest(t));
  return out;
}

std::string set_digest(const ParamSet& params) {
  std::uint64_t h = fnv1a("");
  for (const auto& t : params) {
    h = fnv1a(t.name(), h);
    h = fnv1a(tensor_digest(t), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::vector<double>> snapshot_values(const ParamSet& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& t : params) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void restore_values(const ParamSet& params, const std::vector<std::vector<double>>& values) {
  if (values.size() != params.size()) throw UsageError("restore_values: size mismatch");
  std::size_t i = 0;
  for (auto t : params) {
    auto dst = t.mutable_data();
    if (dst.size() != values[i].size()) throw UsageError("restore_values: shape mismatch");
    std::memcpy(dst.data(), values[i].data(), dst.size() * sizeof(double));
    ++i;
  }
}

}  // namespace adafuse::ad
