// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "adafuse/autodiff/tensor.hpp"

namespace adafuse::ad {

/// Ordered, uniquely named collection of parameter handles. Handles alias the
/// owning module's storage.
class ParamSet {
 public:
  void add(Tensor t);
  /// Appends every tensor of `other`; names must stay unique.
  void extend(const ParamSet& other);

  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  bool contains(std::string_view name) const;
  const Tensor& get(std::string_view name) const;
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>::const_iterator begin() const { return tensors_.begin(); }
  std::vector<Tensor>::const_iterator end() const { return tensors_.end(); }

  std::size_t scalar_count() const;
  std::vector<std::string> names() const;

  void set_trainable(bool flag) const;
  /// Applies `flag` to exactly the listed tensors; unknown names are a
  /// UsageError and nothing is changed.
  void set_trainable(const std::vector<std::string>& names, bool flag) const;
  void set_trainable_if(const std::function<bool(const std::string&)>& pred, bool flag) const;

  void zero_grad() const;
  void clear_grad() const;

 private:
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Hex FNV-1a digest over a tensor's shape and raw float64 bytes.
std::string tensor_digest(const Tensor& t);
/// Name -> digest for every tensor in the set.
std::map<std::string, std::string> digest_map(const ParamSet& params);
/// Digest of a whole set, in its order.
std::string set_digest(const ParamSet& params);

/// Deep copies of the values, used to restore early-stopping checkpoints.
std::vector<std::vector<double>> snapshot_values(const ParamSet& params);
void restore_values(const ParamSet& params, const std::vector<std::vector<double>>& values);

}  // namespace adafuse::ad
