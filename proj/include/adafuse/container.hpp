// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "adafuse/autodiff/param_set.hpp"
#include "adafuse/json_util.hpp"

namespace adafuse {

inline constexpr std::uint32_t kContainerVersion = 1;

/// On-disk tensor container shared by backbone, adapter, fusion and head
/// checkpoints.
///
///   bytes 0-3    magic "ADPT"
///   bytes 4-7    format version, u32 little-endian
///   bytes 8-11   header length H, u32 little-endian
///   bytes 12..   UTF-8 JSON header of length H:
///                {config, fingerprint, metadata,
///                 tensors: [{name, shape, dtype: "f64", offset, byte_len}], ...}
///   payload      little-endian float64 values; offsets are relative to the
///                payload start and tensors appear in header order
struct Container {
  Json config;
  std::string fingerprint;
  Json metadata = Json::object();
  /// Extra top-level header fields (for example "members" for fusion).
  Json extra = Json::object();
  std::vector<ad::Tensor> tensors;

  const ad::Tensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

/// Writes to a temporary sibling and renames it into place, so a reader never
/// sees a half-written file.
void write_container(const std::filesystem::path& path, const Container& container);

/// Reads and validates the whole file before returning anything. Throws
/// FormatError on bad magic, version, header or truncated payload.
Container read_container(const std::filesystem::path& path);

/// Builds a container tensor list from a parameter set (values are copied).
std::vector<ad::Tensor> copy_tensors(const ad::ParamSet& params);

}  // namespace adafuse
