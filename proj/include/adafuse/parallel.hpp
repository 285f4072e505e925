// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace adafuse {

/// Runs fn(0..n-1) on up to `workers` threads. Each index runs exactly once.
/// If any call throws, the exception of the lowest failing index is rethrown
/// after every thread has finished.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace adafuse
