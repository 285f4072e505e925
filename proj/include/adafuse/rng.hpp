// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace adafuse {

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

/// SplitMix64 finalizer.
std::uint64_t splitmix64(std::uint64_t x);

/// Seed of the named substream of `seed`. Pure function of its inputs, so a
/// module's stream never depends on how much randomness another module drew.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

/// Portable random source.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The distributions are implemented here rather than taken from
/// <random> because the standard leaves those implementation-defined:
///   uniform()  = top 53 bits of one draw scaled to [0, 1)
///   normal()   = Box-Muller on two uniform() draws, both outputs used
///   below(n)   = rejection sampling on the raw 64-bit draw
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent generator for a named substream of this generator's seed.
  Rng derive(std::string_view label) const { return Rng(derive_seed(seed_, label)); }

  template <typename T>
  void shuffle(std::span<T> items) {
    // Fisher-Yates, highest index first.
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      using std::swap;
      swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace adafuse
