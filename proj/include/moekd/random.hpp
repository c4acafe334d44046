// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <utility>

#include "moekd/hash.hpp"

namespace moekd {

/// SplitMix64: a 64-bit counter-based generator. The state is a Weyl
/// sequence (counter += 0x9E3779B97F4A7C15) and each output is the mix64
/// finalizer of the counter. Every derived quantity below (bounded
/// integers, unit reals, shuffles) is defined bit-exactly in
/// docs/format.md so other implementations can reproduce seeded runs.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit constexpr SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    state_ += kGamma;
    return mix64(state_);
  }

  /// Uniform integer in [0, bound). Rejection sampling on the top of the
  /// range, so the result is unbiased and platform independent.
  constexpr std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) return 0;
    const std::uint64_t limit = max() - (max() % bound);
    std::uint64_t r = (*this)();
    while (r >= limit) r = (*this)();
    return r % bound;
  }

  /// Uniform integer in [lo, hi] (inclusive).
  constexpr std::int64_t between(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(below(span));
  }

  /// Uniform real in [0, 1) with 53 random bits.
  constexpr double unit() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  /// Uniform real in [lo, hi).
  constexpr double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * unit(); }

  constexpr std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

/// Fisher-Yates shuffle driven by SplitMix64::below, from the back.
template <typename T>
void shuffle(std::span<T> items, SplitMix64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

/// Derives an independent stream seed from a base seed and a label.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return mix64(seed ^ fnv1a64(label));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(seed + mix64(index + SplitMix64::kGamma));
}

}  // namespace moekd
