// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "moekd/error.hpp"

namespace moekd {

inline constexpr std::size_t kWilcoxonExactLimit = 25;

struct WilcoxonResult {
  double p_value = 1.0;
  double w_plus = 0.0;  // sum of ranks of positive differences
  std::size_t n = 0;    // nonzero differences
  bool exact = true;
};

/// Average ranks (1-based) of |values|, ties receiving their mid-rank.
inline std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = static_cast<double>(i + j + 2) / 2.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped and tied magnitudes mid-ranked. For n <= 25 the null
/// distribution of W+ is computed exactly (by counting sign assignments
/// per rank sum); above that a normal approximation with continuity and
/// tie corrections is used.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgument("wilcoxon needs paired vectors of equal length");
  std::vector<double> diffs, mags;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    if (d != 0.0) {
      diffs.push_back(d);
      mags.push_back(std::abs(d));
    }
  }
  const std::size_t n = diffs.size();
  if (n < 5) {
    throw InvalidArgument("wilcoxon needs at least 5 nonzero differences, got " + std::to_string(n));
  }
  const auto ranks = midranks(mags);
  WilcoxonResult r;
  r.n = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (diffs[i] > 0.0) r.w_plus += ranks[i];
  }

  if (n <= kWilcoxonExactLimit) {
    // Mid-ranks are multiples of 1/2, so doubled ranks are integers.
    std::vector<std::size_t> doubled(n);
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      doubled[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
      total += doubled[i];
    }
    std::vector<double> count(total + 1, 0.0);
    count[0] = 1.0;
    for (const auto rk : doubled) {
      for (std::size_t s = total; s >= rk; --s) {
        count[s] += count[s - rk];
        if (s == rk) break;
      }
    }
    const auto w = static_cast<std::size_t>(std::llround(2.0 * r.w_plus));
    double le = 0.0, ge = 0.0;
    for (std::size_t s = 0; s <= total; ++s) {
      if (s <= w) le += count[s];
      if (s >= w) ge += count[s];
    }
    const double all = std::ldexp(1.0, static_cast<int>(n));
    r.p_value = std::min(1.0, 2.0 * std::min(le, ge) / all);
    r.exact = true;
    return r;
  }

  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  double tie_term = 0.0;
  {
    auto sorted = mags;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie_term += t * t * t - t;
      i = j + 1;
    }
  }
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
  const double z = std::max(0.0, std::abs(r.w_plus - mean) - 0.5) / std::sqrt(var);
  r.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  r.exact = false;
  return r;
}

/// Cliff's delta: (#{x_i > y_j} - #{x_i < y_j}) / (|x| |y|).
inline double cliffs_delta(std::span<const double> x, std::span<const double> y) {
  if (x.empty() || y.empty()) throw InvalidArgument("cliff's delta needs non-empty vectors");
  long long dominance = 0;
  for (const double a : x) {
    for (const double b : y) dominance += (a > b) - (a < b);
  }
  return static_cast<double>(dominance) / (static_cast<double>(x.size()) * static_cast<double>(y.size()));
}

/// negligible (< 0.147), small (< 0.33), medium (< 0.474), large.
inline std::string effect_size_label(double delta) {
  const double m = std::abs(delta);
  if (m < 0.147) return "negligible";
  if (m < 0.33) return "small";
  if (m < 0.474) return "medium";
  return "large";
}

}  // namespace moekd
