// SPDX-License-Identifier: Apache-2.0
//
// Agreement between two loss rankings, mapped onto [0, 1] where 1 is full
// agreement and 0 is exact reversal.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ps/core.hpp"

namespace ps {

enum class Correlation { kSpearman, kPearson, kKendall, kGamma };

inline std::string_view to_string(Correlation c) {
  switch (c) {
    case Correlation::kSpearman: return "spearman";
    case Correlation::kPearson: return "pearson";
    case Correlation::kKendall: return "kendall";
    case Correlation::kGamma: return "gamma";
  }
  return "?";
}

inline Correlation parse_correlation(std::string_view name) {
  if (name == "spearman") return Correlation::kSpearman;
  if (name == "pearson") return Correlation::kPearson;
  if (name == "kendall") return Correlation::kKendall;
  if (name == "gamma" || name == "kruskal") return Correlation::kGamma;
  throw ValidationError("unknown correlation '" + std::string(name) + "' (spearman|pearson|kendall|gamma)");
}

class InsufficientSampleError : public Error {
 public:
  using Error::Error;
};

/// Inputs for which the measure is undefined (constant lists, all pairs tied).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

struct AgreementScore {
  double value = 0.0;
  Correlation method = Correlation::kSpearman;
  std::size_t k = 0;
};

namespace detail {

inline void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ValidationError("agreement inputs differ in length: " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  if (a.size() < 2) throw InsufficientSampleError("agreement needs k >= 2 samples, got " + std::to_string(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw NumericError("agreement input contains a non-finite value");
}

inline bool constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
}

inline double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

// Inversion count of v[lo, hi) while merge sorting it ascending.
inline std::uint64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
  std::size_t i = lo, j = mid, o = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += mid - i;
      buf[o++] = v[j++];
    } else {
      buf[o++] = v[i++];
    }
  }
  while (i < mid) buf[o++] = v[i++];
  while (j < hi) buf[o++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

// Pairs tied within runs of equal values of a sorted sequence.
template <typename Eq>
std::uint64_t tied_pairs(std::size_t n, Eq equal) {
  std::uint64_t total = 0, run = 1;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i < n && equal(i - 1, i)) {
      ++run;
    } else {
      total += run * (run - 1) / 2;
      run = 1;
    }
  }
  return total;
}

/// Pair statistics via Knight's O(k log k) algorithm.
struct PairCounts {
  std::uint64_t total = 0;    // k(k-1)/2
  std::uint64_t ties_a = 0;   // pairs tied in a (including joint ties)
  std::uint64_t ties_b = 0;   // pairs tied in b (including joint ties)
  std::uint64_t ties_ab = 0;  // pairs tied in both
  std::uint64_t discordant = 0;

  std::int64_t concordant_minus_discordant() const {
    return static_cast<std::int64_t>(untied()) - 2 * static_cast<std::int64_t>(discordant);
  }
  std::uint64_t untied() const { return total - ties_a - ties_b + ties_ab; }  // C + D
};

inline PairCounts pair_counts(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    if (a[i] != a[j]) return a[i] < a[j];
    return b[i] < b[j];
  });
  PairCounts pc;
  pc.total = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  pc.ties_a = tied_pairs(n, [&](std::size_t i, std::size_t j) { return a[order[i]] == a[order[j]]; });
  pc.ties_ab = tied_pairs(n, [&](std::size_t i, std::size_t j) {
    return a[order[i]] == a[order[j]] && b[order[i]] == b[order[j]];
  });
  std::vector<double> bs(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) bs[i] = b[order[i]];
  pc.discordant = merge_count(bs, buf, 0, n);
  pc.ties_b = tied_pairs(n, [&](std::size_t i, std::size_t j) { return bs[i] == bs[j]; });
  return pc;
}

}  // namespace detail

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = r;
    i = j + 1;
  }
  return ranks;
}

/// alpha = 1 - 3 * sum d_i^2 / (k (k^2 - 1)), i.e. (1 + rho) / 2 for
/// tie-free input. Ties take average ranks; the result is clamped to [0, 1].
inline AgreementScore spearman_alpha(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  if (detail::constant(a) || detail::constant(b))
    throw DegenerateInputError("spearman agreement undefined for a constant list");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  double sum_d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = ra[i] - rb[i];
    sum_d2 += d * d;
  }
  const double k = static_cast<double>(a.size());
  return {detail::clamp01(1.0 - 3.0 * sum_d2 / (k * (k * k - 1.0))), Correlation::kSpearman, a.size()};
}

/// (r + 1) / 2 for Pearson's r on the raw values.
inline AgreementScore pearson_alpha(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  const double k = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / k;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / k;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateInputError("pearson agreement undefined for zero variance");
  const double r = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
  return {detail::clamp01((r + 1.0) / 2.0), Correlation::kPearson, a.size()};
}

/// (tau_b + 1) / 2.
inline AgreementScore kendall_alpha(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  const auto pc = detail::pair_counts(a, b);
  const std::uint64_t na = pc.total - pc.ties_a;
  const std::uint64_t nb = pc.total - pc.ties_b;
  if (na == 0 || nb == 0) throw DegenerateInputError("kendall agreement undefined when a list is constant");
  const double tau = static_cast<double>(pc.concordant_minus_discordant()) /
                     std::sqrt(static_cast<double>(na) * static_cast<double>(nb));
  return {detail::clamp01((tau + 1.0) / 2.0), Correlation::kKendall, a.size()};
}

/// (gamma + 1) / 2 with gamma = (C - D) / (C + D); tied pairs are ignored.
inline AgreementScore gamma_alpha(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  const auto pc = detail::pair_counts(a, b);
  if (pc.untied() == 0) throw DegenerateInputError("gamma agreement undefined when every pair is tied");
  const double g = static_cast<double>(pc.concordant_minus_discordant()) / static_cast<double>(pc.untied());
  return {detail::clamp01((g + 1.0) / 2.0), Correlation::kGamma, a.size()};
}

inline AgreementScore agreement(Correlation method, std::span<const double> a, std::span<const double> b) {
  switch (method) {
    case Correlation::kSpearman: return spearman_alpha(a, b);
    case Correlation::kPearson: return pearson_alpha(a, b);
    case Correlation::kKendall: return kendall_alpha(a, b);
    case Correlation::kGamma: return gamma_alpha(a, b);
  }
  throw ValidationError("unknown correlation method");
}

}  // namespace ps
