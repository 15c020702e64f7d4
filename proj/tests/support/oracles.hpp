#pragma once

// Test-only oracles, independent of the library's compute paths: central
// finite differences for gradients and exhaustive enumeration for path
// combinatorics.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "mrn/tensor.hpp"

namespace oracles {

/// Central-difference gradient of a scalar functional with respect to the
/// entries of `target`. The functional must re-run the forward pass on each
/// call (it reads the perturbed values).
inline std::vector<double> finite_diff(const std::function<double()>& functional,
                                       mrn::Tensor& target, double h = 1e-5) {
  std::vector<double> grad(static_cast<size_t>(target.numel()));
  auto vals = target.mutable_values();
  for (size_t i = 0; i < vals.size(); ++i) {
    const double keep = vals[i];
    vals[i] = keep + h;
    const double up = functional();
    vals[i] = keep - h;
    const double down = functional();
    vals[i] = keep;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline double rel_error(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_error(a[i], b[i]));
  return worst;
}

/// Random values in [-1, 1], nudged away from zero so ReLU kinks cannot sit
/// inside a finite-difference stencil.
inline std::vector<double> random_values(size_t n, std::mt19937_64& rng, double kink_gap = 0.0) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) {
    x = dist(rng);
    if (kink_gap > 0.0 && std::fabs(x) < kink_gap) x = x < 0.0 ? -kink_gap : kink_gap;
  }
  return v;
}

/// Exhaustive census of the unraveled view: every block independently picks
/// skip or one of its k functions; returns the number of terms per depth
/// (depth = picks that are functions).
inline std::vector<uint64_t> enumerate_path_depths(int n, int k) {
  std::vector<uint64_t> counts(static_cast<size_t>(n) + 1, 0);
  std::vector<int> choice(static_cast<size_t>(n), 0);  // 0 = skip, 1..k = function
  while (true) {
    int depth = 0;
    for (int c : choice) depth += c > 0 ? 1 : 0;
    ++counts[static_cast<size_t>(depth)];
    int pos = 0;
    while (pos < n) {
      if (++choice[static_cast<size_t>(pos)] <= k) break;
      choice[static_cast<size_t>(pos)] = 0;
      ++pos;
    }
    if (pos == n) break;
  }
  return counts;
}

/// Number of distinct on/off assignments over all k*n functions, by direct
/// enumeration (small n*k only).
inline uint64_t enumerate_configurations(int n, int k) {
  const int bits = n * k;
  uint64_t count = 0;
  for (uint64_t mask = 0; mask < (1ull << bits); ++mask) ++count;
  return count;
}

/// O(n^2) window scan for the minimal interval covering fraction p, ties to
/// the smaller lower bound; the production code uses a different algorithm.
inline std::pair<int, int> window_scan_range(const std::vector<double>& w, double p) {
  const int n = static_cast<int>(w.size());
  double total = 0.0;
  for (double x : w) total += x;
  int best_a = 0, best_b = n - 1;
  for (int width = 0; width < n; ++width) {
    for (int a = 0; a + width < n; ++a) {
      double s = 0.0;
      for (int b = a; b <= a + width; ++b) s += w[static_cast<size_t>(b)];
      if (s >= p * total) return {a, a + width};
    }
  }
  return {best_a, best_b};
}

}  // namespace oracles
