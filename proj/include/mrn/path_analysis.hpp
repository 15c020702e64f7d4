#pragma once

#include <gmpxx.h>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mrn/data.hpp"
#include "mrn/model.hpp"

namespace mrn::paths {

/// Exact unraveled-path census for n blocks with k residual functions each:
/// N(d) = C(n,d) * k^d paths traverse exactly d functions, summing to
/// (k+1)^n over all depths.
struct PathDistribution {
  int n = 0;
  int k = 0;
  std::vector<mpz_class> counts;  // indexed by depth d = 0..n

  mpz_class total() const;
};

/// Number of on/off configurations of the k*n residual functions: 2^(k*n).
mpz_class multiplicity(int n, int k);

/// Path depth counts traversed residual functions; each contributes 2
/// convolution layers in a basic block and 3 in a bottleneck block.
int path_depth_to_conv_layers(int depth, BlockKind kind);

PathDistribution path_depth_distribution(int n, int k);

/// Per-depth gradient mass w(d) = N(d) * r^d for a geometric per-function
/// decay factor r, kept as exact rationals; floats only for presentation.
struct ContributionCurve {
  int n = 0;
  int k = 0;
  double decay = 1.0;
  std::vector<mpq_class> weights;
  std::vector<double> normalized;

  int mode() const;    // depth with the largest weight (smallest on ties)
  double mean() const; // weighted mean depth
};

ContributionCurve gradient_contribution(int n, int k, double r);

/// Minimal-width contiguous depth interval covering at least fraction p of
/// the total weight; ties broken toward the smaller lower bound.
struct EffectiveRange {
  int a = 0;
  int b = 0;
  double coverage = 0.0;
  double p = 0.0;
};

EffectiveRange effective_range(const std::vector<mpq_class>& weights, double p);
EffectiveRange effective_range(const ContributionCurve& curve, double p);

/// Effective ranges of (c*n blocks, k=1) versus (n blocks, k=c) at coverage
/// p, against the (n, k=1) baseline.
struct ScalingReport {
  int n = 0;
  int c = 1;
  double r = 1.0;
  double p = 0.95;
  EffectiveRange base;   // (n, 1)
  EffectiveRange deeper; // (c*n, 1)
  EffectiveRange wider;  // (n, c)
  double deep_over_cb = 0.0;  // deeper.b / (c * base.b)
  bool sublinear = false;     // deeper.b < c * base.b
};

ScalingReport compare_scaling(int n, int c, double r, double p);

/// Samples paths of a fixed depth d: d shape-preserving blocks route through
/// exactly one residual function with the skip dropped, every other
/// shape-preserving block is skip-only, and the input gradient 2-norm of a
/// linear probe (sum of logits) is recorded.
struct PathGradientStats {
  int depth = 0;
  int samples = 0;
  double mean_norm = 0.0;
  double std_norm = 0.0;
};

PathGradientStats empirical_path_gradient(Network& net, const Dataset& data, int depth,
                                          int n_samples, std::mt19937_64& rng);

/// Least-squares estimate of the geometric decay factor from
/// log mean-gradient-norm versus path depth.
double estimate_decay(Network& net, const Dataset& data, int max_depth, int samples_per_depth,
                      std::mt19937_64& rng);

struct LesionRow {
  int block_index = -1;  // -1 is the nothing-dropped control row
  double baseline_err = 0.0;
  double lesioned_err = 0.0;
  double delta = 0.0;
};

/// Evaluates the network with each shape-preserving block dropped in turn.
std::vector<LesionRow> lesion_sweep(Network& net, const Dataset& test_set);

}  // namespace mrn::paths
