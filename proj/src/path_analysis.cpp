#include "mrn/path_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mrn/trainer.hpp"

namespace mrn::paths {

namespace {

void check_nk(int n, int k) {
  if (n < 1 || k < 1) {
    throw std::invalid_argument("path analysis needs n >= 1 and k >= 1, got n=" +
                                std::to_string(n) + " k=" + std::to_string(k));
  }
}

}  // namespace

mpz_class PathDistribution::total() const {
  mpz_class t = 0;
  for (const mpz_class& c : counts) t += c;
  return t;
}

mpz_class multiplicity(int n, int k) {
  check_nk(n, k);
  mpz_class result;
  mpz_ui_pow_ui(result.get_mpz_t(), 2, static_cast<unsigned long>(k) * static_cast<unsigned long>(n));
  return result;
}

int path_depth_to_conv_layers(int depth, BlockKind kind) {
  if (depth < 0) throw std::invalid_argument("path depth must be non-negative");
  return depth * (kind == BlockKind::Basic ? 2 : 3);
}

PathDistribution path_depth_distribution(int n, int k) {
  check_nk(n, k);
  PathDistribution dist;
  dist.n = n;
  dist.k = k;
  dist.counts.resize(static_cast<size_t>(n) + 1);
  for (int d = 0; d <= n; ++d) {
    mpz_class binom, kpow;
    mpz_bin_uiui(binom.get_mpz_t(), static_cast<unsigned long>(n), static_cast<unsigned long>(d));
    mpz_ui_pow_ui(kpow.get_mpz_t(), static_cast<unsigned long>(k), static_cast<unsigned long>(d));
    dist.counts[static_cast<size_t>(d)] = binom * kpow;
  }
  return dist;
}

int ContributionCurve::mode() const {
  size_t best = 0;
  for (size_t d = 1; d < weights.size(); ++d) {
    if (weights[d] > weights[best]) best = d;
  }
  return static_cast<int>(best);
}

double ContributionCurve::mean() const {
  double m = 0.0;
  for (size_t d = 0; d < normalized.size(); ++d) m += static_cast<double>(d) * normalized[d];
  return m;
}

ContributionCurve gradient_contribution(int n, int k, double r) {
  check_nk(n, k);
  if (!(r > 0.0) || r > 1.0) {
    throw std::invalid_argument("decay factor must lie in (0,1], got " + std::to_string(r));
  }
  PathDistribution dist = path_depth_distribution(n, k);
  ContributionCurve curve;
  curve.n = n;
  curve.k = k;
  curve.decay = r;
  curve.weights.resize(dist.counts.size());
  const mpq_class rq(r);  // the double's exact binary value
  mpq_class rpow = 1;
  mpq_class total = 0;
  for (size_t d = 0; d < dist.counts.size(); ++d) {
    curve.weights[d] = mpq_class(dist.counts[d]) * rpow;
    total += curve.weights[d];
    rpow *= rq;
  }
  curve.normalized.resize(curve.weights.size());
  for (size_t d = 0; d < curve.weights.size(); ++d) {
    curve.normalized[d] = mpq_class(curve.weights[d] / total).get_d();
  }
  return curve;
}

EffectiveRange effective_range(const std::vector<mpq_class>& weights, double p) {
  if (!(p > 0.0) || !(p < 1.0)) {
    throw std::invalid_argument("coverage p must lie in (0,1), got " + std::to_string(p));
  }
  if (weights.empty()) throw std::invalid_argument("effective_range needs a non-empty curve");
  mpq_class total = 0;
  for (const mpq_class& w : weights) {
    if (w < 0) throw std::invalid_argument("curve weights must be non-negative");
    total += w;
  }
  if (total == 0) throw std::invalid_argument("curve has zero total mass");
  const mpq_class need = mpq_class(p) * total;

  const int n = static_cast<int>(weights.size());
  int best_a = 0, best_b = n - 1;
  mpq_class best_sum = total;
  bool found = false;
  // two-pointer scan over prefix windows; the first minimal window found has
  // the smallest a among ties
  mpq_class window = 0;
  int b = -1;
  for (int a = 0; a < n; ++a) {
    if (b < a - 1) {
      b = a - 1;
      window = 0;
    }
    while (window < need && b + 1 < n) {
      ++b;
      window += weights[static_cast<size_t>(b)];
    }
    if (window < need) break;  // no window starting at or after a can cover p
    if (!found || (b - a) < (best_b - best_a)) {
      found = true;
      best_a = a;
      best_b = b;
      best_sum = window;
    }
    window -= weights[static_cast<size_t>(a)];
  }
  if (!found) {
    // p of the mass is the whole support (possible only through rounding at
    // p ~ 1); fall back to the full range
    best_a = 0;
    best_b = n - 1;
    best_sum = total;
  }
  EffectiveRange range;
  range.a = best_a;
  range.b = best_b;
  range.p = p;
  range.coverage = mpq_class(best_sum / total).get_d();
  return range;
}

EffectiveRange effective_range(const ContributionCurve& curve, double p) {
  return effective_range(curve.weights, p);
}

ScalingReport compare_scaling(int n, int c, double r, double p) {
  check_nk(n, 1);
  if (c < 1) throw std::invalid_argument("scale factor c must be >= 1, got " + std::to_string(c));
  ScalingReport report;
  report.n = n;
  report.c = c;
  report.r = r;
  report.p = p;
  report.base = effective_range(gradient_contribution(n, 1, r), p);
  report.deeper = effective_range(gradient_contribution(c * n, 1, r), p);
  report.wider = c == 1 ? report.base : effective_range(gradient_contribution(n, c, r), p);
  report.deep_over_cb =
      report.base.b == 0 ? 0.0 : static_cast<double>(report.deeper.b) / (c * report.base.b);
  report.sublinear = report.deeper.b < c * report.base.b;
  return report;
}

namespace {

// Route set for one sampled path: `chosen` blocks run exactly one residual
// function with the skip dropped, all other shape-preserving blocks are
// skip-only. Downsampling blocks keep their full forward.
Routes path_routes(const Network& net, const std::vector<int>& chosen,
                   const std::vector<int>& eligible, std::mt19937_64& rng) {
  Routes routes(net.blocks.size());
  for (size_t b = 0; b < net.blocks.size(); ++b) {
    routes[b].include_skip = true;
    routes[b].function_mask.assign(net.blocks[b].functions.size(), true);
  }
  for (int b : eligible) {
    routes[static_cast<size_t>(b)].include_skip = true;
    routes[static_cast<size_t>(b)].function_mask.assign(
        net.blocks[static_cast<size_t>(b)].functions.size(), false);
  }
  for (int b : chosen) {
    auto& route = routes[static_cast<size_t>(b)];
    route.include_skip = false;
    const size_t k = net.blocks[static_cast<size_t>(b)].functions.size();
    std::uniform_int_distribution<size_t> pick(0, k - 1);
    route.function_mask[pick(rng)] = true;
  }
  return routes;
}

}  // namespace

PathGradientStats empirical_path_gradient(Network& net, const Dataset& data, int depth,
                                          int n_samples, std::mt19937_64& rng) {
  if (data.images.empty()) throw std::invalid_argument("empirical_path_gradient needs samples");
  if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
  const std::vector<int> eligible = net.lesionable_blocks();
  if (depth < 0 || depth > static_cast<int>(eligible.size())) {
    throw std::invalid_argument("path depth " + std::to_string(depth) + " exceeds the " +
                                std::to_string(eligible.size()) + " available blocks");
  }

  std::vector<double> norms;
  norms.reserve(static_cast<size_t>(n_samples));
  std::vector<int> pool = eligible;
  for (int s = 0; s < n_samples; ++s) {
    const LabeledImage& img = data.images[static_cast<size_t>(s) % data.images.size()];
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<int> chosen(pool.begin(), pool.begin() + depth);
    Routes routes = path_routes(net, chosen, eligible, rng);

    // normalize with dataset stats when available, raw pixels otherwise
    std::vector<double> px(img.pixels.values().begin(), img.pixels.values().end());
    if (data.has_stats) {
      const int64_t hw = img.pixels.dim(1) * img.pixels.dim(2);
      for (int64_t c = 0; c < img.pixels.dim(0); ++c) {
        for (int64_t i = 0; i < hw; ++i) {
          px[static_cast<size_t>(c * hw + i)] =
              (px[static_cast<size_t>(c * hw + i)] - data.mean[static_cast<size_t>(c)]) /
              data.stddev[static_cast<size_t>(c)];
        }
      }
    }
    Tensor input({1, img.pixels.dim(0), img.pixels.dim(1), img.pixels.dim(2)}, std::move(px));
    input.set_requires_grad(true);

    Tape tape;
    {
      TapeScope scope(tape);
      Tensor logits = net.forward(input, Mode::Eval, &routes);
      Tensor probe = sum(logits);
      backward(tape, probe);
    }
    double sq = 0.0;
    for (double g : input.grad()) sq += g * g;
    norms.push_back(std::sqrt(sq));
  }

  PathGradientStats stats;
  stats.depth = depth;
  stats.samples = n_samples;
  stats.mean_norm = std::accumulate(norms.begin(), norms.end(), 0.0) / norms.size();
  double var = 0.0;
  for (double v : norms) var += (v - stats.mean_norm) * (v - stats.mean_norm);
  stats.std_norm = norms.size() > 1 ? std::sqrt(var / (norms.size() - 1)) : 0.0;
  return stats;
}

double estimate_decay(Network& net, const Dataset& data, int max_depth, int samples_per_depth,
                      std::mt19937_64& rng) {
  if (max_depth < 1) throw std::invalid_argument("estimate_decay needs max_depth >= 1");
  std::vector<double> xs, ys;
  for (int d = 0; d <= max_depth; ++d) {
    PathGradientStats s = empirical_path_gradient(net, data, d, samples_per_depth, rng);
    if (s.mean_norm <= 0.0) continue;
    xs.push_back(static_cast<double>(d));
    ys.push_back(std::log(s.mean_norm));
  }
  if (xs.size() < 2) throw std::runtime_error("estimate_decay: too few usable depths");
  const double n = static_cast<double>(xs.size());
  const double sx = std::accumulate(xs.begin(), xs.end(), 0.0);
  const double sy = std::accumulate(ys.begin(), ys.end(), 0.0);
  double sxx = 0.0, sxy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return std::exp(slope);
}

std::vector<LesionRow> lesion_sweep(Network& net, const Dataset& test_set) {
  const double baseline = evaluate(net, test_set);
  std::vector<LesionRow> rows;
  rows.push_back({-1, baseline, baseline, 0.0});  // control: nothing dropped
  for (int b : net.lesionable_blocks()) {
    Network lesioned = drop_block(net, b);
    const double err = evaluate(lesioned, test_set);
    rows.push_back({b, baseline, err, err - baseline});
  }
  return rows;
}

}  // namespace mrn::paths
