#include "mrn/parallel_sim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mrn::sim {

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Data: return "data";
    case Strategy::Model: return "model";
    case Strategy::Hybrid: return "hybrid";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "data") return Strategy::Data;
  if (name == "model") return Strategy::Model;
  if (name == "hybrid") return Strategy::Hybrid;
  throw std::invalid_argument("unknown strategy '" + name + "' (expected data|model|hybrid)");
}

long effective_samples(long batch_per_worker, long warp) {
  if (batch_per_worker < 1) throw std::invalid_argument("batch per worker must be >= 1");
  if (warp < 1) throw std::invalid_argument("warp must be >= 1");
  return (batch_per_worker + warp - 1) / warp * warp;
}

namespace {

void validate(const SimScenario& s) {
  if (s.n_blocks < 1 || s.k < 1 || s.batch_size < 1 || s.workers < 1) {
    throw std::invalid_argument("scenario '" + s.name + "': blocks, k, batch and workers must be >= 1");
  }
  if (s.strategy == Strategy::Model) {
    if (s.workers != 2) {
      throw std::invalid_argument("scenario '" + s.name + "': model parallelism splits a block across 2 workers, got " +
                                  std::to_string(s.workers));
    }
    if (s.k % 2 != 0) {
      throw std::invalid_argument("scenario '" + s.name + "': model parallelism needs k divisible by the 2 workers, got k=" +
                                  std::to_string(s.k));
    }
  }
  if (s.strategy == Strategy::Hybrid) {
    if (s.workers % 2 != 0 || s.workers < 2) {
      throw std::invalid_argument("scenario '" + s.name + "': hybrid parallelism needs an even worker count, got " +
                                  std::to_string(s.workers));
    }
    if (s.k % 2 != 0) {
      throw std::invalid_argument("scenario '" + s.name + "': hybrid parallelism needs k divisible by 2, got k=" +
                                  std::to_string(s.k));
    }
  }
}

long ceil_div(long a, long b) { return (a + b - 1) / b; }

}  // namespace

CostCoeffs cost_coefficients(const SimScenario& s, long warp) {
  validate(s);
  CostCoeffs c;
  c.t_fixed = 1.0;
  const double n = static_cast<double>(s.n_blocks);
  switch (s.strategy) {
    case Strategy::Data: {
      // every worker runs all n*k functions on its slice; one model-sized
      // all-reduce afterwards
      const long per_worker = ceil_div(s.batch_size, s.workers);
      const double e = static_cast<double>(effective_samples(per_worker, warp));
      c.t_fn = n * s.k * e;
      c.latency = 1.0;
      c.inv_bandwidth = s.model_bytes;
      break;
    }
    case Strategy::Model: {
      // both workers see the full batch and compute k/2 functions per block;
      // each block ships its input out and its partial sum back
      const double e = static_cast<double>(effective_samples(s.batch_size, warp));
      c.t_fn = n * (s.k / 2.0) * e;
      c.latency = 2.0 * n;
      c.inv_bandwidth = n * static_cast<double>(s.batch_size) * s.act_bytes;
      break;
    }
    case Strategy::Hybrid: {
      // data parallelism across worker pairs, model parallelism inside each
      const long pairs = s.workers / 2;
      const long per_pair = ceil_div(s.batch_size, pairs);
      const double e = static_cast<double>(effective_samples(per_pair, warp));
      c.t_fn = n * (s.k / 2.0) * e;
      c.latency = 2.0 * n + 1.0;
      c.inv_bandwidth = n * static_cast<double>(per_pair) * s.act_bytes + s.model_bytes;
      break;
    }
  }
  return c;
}

SimResult simulate_step(const SimScenario& scenario, const CostModel& model) {
  const CostCoeffs c = cost_coefficients(scenario, model.warp);
  SimResult r;
  r.compute = c.t_fn * model.t_fn;
  r.transfer = c.latency * model.latency + c.inv_bandwidth / model.bandwidth;
  r.fixed = c.t_fixed * model.t_fixed;
  r.step_time = r.compute + r.transfer + r.fixed;
  return r;
}

namespace {

constexpr std::array<const char*, 4> kParamNames = {"t_fn", "t_fixed", "latency", "bandwidth"};

// Solves the symmetric system G x = b with Gaussian elimination over the
// free parameter subset. Returns false when a pivot collapses.
bool solve_subset(const std::array<std::array<double, 4>, 4>& gram,
                  const std::array<double, 4>& rhs, const std::array<bool, 4>& free_param,
                  std::array<double, 4>& x) {
  std::vector<int> idx;
  for (int i = 0; i < 4; ++i) {
    if (free_param[static_cast<size_t>(i)]) idx.push_back(i);
  }
  const int m = static_cast<int>(idx.size());
  std::vector<std::vector<double>> a(static_cast<size_t>(m), std::vector<double>(static_cast<size_t>(m) + 1));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) a[static_cast<size_t>(i)][static_cast<size_t>(j)] = gram[static_cast<size_t>(idx[static_cast<size_t>(i)])][static_cast<size_t>(idx[static_cast<size_t>(j)])];
    a[static_cast<size_t>(i)][static_cast<size_t>(m)] = rhs[static_cast<size_t>(idx[static_cast<size_t>(i)])];
  }
  for (int col = 0; col < m; ++col) {
    int pivot = col;
    for (int rr = col + 1; rr < m; ++rr) {
      if (std::fabs(a[static_cast<size_t>(rr)][static_cast<size_t>(col)]) > std::fabs(a[static_cast<size_t>(pivot)][static_cast<size_t>(col)])) pivot = rr;
    }
    if (std::fabs(a[static_cast<size_t>(pivot)][static_cast<size_t>(col)]) < 1e-30) return false;
    std::swap(a[static_cast<size_t>(col)], a[static_cast<size_t>(pivot)]);
    for (int rr = 0; rr < m; ++rr) {
      if (rr == col) continue;
      const double f = a[static_cast<size_t>(rr)][static_cast<size_t>(col)] / a[static_cast<size_t>(col)][static_cast<size_t>(col)];
      for (int cc = col; cc <= m; ++cc) a[static_cast<size_t>(rr)][static_cast<size_t>(cc)] -= f * a[static_cast<size_t>(col)][static_cast<size_t>(cc)];
    }
  }
  x = {0.0, 0.0, 0.0, 0.0};
  for (int i = 0; i < m; ++i) {
    x[static_cast<size_t>(idx[static_cast<size_t>(i)])] =
        a[static_cast<size_t>(i)][static_cast<size_t>(m)] / a[static_cast<size_t>(i)][static_cast<size_t>(i)];
  }
  return true;
}

}  // namespace

CostModel calibrate(const std::vector<Observation>& observations, const CostModel& initial) {
  if (observations.size() < 3) {
    throw std::invalid_argument("calibrate needs at least 3 observations, got " +
                                std::to_string(observations.size()));
  }
  const size_t m = observations.size();
  std::vector<std::array<double, 4>> design(m);
  std::vector<double> y(m);
  for (size_t i = 0; i < m; ++i) {
    const CostCoeffs c = cost_coefficients(observations[i].scenario, initial.warp);
    design[i] = {c.t_fn, c.t_fixed, c.latency, c.inv_bandwidth};
    y[i] = observations[i].measured_seconds;
    if (!(y[i] > 0.0)) {
      throw std::invalid_argument("observation '" + observations[i].scenario.name +
                                  "' has a non-positive measured time");
    }
  }

  // rank check on column-normalized design via Gram-Schmidt; a column that
  // collapses is unidentifiable from these observations
  {
    std::array<std::vector<double>, 4> cols;
    for (int j = 0; j < 4; ++j) {
      cols[static_cast<size_t>(j)].resize(m);
      double norm = 0.0;
      for (size_t i = 0; i < m; ++i) norm += design[i][static_cast<size_t>(j)] * design[i][static_cast<size_t>(j)];
      norm = std::sqrt(norm);
      if (norm < 1e-300) {
        throw std::invalid_argument(std::string("calibrate: parameter '") + kParamNames[static_cast<size_t>(j)] +
                                    "' is unidentifiable: its coefficient is zero in every observation");
      }
      for (size_t i = 0; i < m; ++i) cols[static_cast<size_t>(j)][i] = design[i][static_cast<size_t>(j)] / norm;
    }
    for (int j = 0; j < 4; ++j) {
      for (int prev = 0; prev < j; ++prev) {
        double dot = 0.0;
        for (size_t i = 0; i < m; ++i) dot += cols[static_cast<size_t>(j)][i] * cols[static_cast<size_t>(prev)][i];
        for (size_t i = 0; i < m; ++i) cols[static_cast<size_t>(j)][i] -= dot * cols[static_cast<size_t>(prev)][i];
      }
      double rem = 0.0;
      for (size_t i = 0; i < m; ++i) rem += cols[static_cast<size_t>(j)][i] * cols[static_cast<size_t>(j)][i];
      rem = std::sqrt(rem);
      if (rem < 1e-9) {
        throw std::invalid_argument(std::string("calibrate: rank-deficient observation set; parameter '") +
                                    kParamNames[static_cast<size_t>(j)] +
                                    "' cannot be separated from the preceding ones");
      }
      for (size_t i = 0; i < m; ++i) cols[static_cast<size_t>(j)][i] /= rem;
    }
  }

  std::array<std::array<double, 4>, 4> gram{};
  std::array<double, 4> rhs{};
  for (size_t i = 0; i < m; ++i) {
    for (int a = 0; a < 4; ++a) {
      rhs[static_cast<size_t>(a)] += design[i][static_cast<size_t>(a)] * y[i];
      for (int b = 0; b < 4; ++b) {
        gram[static_cast<size_t>(a)][static_cast<size_t>(b)] += design[i][static_cast<size_t>(a)] * design[i][static_cast<size_t>(b)];
      }
    }
  }

  // non-negativity by active-set projection: drop the most negative
  // parameter and re-solve until the remaining solution is feasible
  std::array<bool, 4> free_param = {true, true, true, true};
  std::array<double, 4> x{};
  for (int guard = 0; guard < 5; ++guard) {
    if (!solve_subset(gram, rhs, free_param, x)) {
      throw std::invalid_argument("calibrate: rank-deficient observation set; the normal equations are singular");
    }
    int worst = -1;
    double worst_v = -1e-12;
    for (int j = 0; j < 4; ++j) {
      if (free_param[static_cast<size_t>(j)] && x[static_cast<size_t>(j)] < worst_v) {
        worst = j;
        worst_v = x[static_cast<size_t>(j)];
      }
    }
    if (worst < 0) break;
    free_param[static_cast<size_t>(worst)] = false;
    x[static_cast<size_t>(worst)] = 0.0;
  }

  CostModel fitted = initial;
  fitted.t_fn = x[0];
  fitted.t_fixed = x[1];
  fitted.latency = x[2];
  fitted.bandwidth = x[3] > 0.0 ? 1.0 / x[3] : std::numeric_limits<double>::infinity();
  return fitted;
}

std::vector<SpeedupRow> speedup_table(const std::vector<SimScenario>& scenarios,
                                      const CostModel& model) {
  std::vector<const SimScenario*> deep, multi;
  for (const SimScenario& s : scenarios) {
    if (s.strategy == Strategy::Data && s.k == 1) {
      deep.push_back(&s);
    } else if (s.k > 1 && (s.strategy == Strategy::Model || s.strategy == Strategy::Hybrid)) {
      multi.push_back(&s);
    } else {
      throw std::invalid_argument("scenario '" + s.name +
                                  "' fits neither side of a deep/multi pairing");
    }
  }
  std::vector<SpeedupRow> rows;
  std::vector<bool> used(deep.size(), false);
  for (const SimScenario* ms : multi) {
    const long fn_units = static_cast<long>(ms->n_blocks) * ms->k;
    bool paired = false;
    for (size_t i = 0; i < deep.size(); ++i) {
      if (used[i]) continue;
      if (static_cast<long>(deep[i]->n_blocks) == fn_units && deep[i]->batch_size == ms->batch_size) {
        SpeedupRow row;
        row.deep = *deep[i];
        row.multi = *ms;
        row.deep_time = simulate_step(*deep[i], model).step_time;
        row.multi_time = simulate_step(*ms, model).step_time;
        row.speedup_pct = (row.deep_time / row.multi_time - 1.0) * 100.0;
        rows.push_back(std::move(row));
        used[i] = true;
        paired = true;
        break;
      }
    }
    if (!paired) {
      throw std::invalid_argument("scenario '" + ms->name +
                                  "' has no k=1 partner with equal function count and batch size");
    }
  }
  for (size_t i = 0; i < deep.size(); ++i) {
    if (!used[i]) {
      throw std::invalid_argument("scenario '" + deep[i]->name + "' has no multi-function partner");
    }
  }
  return rows;
}

ScenarioBytes scenario_bytes(const NetworkConfig& config, int bytes_per_value) {
  Network net = build_network(config, 0);
  ScenarioBytes out;
  out.model_bytes = static_cast<double>(count_parameters(net)) * bytes_per_value;
  double io_sum = 0.0;
  int64_t h = config.input_shape[1], w = config.input_shape[2];
  for (const Block& b : net.blocks) {
    const int64_t in_hw = h * w;
    if (b.stride == 2) {
      h = (h - 1) / 2 + 1;
      w = (w - 1) / 2 + 1;
    }
    io_sum += static_cast<double>(b.in_channels * in_hw + b.out_channels * h * w) * bytes_per_value;
  }
  out.act_bytes = io_sum / static_cast<double>(net.blocks.size());
  return out;
}

}  // namespace mrn::sim
