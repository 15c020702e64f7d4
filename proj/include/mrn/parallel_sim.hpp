#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrn/model.hpp"

namespace mrn::sim {

/// Analytical step-time model. Times are seconds, bandwidth is bytes/second.
struct CostModel {
  double t_fn = 0.0;      // per residual function, per effective sample
  double t_fixed = 0.0;   // per-step overhead: optimizer, stem, head
  double latency = 0.0;   // per transfer
  double bandwidth = 16e9;
  long warp = 32;         // thread-granularity quantum for batch rounding
};

enum class Strategy { Data, Model, Hybrid };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct SimScenario {
  std::string name;
  int n_blocks = 1;
  int k = 1;
  int batch_size = 1;
  int workers = 1;
  Strategy strategy = Strategy::Data;
  double act_bytes = 0.0;    // mean per-block input+output bytes per sample
  double model_bytes = 0.0;  // parameter bytes of the whole network
};

struct SimResult {
  double step_time = 0.0;  // compute + transfer + fixed
  double compute = 0.0;
  double transfer = 0.0;
  double fixed = 0.0;
};

/// Batch rounded up to the thread quantum: ceil(b/warp)*warp.
long effective_samples(long batch_per_worker, long warp);

/// The time model is linear in (t_fn, t_fixed, latency, 1/bandwidth); these
/// are the per-scenario coefficients, shared by the simulator and the
/// calibration fit.
struct CostCoeffs {
  double t_fn = 0.0;
  double t_fixed = 0.0;
  double latency = 0.0;
  double inv_bandwidth = 0.0;
};

CostCoeffs cost_coefficients(const SimScenario& scenario, long warp);

SimResult simulate_step(const SimScenario& scenario, const CostModel& model);

struct Observation {
  SimScenario scenario;
  double measured_seconds = 0.0;
};

/// Non-negative linear least squares over (t_fn, t_fixed, latency,
/// 1/bandwidth). Rejects rank-deficient observation sets, naming an
/// unidentifiable parameter.
CostModel calibrate(const std::vector<Observation>& observations, const CostModel& initial);

struct SpeedupRow {
  SimScenario deep;
  SimScenario multi;
  double deep_time = 0.0;
  double multi_time = 0.0;
  double speedup_pct = 0.0;  // (deep/multi - 1) * 100
};

/// Pairs each k=1 data-parallel scenario with the k>1 scenario of equal
/// function count (n_deep == n_multi * k) and batch size; unpaired
/// scenarios are rejected.
std::vector<SpeedupRow> speedup_table(const std::vector<SimScenario>& scenarios,
                                      const CostModel& model);

struct ScenarioBytes {
  double act_bytes = 0.0;
  double model_bytes = 0.0;
};

/// Byte inputs derived from a network configuration at the given value width
/// (4 for the float32 systems the model describes).
ScenarioBytes scenario_bytes(const NetworkConfig& config, int bytes_per_value = 4);

}  // namespace mrn::sim
