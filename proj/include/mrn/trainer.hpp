#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mrn/data.hpp"
#include "mrn/model.hpp"

namespace mrn {

struct HyperParams {
  double lr = 0.1;
  std::vector<double> lr_drop_at{0.5, 0.75};  // epoch fractions; lr divides by 10 at each
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 128;
  int epochs = 10;
  uint64_t seed = 1;
  bool augment = true;
  double function_keep_p = 1.0;  // < 1 samples a Bernoulli configuration per mini-batch
  bool record_grad_norms = false;
  double stop_at_test_err = -1.0;  // >= 0 stops once the test error reaches it
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_err = 0.0;
  double test_err = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_grad_norms;  // populated when record_grad_norms is set
};

struct MomentumState {
  std::map<std::string, std::vector<double>> velocity;
};

/// v <- momentum*v - lr*(grad + weight_decay*theta); theta <- theta + v.
void sgd_update(std::span<double> param, std::span<const double> grad,
                std::span<double> velocity, double lr, double momentum, double weight_decay);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  int correct = 0;
};

/// One SGD step on an assembled batch. Weight decay skips norm betas and
/// biases. Throws if the loss is non-finite, reporting the step index.
StepResult sgd_step(Network& net, const Tensor& batch, const std::vector<int>& labels,
                    const HyperParams& hyper, double lr, MomentumState& state,
                    const Routes* routes, int64_t step_index);

/// Full training loop: seeded shuffling, per-image augmentation streams,
/// train-mode normalization during steps and eval mode for evaluation.
/// Bit-identical logs under a fixed seed.
TrainLog train(Network& net, const Dataset& train_set, const Dataset& test_set,
               const HyperParams& hyper);

/// Top-1 error rate in [0,1]. Eval mode; mutates nothing.
double evaluate(Network& net, const Dataset& dataset);

/// Stacks images into a [N,3,H,W] tensor, normalizing with the given stats.
Tensor make_batch(const std::vector<const LabeledImage*>& images,
                  const std::array<double, 3>& mean, const std::array<double, 3>& stddev);

void write_train_log_csv(const TrainLog& log, const std::string& path);

}  // namespace mrn
