#include "mrn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace mrn {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
  return splitmix64(splitmix64(seed ^ (a * 0x9e3779b97f4a7c15ull)) ^ b);
}

int argmax_row(std::span<const double> logits, int64_t row, int64_t k) {
  int best = 0;
  double best_v = logits[static_cast<size_t>(row * k)];
  for (int64_t j = 1; j < k; ++j) {
    const double v = logits[static_cast<size_t>(row * k + j)];
    if (v > best_v) {
      best_v = v;
      best = static_cast<int>(j);
    }
  }
  return best;
}

}  // namespace

void sgd_update(std::span<double> param, std::span<const double> grad,
                std::span<double> velocity, double lr, double momentum, double weight_decay) {
  for (size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    velocity[i] = momentum * velocity[i] - lr * (g + weight_decay * param[i]);
    param[i] += velocity[i];
  }
}

Tensor make_batch(const std::vector<const LabeledImage*>& images,
                  const std::array<double, 3>& mean, const std::array<double, 3>& stddev) {
  if (images.empty()) throw std::invalid_argument("batch must be non-empty");
  const int64_t c = images[0]->pixels.dim(0);
  const int64_t h = images[0]->pixels.dim(1);
  const int64_t w = images[0]->pixels.dim(2);
  const int64_t n = static_cast<int64_t>(images.size());
  std::vector<double> out(static_cast<size_t>(n * c * h * w));
  const int64_t hw = h * w;
  for (int64_t i = 0; i < n; ++i) {
    auto v = images[static_cast<size_t>(i)]->pixels.values();
    for (int64_t ch = 0; ch < c; ++ch) {
      const double m = mean[static_cast<size_t>(ch)];
      const double inv = 1.0 / stddev[static_cast<size_t>(ch)];
      double* dst = out.data() + (i * c + ch) * hw;
      const double* src = v.data() + ch * hw;
      for (int64_t p = 0; p < hw; ++p) dst[p] = (src[p] - m) * inv;
    }
  }
  return Tensor({n, c, h, w}, std::move(out));
}

StepResult sgd_step(Network& net, const Tensor& batch, const std::vector<int>& labels,
                    const HyperParams& hyper, double lr, MomentumState& state,
                    const Routes* routes, int64_t step_index) {
  Tape tape;
  StepResult result;
  {
    TapeScope scope(tape);
    Tensor logits = net.forward(batch, Mode::Train, routes);
    Tensor loss = softmax_cross_entropy(logits, labels);
    result.loss = loss.scalar_value();
    if (!std::isfinite(result.loss)) {
      throw std::runtime_error("training aborted: non-finite loss at step " +
                               std::to_string(step_index));
    }
    const int64_t k = logits.dim(1);
    for (int64_t i = 0; i < logits.dim(0); ++i) {
      if (argmax_row(logits.values(), i, k) == labels[static_cast<size_t>(i)]) ++result.correct;
    }
    backward(tape, loss);
  }

  double sq_norm = 0.0;
  net.for_each_parameter([&](const std::string& name, Tensor& t, const ParamInfo& info) {
    auto& vel = state.velocity[name];
    if (vel.empty()) vel.assign(static_cast<size_t>(t.numel()), 0.0);
    const double decay = info.decay_exempt ? 0.0 : hyper.weight_decay;
    if (hyper.record_grad_norms) {
      for (double g : t.grad()) sq_norm += g * g;
    }
    sgd_update(t.mutable_values(), t.grad(), vel, lr, hyper.momentum, decay);
  });
  result.grad_norm = std::sqrt(sq_norm);
  return result;
}

double evaluate(Network& net, const Dataset& dataset) {
  if (dataset.images.empty()) throw std::invalid_argument("cannot evaluate on an empty dataset");
  constexpr size_t kEvalBatch = 256;
  int64_t wrong = 0;
  for (size_t start = 0; start < dataset.images.size(); start += kEvalBatch) {
    const size_t end = std::min(start + kEvalBatch, dataset.images.size());
    std::vector<const LabeledImage*> ptrs;
    ptrs.reserve(end - start);
    for (size_t i = start; i < end; ++i) ptrs.push_back(&dataset.images[i]);
    Tensor batch = make_batch(ptrs, dataset.mean, dataset.stddev);
    Tensor logits = net.forward(batch, Mode::Eval);
    const int64_t k = logits.dim(1);
    for (int64_t i = 0; i < logits.dim(0); ++i) {
      if (argmax_row(logits.values(), i, k) != ptrs[static_cast<size_t>(i)]->label) ++wrong;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(dataset.images.size());
}

TrainLog train(Network& net, const Dataset& train_set, const Dataset& test_set,
               const HyperParams& hyper) {
  if (train_set.images.empty()) throw std::invalid_argument("train set is empty");
  if (!train_set.has_stats) throw std::invalid_argument("train set has no normalization stats");
  if (hyper.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");

  // The test set is normalized with the training-split statistics.
  Dataset test_view = test_set;
  test_view.mean = train_set.mean;
  test_view.stddev = train_set.stddev;

  TrainLog log;
  MomentumState state;
  std::mt19937_64 shuffle_rng(mix_seed(hyper.seed, 0x5u, 0));
  std::mt19937_64 route_rng(mix_seed(hyper.seed, 0x11u, 0));

  std::vector<size_t> order(train_set.images.size());
  std::iota(order.begin(), order.end(), 0u);

  int64_t step_index = 0;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double lr = hyper.lr;
    for (double frac : hyper.lr_drop_at) {
      if (epoch >= static_cast<int>(frac * hyper.epochs)) lr *= 0.1;
    }
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    int64_t seen = 0, correct = 0, steps = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(hyper.batch_size)) {
      const size_t end = std::min(start + static_cast<size_t>(hyper.batch_size), order.size());
      std::vector<LabeledImage> augmented;
      std::vector<const LabeledImage*> ptrs;
      std::vector<int> labels;
      augmented.reserve(end - start);
      for (size_t i = start; i < end; ++i) {
        const LabeledImage& img = train_set.images[order[i]];
        if (hyper.augment) {
          // one stream per (epoch, dataset index): batch composition cannot
          // perturb the augmentation draws
          std::mt19937_64 aug_rng(mix_seed(hyper.seed, static_cast<uint64_t>(epoch) + 1, order[i]));
          augmented.push_back(augment(img, aug_rng));
        } else {
          augmented.push_back(img);
        }
        labels.push_back(img.label);
      }
      for (const LabeledImage& img : augmented) ptrs.push_back(&img);
      Tensor batch = make_batch(ptrs, train_set.mean, train_set.stddev);

      Routes routes;
      const Routes* routes_ptr = nullptr;
      if (hyper.function_keep_p < 1.0) {
        routes = sample_configuration(net, hyper.function_keep_p, route_rng);
        routes_ptr = &routes;
      }
      StepResult res = sgd_step(net, batch, labels, hyper, lr, state, routes_ptr, step_index);
      if (hyper.record_grad_norms) log.step_grad_norms.push_back(res.grad_norm);
      loss_sum += res.loss;
      correct += res.correct;
      seen += static_cast<int64_t>(end - start);
      ++steps;
      ++step_index;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(std::max<int64_t>(steps, 1));
    rec.train_err = 1.0 - static_cast<double>(correct) / static_cast<double>(seen);
    rec.test_err = test_view.images.empty() ? 0.0 : evaluate(net, test_view);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);
    if (hyper.stop_at_test_err >= 0.0 && rec.test_err <= hyper.stop_at_test_err) break;
  }
  return log;
}

void write_train_log_csv(const TrainLog& log, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open log file for writing: " + path);
  os << "epoch,train_loss,train_err,test_err,seconds\n";
  char buf[160];
  for (const EpochRecord& r : log.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.3f\n", r.epoch, r.train_loss,
                  r.train_err, r.test_err, r.seconds);
    os << buf;
  }
}

}  // namespace mrn
