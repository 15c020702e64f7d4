#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mrn {

enum class Mode { Train, Eval };

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward touches this tensor
};

/// Dense 64-bit float tensor, row-major. Copies share the underlying
/// storage; values are immutable after construction except through
/// mutable_values() (parameter updates) and the grad slot.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);
  explicit Tensor(Shape shape);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->values.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }

  std::span<const double> values() const { return impl_->values; }
  std::span<double> mutable_values() { return impl_->values; }
  double scalar_value() const;

  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }
  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }

  /// Deep copy: fresh storage, same values; grad not copied.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }
  TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations. Each entry accumulates
/// input gradients from its output's gradient when replayed; replaying in
/// reverse recording order visits every operation exactly once.
class Tape {
 public:
  struct Entry {
    std::function<void()> backward;
    std::vector<std::shared_ptr<TensorImpl>> touched;  // inputs + output
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

/// Activates a tape for the current thread; ops record onto the active
/// tape whenever an input requires gradients. Scopes nest.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
};
RunningStats make_running_stats(int64_t channels);

// --- operations ------------------------------------------------------------

/// Cross-correlation of input [N,C,H,W] with weight [F,C,kh,kw].
/// kh, kw must be odd; the output size is floor((H + 2*pad - kh)/stride) + 1,
/// and a kernel larger than the padded input is rejected.
Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int pad);

/// Per-channel normalization of [N,C,H,W]. Train mode uses batch moments and
/// updates the running stats in place; eval mode reads the running stats.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  RunningStats& stats, Mode mode, double eps = 1e-5,
                  double momentum = 0.9);

Tensor relu(const Tensor& input);

/// input [N,D] * weight [D,M] + bias [M].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);

/// Spatial mean: [N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& input);

/// Mean negative log-likelihood over the batch, stabilized by
/// max-subtraction. labels[i] must lie in [0, K).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Sum of all elements -> scalar tensor of shape [1].
Tensor sum(const Tensor& input);

/// Accumulates gradients for every tensor recorded on the tape, seeding the
/// scalar loss with 1. Grad slots touched by the tape are reset first, so
/// running backward twice from the same tape yields identical gradients.
void backward(Tape& tape, const Tensor& loss);

}  // namespace mrn
