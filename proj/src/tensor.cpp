#include "mrn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace mrn {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<TensorImpl>()) {
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
}

Tensor::Tensor(Shape shape) : Tensor(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), 0.0)) {}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

double Tensor::scalar_value() const {
  if (numel() != 1) throw std::runtime_error("scalar_value on tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->values = impl_->values;
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

namespace {
thread_local Tape* g_active_tape = nullptr;

void ensure_grad(TensorImpl* t) {
  if (t->grad.empty()) t->grad.assign(t->values.size(), 0.0);
}

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks the output as gradient-carrying and records the backward closure.
void record_op(Tensor& out, std::vector<std::shared_ptr<TensorImpl>> touched,
               std::function<void()> backward_fn) {
  out.set_requires_grad(true);
  touched.push_back(out.handle());
  g_active_tape->record({std::move(backward_fn), std::move(touched)});
}
}  // namespace

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }
Tape* active_tape() { return g_active_tape; }

RunningStats make_running_stats(int64_t channels) {
  RunningStats s;
  s.mean.assign(static_cast<size_t>(channels), 0.0);
  s.var.assign(static_cast<size_t>(channels), 1.0);
  return s;
}

// --- small GEMM kernels (row-major) -----------------------------------------

namespace {

// C[M,N] += A[M,K] * B[K,N]; the k-unrolled form keeps four independent
// accumulator streams in flight per row
void gemm_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a_row = A + i * K;
    double* c_row = C + i * N;
    int64_t k = 0;
    for (; k + 4 <= K; k += 4) {
      const double a0 = a_row[k], a1 = a_row[k + 1], a2 = a_row[k + 2], a3 = a_row[k + 3];
      const double* b0 = B + k * N;
      const double* b1 = b0 + N;
      const double* b2 = b1 + N;
      const double* b3 = b2 + N;
      for (int64_t j = 0; j < N; ++j) {
        c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
    }
    for (; k < K; ++k) {
      const double a = a_row[k];
      const double* b_row = B + k * N;
      for (int64_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T; four accumulators break the FMA latency chain
void gemm_abt_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a_row = A + i * K;
    double* c_row = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const double* b_row = B + j * K;
      double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
      int64_t k = 0;
      for (; k + 4 <= K; k += 4) {
        acc0 += a_row[k] * b_row[k];
        acc1 += a_row[k + 1] * b_row[k + 1];
        acc2 += a_row[k + 2] * b_row[k + 2];
        acc3 += a_row[k + 3] * b_row[k + 3];
      }
      for (; k < K; ++k) acc0 += a_row[k] * b_row[k];
      c_row[j] += (acc0 + acc1) + (acc2 + acc3);
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
void gemm_atb_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t k = 0; k < K; ++k) {
    const double* a_row = A + k * M;
    const double* b_row = B + k * N;
    for (int64_t i = 0; i < M; ++i) {
      const double a = a_row[i];
      double* c_row = C + i * N;
      for (int64_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

struct ConvDims {
  int64_t batch, in_c, in_h, in_w;
  int64_t out_c, kh, kw;
  int64_t out_h, out_w;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weight, int stride, int pad) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw std::invalid_argument("conv2d expects 4-d input and weight, got input " +
                                shape_str(input.shape()) + " weight " + shape_str(weight.shape()));
  }
  ConvDims d;
  d.batch = input.dim(0);
  d.in_c = input.dim(1);
  d.in_h = input.dim(2);
  d.in_w = input.dim(3);
  d.out_c = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.stride = stride;
  d.pad = pad;
  if (weight.dim(1) != d.in_c) {
    throw std::invalid_argument("conv2d: weight channels " + std::to_string(weight.dim(1)) +
                                " do not match input channels " + std::to_string(d.in_c) +
                                "; input " + shape_str(input.shape()) + " weight " +
                                shape_str(weight.shape()));
  }
  if (d.kh % 2 == 0 || d.kw % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel sides must be odd, got weight " +
                                shape_str(weight.shape()));
  }
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and pad >= 0");
  const int64_t hn = d.in_h + 2 * pad - d.kh;
  const int64_t wn = d.in_w + 2 * pad - d.kw;
  if (hn < 0 || wn < 0) {
    throw std::invalid_argument("conv2d: kernel exceeds the padded input for input " +
                                shape_str(input.shape()) + " weight " + shape_str(weight.shape()) +
                                " stride " + std::to_string(stride) + " pad " + std::to_string(pad));
  }
  // floor division, as stride-2 downsampling of even maps requires
  d.out_h = hn / stride + 1;
  d.out_w = wn / stride + 1;
  return d;
}

void im2col(const double* x, const ConvDims& d, double* col) {
  const int64_t out_hw = d.out_h * d.out_w;
  for (int64_t c = 0; c < d.in_c; ++c) {
    const double* xc = x + c * d.in_h * d.in_w;
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        double* row = col + ((c * d.kh + ki) * d.kw + kj) * out_hw;
        for (int64_t oy = 0; oy < d.out_h; ++oy) {
          const int64_t iy = oy * d.stride - d.pad + ki;
          double* out_row = row + oy * d.out_w;
          if (iy < 0 || iy >= d.in_h) {
            std::fill(out_row, out_row + d.out_w, 0.0);
            continue;
          }
          const double* x_row = xc + iy * d.in_w;
          for (int64_t ox = 0; ox < d.out_w; ++ox) {
            const int64_t ix = ox * d.stride - d.pad + kj;
            out_row[ox] = (ix >= 0 && ix < d.in_w) ? x_row[ix] : 0.0;
          }
        }
      }
    }
  }
}

// transposed layout: one row of kdim patch values per output position, which
// turns both backward products into contiguous axpy streams
void im2col_t(const double* x, const ConvDims& d, double* colt) {
  const int64_t kdim = d.in_c * d.kh * d.kw;
  for (int64_t oy = 0; oy < d.out_h; ++oy) {
    for (int64_t ox = 0; ox < d.out_w; ++ox) {
      double* row = colt + (oy * d.out_w + ox) * kdim;
      int64_t m = 0;
      for (int64_t c = 0; c < d.in_c; ++c) {
        const double* xc = x + c * d.in_h * d.in_w;
        for (int64_t ki = 0; ki < d.kh; ++ki) {
          const int64_t iy = oy * d.stride - d.pad + ki;
          if (iy < 0 || iy >= d.in_h) {
            for (int64_t kj = 0; kj < d.kw; ++kj) row[m++] = 0.0;
            continue;
          }
          const double* x_row = xc + iy * d.in_w;
          for (int64_t kj = 0; kj < d.kw; ++kj) {
            const int64_t ix = ox * d.stride - d.pad + kj;
            row[m++] = (ix >= 0 && ix < d.in_w) ? x_row[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_t_acc(const double* colt, const ConvDims& d, double* dx) {
  const int64_t kdim = d.in_c * d.kh * d.kw;
  for (int64_t oy = 0; oy < d.out_h; ++oy) {
    for (int64_t ox = 0; ox < d.out_w; ++ox) {
      const double* row = colt + (oy * d.out_w + ox) * kdim;
      int64_t m = 0;
      for (int64_t c = 0; c < d.in_c; ++c) {
        double* xc = dx + c * d.in_h * d.in_w;
        for (int64_t ki = 0; ki < d.kh; ++ki) {
          const int64_t iy = oy * d.stride - d.pad + ki;
          if (iy < 0 || iy >= d.in_h) {
            m += d.kw;
            continue;
          }
          double* x_row = xc + iy * d.in_w;
          for (int64_t kj = 0; kj < d.kw; ++kj) {
            const int64_t ix = ox * d.stride - d.pad + kj;
            if (ix >= 0 && ix < d.in_w) x_row[ix] += row[m];
            ++m;
          }
        }
      }
    }
  }
}

thread_local std::vector<double> g_col_scratch;

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int pad) {
  const ConvDims d = conv_dims(input, weight, stride, pad);
  const int64_t kdim = d.in_c * d.kh * d.kw;
  const int64_t out_hw = d.out_h * d.out_w;

  Tensor out({d.batch, d.out_c, d.out_h, d.out_w});
  double* y = out.mutable_values().data();
  const double* x = input.values().data();
  const double* w = weight.values().data();

  std::vector<double>& col = g_col_scratch;
  col.resize(static_cast<size_t>(kdim * out_hw));
  for (int64_t n = 0; n < d.batch; ++n) {
    im2col(x + n * d.in_c * d.in_h * d.in_w, d, col.data());
    gemm_acc(w, col.data(), y + n * d.out_c * out_hw, d.out_c, kdim, out_hw);
  }

  if (recording({&input, &weight})) {
    auto xi = input.handle();
    auto wi = weight.handle();
    auto yi = out.handle();
    record_op(out, {xi, wi}, [xi, wi, yi, d, kdim, out_hw]() {
      const double* dy = yi->grad.data();
      std::vector<double> colt(static_cast<size_t>(kdim * out_hw));
      if (xi->requires_grad) ensure_grad(xi.get());
      if (wi->requires_grad) ensure_grad(wi.get());
      for (int64_t n = 0; n < d.batch; ++n) {
        const double* dy_n = dy + n * d.out_c * out_hw;
        if (wi->requires_grad) {
          // dW[f,:] += sum_o dy[f,o] * patch(o,:)
          im2col_t(xi->values.data() + n * d.in_c * d.in_h * d.in_w, d, colt.data());
          gemm_acc(dy_n, colt.data(), wi->grad.data(), d.out_c, out_hw, kdim);
        }
        if (xi->requires_grad) {
          // dpatch(o,:) = sum_f dy[f,o] * W[f,:], scattered back into dx
          std::fill(colt.begin(), colt.end(), 0.0);
          gemm_atb_acc(dy_n, wi->values.data(), colt.data(), out_hw, d.out_c, kdim);
          col2im_t_acc(colt.data(), d, xi->grad.data() + n * d.in_c * d.in_h * d.in_w);
        }
      }
    });
  }
  return out;
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  RunningStats& stats, Mode mode, double eps, double momentum) {
  if (input.rank() != 4) {
    throw std::invalid_argument("batch_norm expects 4-d input, got " + shape_str(input.shape()));
  }
  const int64_t batch = input.dim(0), channels = input.dim(1);
  const int64_t hw = input.dim(2) * input.dim(3);
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw std::invalid_argument("batch_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                                shape_str(beta.shape()) + " do not match " +
                                std::to_string(channels) + " channels");
  }
  if (static_cast<int64_t>(stats.mean.size()) != channels) {
    throw std::invalid_argument("batch_norm: running stats have " +
                                std::to_string(stats.mean.size()) + " channels, input has " +
                                std::to_string(channels));
  }
  const int64_t m = batch * hw;
  if (mode == Mode::Train && m < 2) {
    throw std::invalid_argument("batch_norm: train mode needs at least 2 values per channel");
  }

  Tensor out(input.shape());
  double* y = out.mutable_values().data();
  const double* x = input.values().data();
  const double* g = gamma.values().data();
  const double* b = beta.values().data();

  std::vector<double> mean_used(static_cast<size_t>(channels));
  std::vector<double> inv_std(static_cast<size_t>(channels));

  auto channel_ptr = [&](const double* base, int64_t n, int64_t c) {
    return base + (n * channels + c) * hw;
  };

  if (mode == Mode::Train) {
    for (int64_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (int64_t n = 0; n < batch; ++n) {
        const double* p = channel_ptr(x, n, c);
        for (int64_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      double sq = 0.0;
      for (int64_t n = 0; n < batch; ++n) {
        const double* p = channel_ptr(x, n, c);
        for (int64_t i = 0; i < hw; ++i) {
          const double dv = p[i] - mu;
          sq += dv * dv;
        }
      }
      const double var = sq / static_cast<double>(m);  // biased, used for normalization
      mean_used[static_cast<size_t>(c)] = mu;
      inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
      // running stats keep the unbiased variance
      const double unbiased = (m > 1) ? sq / static_cast<double>(m - 1) : var;
      stats.mean[static_cast<size_t>(c)] = momentum * stats.mean[static_cast<size_t>(c)] + (1.0 - momentum) * mu;
      stats.var[static_cast<size_t>(c)] = momentum * stats.var[static_cast<size_t>(c)] + (1.0 - momentum) * unbiased;
    }
  } else {
    for (int64_t c = 0; c < channels; ++c) {
      mean_used[static_cast<size_t>(c)] = stats.mean[static_cast<size_t>(c)];
      inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(stats.var[static_cast<size_t>(c)] + eps);
    }
  }

  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t c = 0; c < channels; ++c) {
      const double* p = channel_ptr(x, n, c);
      double* q = const_cast<double*>(channel_ptr(y, n, c));
      const double mu = mean_used[static_cast<size_t>(c)];
      const double inv = inv_std[static_cast<size_t>(c)];
      const double gc = g[c], bc = b[c];
      for (int64_t i = 0; i < hw; ++i) q[i] = gc * ((p[i] - mu) * inv) + bc;
    }
  }

  if (recording({&input, &gamma, &beta})) {
    auto xi = input.handle();
    auto gi = gamma.handle();
    auto bi = beta.handle();
    auto yi = out.handle();
    const bool train = mode == Mode::Train;
    record_op(out, {xi, gi, bi},
              [xi, gi, bi, yi, mean_used, inv_std, batch, channels, hw, m, train]() {
      const double* dy = yi->grad.data();
      const double* xv = xi->values.data();
      if (xi->requires_grad) ensure_grad(xi.get());
      if (gi->requires_grad) ensure_grad(gi.get());
      if (bi->requires_grad) ensure_grad(bi.get());
      for (int64_t c = 0; c < channels; ++c) {
        const double mu = mean_used[static_cast<size_t>(c)];
        const double inv = inv_std[static_cast<size_t>(c)];
        const double gc = gi->values[static_cast<size_t>(c)];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int64_t n = 0; n < batch; ++n) {
          const double* xp = xv + (n * channels + c) * hw;
          const double* dp = dy + (n * channels + c) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            sum_dy += dp[i];
            sum_dy_xhat += dp[i] * (xp[i] - mu) * inv;
          }
        }
        if (gi->requires_grad) gi->grad[static_cast<size_t>(c)] += sum_dy_xhat;
        if (bi->requires_grad) bi->grad[static_cast<size_t>(c)] += sum_dy;
        if (!xi->requires_grad) continue;
        for (int64_t n = 0; n < batch; ++n) {
          const double* xp = xv + (n * channels + c) * hw;
          const double* dp = dy + (n * channels + c) * hw;
          double* dxp = xi->grad.data() + (n * channels + c) * hw;
          if (train) {
            const double scale = gc * inv / static_cast<double>(m);
            for (int64_t i = 0; i < hw; ++i) {
              const double xhat = (xp[i] - mu) * inv;
              dxp[i] += scale * (static_cast<double>(m) * dp[i] - sum_dy - xhat * sum_dy_xhat);
            }
          } else {
            for (int64_t i = 0; i < hw; ++i) dxp[i] += dp[i] * gc * inv;
          }
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  const double* x = input.values().data();
  double* y = out.mutable_values().data();
  const int64_t n = input.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (recording({&input})) {
    auto xi = input.handle();
    auto yi = out.handle();
    record_op(out, {xi}, [xi, yi, n]() {
      if (!xi->requires_grad) return;
      ensure_grad(xi.get());
      for (int64_t i = 0; i < n; ++i) {
        if (xi->values[static_cast<size_t>(i)] > 0.0) xi->grad[static_cast<size_t>(i)] += yi->grad[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1) {
    throw std::invalid_argument("linear expects input [N,D], weight [D,M], bias [M]; got " +
                                shape_str(input.shape()) + " " + shape_str(weight.shape()) + " " +
                                shape_str(bias.shape()));
  }
  const int64_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
  if (weight.dim(0) != d || bias.dim(0) != m) {
    throw std::invalid_argument("linear: shape mismatch between input " + shape_str(input.shape()) +
                                ", weight " + shape_str(weight.shape()) + ", bias " +
                                shape_str(bias.shape()));
  }
  Tensor out({n, m});
  double* y = out.mutable_values().data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) y[i * m + j] = bias.values()[static_cast<size_t>(j)];
  }
  gemm_acc(input.values().data(), weight.values().data(), y, n, d, m);

  if (recording({&input, &weight, &bias})) {
    auto xi = input.handle();
    auto wi = weight.handle();
    auto bi = bias.handle();
    auto yi = out.handle();
    record_op(out, {xi, wi, bi}, [xi, wi, bi, yi, n, d, m]() {
      const double* dy = yi->grad.data();
      if (xi->requires_grad) {
        ensure_grad(xi.get());
        gemm_abt_acc(dy, wi->values.data(), xi->grad.data(), n, m, d);
      }
      if (wi->requires_grad) {
        ensure_grad(wi.get());
        gemm_atb_acc(xi->values.data(), dy, wi->grad.data(), d, n, m);
      }
      if (bi->requires_grad) {
        ensure_grad(bi.get());
        for (int64_t i = 0; i < n; ++i) {
          for (int64_t j = 0; j < m; ++j) bi->grad[static_cast<size_t>(j)] += dy[i * m + j];
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* y = out.mutable_values().data();
  for (int64_t i = 0; i < n; ++i) y[i] = pa[i] + pb[i];
  if (recording({&a, &b})) {
    auto ai = a.handle();
    auto bi = b.handle();
    auto yi = out.handle();
    record_op(out, {ai, bi}, [ai, bi, yi, n]() {
      const double* dy = yi->grad.data();
      if (ai->requires_grad) {
        ensure_grad(ai.get());
        for (int64_t i = 0; i < n; ++i) ai->grad[static_cast<size_t>(i)] += dy[i];
      }
      if (bi->requires_grad) {
        ensure_grad(bi.get());
        for (int64_t i = 0; i < n; ++i) bi->grad[static_cast<size_t>(i)] += dy[i];
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& input) {
  if (input.rank() != 4) {
    throw std::invalid_argument("global_avg_pool expects 4-d input, got " + shape_str(input.shape()));
  }
  const int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  Tensor out({n, c});
  const double* x = input.values().data();
  double* y = out.mutable_values().data();
  for (int64_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const double* p = x + i * hw;
    for (int64_t j = 0; j < hw; ++j) s += p[j];
    y[i] = s / static_cast<double>(hw);
  }
  if (recording({&input})) {
    auto xi = input.handle();
    auto yi = out.handle();
    record_op(out, {xi}, [xi, yi, n, c, hw]() {
      if (!xi->requires_grad) return;
      ensure_grad(xi.get());
      const double* dy = yi->grad.data();
      for (int64_t i = 0; i < n * c; ++i) {
        const double g = dy[i] / static_cast<double>(hw);
        double* p = xi->grad.data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) p[j] += g;
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("softmax_cross_entropy expects logits [N,K], got " +
                                shape_str(logits.shape()));
  }
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(n));
  }
  for (int64_t i = 0; i < n; ++i) {
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= k) {
      throw std::invalid_argument("softmax_cross_entropy: label " +
                                  std::to_string(labels[static_cast<size_t>(i)]) + " at index " +
                                  std::to_string(i) + " outside [0," + std::to_string(k) + ")");
    }
  }
  const double* x = logits.values().data();
  std::vector<double> softmax(static_cast<size_t>(n * k));
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = x + i * k;
    double mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    loss += lse - row[labels[static_cast<size_t>(i)]];
    for (int64_t j = 0; j < k; ++j) softmax[static_cast<size_t>(i * k + j)] = std::exp(row[j] - lse);
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(n));

  if (recording({&logits})) {
    auto xi = logits.handle();
    auto yi = out.handle();
    record_op(out, {xi}, [xi, yi, softmax = std::move(softmax), labels, n, k]() {
      if (!xi->requires_grad) return;
      ensure_grad(xi.get());
      const double dloss = yi->grad[0];
      const double scale = dloss / static_cast<double>(n);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < k; ++j) {
          double g = softmax[static_cast<size_t>(i * k + j)];
          if (j == labels[static_cast<size_t>(i)]) g -= 1.0;
          xi->grad[static_cast<size_t>(i * k + j)] += scale * g;
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& input) {
  double s = 0.0;
  for (double v : input.values()) s += v;
  Tensor out = Tensor::scalar(s);
  if (recording({&input})) {
    auto xi = input.handle();
    auto yi = out.handle();
    record_op(out, {xi}, [xi, yi]() {
      if (!xi->requires_grad) return;
      ensure_grad(xi.get());
      const double g = yi->grad[0];
      for (double& d : xi->grad) d += g;
    });
  }
  return out;
}

void backward(Tape& tape, const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  }
  bool found = false;
  std::unordered_set<TensorImpl*> touched;
  for (const Tape::Entry& e : tape.entries()) {
    for (const auto& t : e.touched) {
      touched.insert(t.get());
      if (t.get() == loss.impl()) found = true;
    }
  }
  if (!found) {
    throw std::invalid_argument("backward: loss was not produced on this tape");
  }
  // Reset before accumulating so replaying the same tape is idempotent.
  for (TensorImpl* t : touched) t->grad.assign(t->values.size(), 0.0);
  loss.impl()->grad[0] = 1.0;
  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) it->backward();
}

}  // namespace mrn
