#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "gmc/tensor.hpp"

namespace gmc {

/// Operation tally for one forward pass.
///
/// conv_macs follows the closed form C_in*C_out*p*p*H_o*W_o/groups per sample
/// regardless of how the kernel is executed; bias adds are auxiliary.
struct MacCounter {
  std::uint64_t conv_macs = 0;
  std::uint64_t linear_macs = 0;
  std::uint64_t aux_ops = 0;

  void reset() { *this = MacCounter{}; }
  MacCounter& operator+=(const MacCounter& o) {
    conv_macs += o.conv_macs;
    linear_macs += o.linear_macs;
    aux_ops += o.aux_ops;
    return *this;
  }
  bool operator==(const MacCounter&) const = default;
};

inline void count_aux(MacCounter* c, std::int64_t ops) {
  if (c) c->aux_ops += static_cast<std::uint64_t>(ops);
}

// Auxiliary-op weights shared by the executing kernels and the analytical model.
inline constexpr std::int64_t kBatchNormOpsPerElement = 2;

// ---------------------------------------------------------------------------
// Convolution

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // C_out x (C_in / groups) x p x p
  Tensor<T> bias;    // C_out, or empty
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;

  std::int64_t out_channels() const { return weight.dim(0); }
  std::int64_t kernel() const { return weight.dim(2); }
};

/// floor((in + 2*padding - kernel)/stride) + 1, or throws when that is < 1.
std::int64_t conv_output_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride, std::int64_t padding);

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Conv2dParams<T>& params, MacCounter* counter = nullptr);

template <typename T>
struct Conv2dGrads {
  Tensor<T> grad_x;
  Tensor<T> grad_weight;
  Tensor<T> grad_bias;  // empty when the layer has no bias
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Conv2dParams<T>& params, const Tensor<T>& grad_out,
                               bool need_grad_x = true);

// ---------------------------------------------------------------------------
// Batch normalization

enum class BnMode { training, inference };

template <typename T>
struct BatchNorm2dParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double eps = 1e-5;
  double momentum = 0.1;
  BnMode mode = BnMode::training;

  static BatchNorm2dParams make(std::int64_t channels) {
    BatchNorm2dParams p;
    p.gamma = Tensor<T>::ones({channels});
    p.beta = Tensor<T>::zeros({channels});
    p.running_mean = Tensor<T>::zeros({channels});
    p.running_var = Tensor<T>::ones({channels});
    return p;
  }
  std::int64_t channels() const { return gamma.numel(); }
};

/// Per-(sample, channel) inclusion flags for batch statistics, laid out
/// mask[n * C + c]. Empty means every sample contributes to every channel.
/// Excluded samples are still normalized with the statistics of the included
/// ones. A channel with no included sample outputs beta and keeps its running
/// statistics.
using StatMask = std::span<const std::uint8_t>;

template <typename T>
Tensor<T> batchnorm2d_forward(const Tensor<T>& x, BatchNorm2dParams<T>& params, MacCounter* counter = nullptr,
                              StatMask mask = {});

template <typename T>
struct BatchNorm2dGrads {
  Tensor<T> grad_x;
  Tensor<T> grad_gamma;
  Tensor<T> grad_beta;
};

/// Recomputes the batch statistics from x in training mode.
template <typename T>
BatchNorm2dGrads<T> batchnorm2d_backward(const Tensor<T>& x, const BatchNorm2dParams<T>& params,
                                         const Tensor<T>& grad_out, StatMask mask = {});

// ---------------------------------------------------------------------------
// Elementwise and pooling

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x, MacCounter* counter = nullptr);
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> tanh_forward(const Tensor<T>& x, MacCounter* counter = nullptr);
/// Takes the forward output y = tanh(x).
template <typename T>
Tensor<T> tanh_backward(const Tensor<T>& y, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x, std::int64_t axis, MacCounter* counter = nullptr);
/// Takes the forward output y = softmax(x).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& grad_out, std::int64_t axis);

struct Pool2dSpec {
  std::int64_t kernel = 3;
  std::int64_t stride = 2;
  std::int64_t padding = 1;
};

/// Padding cells never win; ties go to the first cell in row-major window order.
template <typename T>
Tensor<T> maxpool2d_forward(const Tensor<T>& x, const Pool2dSpec& spec, MacCounter* counter = nullptr);
template <typename T>
Tensor<T> maxpool2d_backward(const Tensor<T>& x, const Pool2dSpec& spec, const Tensor<T>& grad_out);

/// N x C x H x W -> N x C
template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x, MacCounter* counter = nullptr);
template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& x_shape, const Tensor<T>& grad_out);

// ---------------------------------------------------------------------------
// Fully connected

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // out x in
  Tensor<T> bias;    // out, or empty
};

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const LinearParams<T>& params, MacCounter* counter = nullptr);

template <typename T>
struct LinearGrads {
  Tensor<T> grad_x;
  Tensor<T> grad_weight;
  Tensor<T> grad_bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const LinearParams<T>& params, const Tensor<T>& grad_out);

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
template <typename T>
struct CrossEntropy {
  T loss;
  Tensor<T> grad_logits;
  std::int64_t correct;
};

template <typename T>
CrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels);

// ---------------------------------------------------------------------------
// Verification

/// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
/// where numeric is the central difference (f(x + h e) - f(x - h e)) / 2h.
/// The per-coordinate score used by finite_diff_check.
double finite_diff_relative_error(double analytic, double numeric);

double finite_diff_check(const std::function<double(const TensorD&)>& f, const TensorD& point,
                         const TensorD& analytic, double h = 1e-5);

}  // namespace gmc
