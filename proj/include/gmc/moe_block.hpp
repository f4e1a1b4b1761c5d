#pragma once

#include <cstdint>
#include <vector>

#include "gmc/gate.hpp"
#include "gmc/nn_ops.hpp"
#include "gmc/tensor.hpp"

namespace gmc {

/// Gated ResNeXt bottleneck: 1x1 reduce to E*d channels, 3x3 grouped conv
/// (groups = E, stride s), per-group gate scaling, 1x1 expand, residual add.
/// Group e owns channels [e*d, (e+1)*d) of the two middle layers.
template <typename T>
struct GatedBlockParams {
  Conv2dParams<T> conv_reduce;
  BatchNorm2dParams<T> bn_reduce;
  Conv2dParams<T> conv_conv;
  BatchNorm2dParams<T> bn_mid;
  Conv2dParams<T> conv_expand;
  BatchNorm2dParams<T> bn_expand;
  bool has_shortcut = false;
  Conv2dParams<T> shortcut_conv;
  BatchNorm2dParams<T> shortcut_bn;
  GateControllerParams<T> controller;
  std::int64_t cardinality = 1;
  std::int64_t width = 1;
  std::int64_t k = 1;
  bool gated = true;  // false: plain ResNeXt block, every group at weight 1, no controller

  std::int64_t in_channels() const { return conv_reduce.weight.dim(1); }
  std::int64_t mid_channels() const { return cardinality * width; }
  std::int64_t out_channels() const { return conv_expand.weight.dim(0); }
  std::int64_t stride() const { return conv_conv.stride; }

  void validate() const;

  /// Visits every trainable tensor in a fixed order. Parameter and gradient
  /// structures of the same block visit matching tensors in lockstep.
  template <typename Fn>
  void for_each_trainable(Fn&& fn) {
    auto conv = [&](Conv2dParams<T>& c) {
      fn(c.weight);
      if (!c.bias.empty()) fn(c.bias);
    };
    auto bn = [&](BatchNorm2dParams<T>& b) {
      fn(b.gamma);
      fn(b.beta);
    };
    conv(conv_reduce);
    bn(bn_reduce);
    conv(conv_conv);
    bn(bn_mid);
    conv(conv_expand);
    bn(bn_expand);
    if (has_shortcut) {
      conv(shortcut_conv);
      bn(shortcut_bn);
    }
    if (gated) controller.for_each(fn);
  }

  /// Running statistics and batch-norm mode for every BN layer.
  template <typename Fn>
  void for_each_bn(Fn&& fn) {
    fn(bn_reduce);
    fn(bn_mid);
    fn(bn_expand);
    if (has_shortcut) fn(shortcut_bn);
  }

  /// Same layout with every trainable tensor zeroed.
  GatedBlockParams zeros_like() const;
};

enum class BlockMode {
  dense,   // every group runs, scaled by its full normalized gate
  masked,  // every group runs, gates outside the top-k zeroed and excluded from BN statistics
  sparse,  // only the top-k groups run, on gathered channels and parameters
};

struct BlockOptions {
  BlockMode mode = BlockMode::sparse;
  /// Test hook: the sparse path gathers the wrong expand-layer column for its
  /// first active channel, giving verification a known-bad gather to catch.
  bool inject_gather_fault = false;
};

/// Intermediate activations of one forward pass, consumed by block_backward.
template <typename T>
struct BlockCache {
  bool valid = false;
  BlockMode mode = BlockMode::dense;
  Tensor<T> x;
  Tensor<T> q;
  std::vector<GateCache<T>> gates;
  std::vector<std::vector<std::int64_t>> selected;
  std::vector<std::vector<T>> gate_scale;  // multiplier applied to each group, per sample

  // Dense and masked modes hold full N x (E*d) maps.
  std::vector<std::uint8_t> stat_mask;
  Tensor<T> r1, t1, r2, t2;

  // Sparse mode holds per-sample gathered maps and their parameter views.
  std::vector<std::vector<std::int64_t>> channels;
  std::vector<Tensor<T>> r1s, t1s, r2s, t2s;
  std::vector<Conv2dParams<T>> reduce_views, conv_views, expand_views;

  Tensor<T> s;                // gate-scaled middle output (dense/masked)
  std::vector<Tensor<T>> ss;  // gate-scaled middle output (sparse)
  Tensor<T> e3;               // expand conv output, N x C_out
  Tensor<T> sc;               // shortcut conv output, empty when identity
  Tensor<T> pre_relu;         // residual sum before the final relu
};

template <typename T>
struct BlockOutput {
  Tensor<T> y;
  std::vector<GateDecision<T>> decisions;
};

/// x: N x C x H x W, q: N x Q.
template <typename T>
BlockOutput<T> block_forward(const Tensor<T>& x, const Tensor<T>& q, GatedBlockParams<T>& params,
                             const BlockOptions& options, MacCounter* counter = nullptr,
                             BlockCache<T>* cache = nullptr);

template <typename T>
BlockOutput<T> block_forward_dense(const Tensor<T>& x, const Tensor<T>& q, GatedBlockParams<T>& params,
                                   MacCounter* counter = nullptr, BlockCache<T>* cache = nullptr) {
  return block_forward(x, q, params, {BlockMode::dense}, counter, cache);
}

template <typename T>
BlockOutput<T> block_forward_sparse(const Tensor<T>& x, const Tensor<T>& q, GatedBlockParams<T>& params,
                                    MacCounter* counter = nullptr, BlockCache<T>* cache = nullptr) {
  return block_forward(x, q, params, {BlockMode::sparse}, counter, cache);
}

template <typename T>
struct BlockGrads {
  GatedBlockParams<T> params;  // only trainable tensors are meaningful
  Tensor<T> grad_x;
  Tensor<T> grad_q;
};

/// grad_gates (N x E, may be empty) is an extra gradient on the normalized
/// gates, e.g. from the balance loss; it is added to what flows back through
/// the gate scaling.
template <typename T>
BlockGrads<T> block_backward(const BlockCache<T>& cache, const GatedBlockParams<T>& params, const Tensor<T>& grad_y,
                             const Tensor<T>& grad_gates = {});

/// N x E matrix of normalized gates taken from a list of decisions.
template <typename T>
Tensor<T> gate_matrix(const std::vector<GateDecision<T>>& decisions);

/// Auxiliary ops of one block forward for N samples, with `active` groups run
/// per sample. h1/w1 is the input extent, h2/w2 the output extent. Ungated
/// blocks skip the controller and the gate scaling.
std::int64_t gated_block_aux_ops(std::int64_t n, std::int64_t c, std::int64_t c_out, std::int64_t e, std::int64_t d,
                                 std::int64_t active, std::int64_t h1, std::int64_t w1, std::int64_t h2,
                                 std::int64_t w2, std::int64_t question, std::int64_t hidden, bool has_shortcut,
                                 bool gated = true);

}  // namespace gmc
