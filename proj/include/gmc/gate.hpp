#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "gmc/nn_ops.hpp"
#include "gmc/tensor.hpp"

namespace gmc {

/// Question-conditioned gate controller for one gated block.
///
/// Dimensions: F image features per region, Q question features, Hd hidden
/// units, E experts. The image-feature projection is only present when F != Q.
template <typename T>
struct GateControllerParams {
  Tensor<T> image_to_hidden;     // Hd x F
  Tensor<T> question_to_hidden;  // Hd x Q
  Tensor<T> hidden_bias;         // Hd
  Tensor<T> score_weight;        // 1 x Hd
  Tensor<T> score_bias;          // 1 (shared across regions)
  Tensor<T> projection;          // Q x F, empty means identity
  Tensor<T> gate_weight;         // E x Q
  Tensor<T> gate_bias;           // E

  std::int64_t hidden() const { return image_to_hidden.dim(0); }
  std::int64_t feature_dim() const { return image_to_hidden.dim(1); }
  std::int64_t question_dim() const { return question_to_hidden.dim(1); }
  std::int64_t experts() const { return gate_weight.dim(0); }

  /// Throws unless every shape is consistent.
  void validate() const;

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn(image_to_hidden);
    fn(question_to_hidden);
    fn(hidden_bias);
    fn(score_weight);
    fn(score_bias);
    if (!projection.empty()) fn(projection);
    fn(gate_weight);
    fn(gate_bias);
  }

  /// Same structure with every tensor zeroed; used as a gradient accumulator.
  GateControllerParams zeros_like() const;
};

template <typename T>
struct GateDecision {
  std::vector<T> g_raw;                // pre-activation gate logits
  std::vector<T> g_norm;               // relu + L1 normalized gates
  std::vector<std::int64_t> selected;  // top-k expert indices, ascending
  std::vector<T> attention;            // softmax over regions
  bool fallback_used = false;
};

/// Gates whose L1 mass is at or below this fall back to uniform weights.
inline constexpr double kGateFallbackThreshold = 1e-12;

template <typename T>
struct AttentionPool {
  Tensor<T> v_tilde;    // Q
  Tensor<T> attention;  // D
};

/// Soft attention over regions (D x F) conditioned on the question (Q).
template <typename T>
AttentionPool<T> attention_pool(const Tensor<T>& regions, const Tensor<T>& question,
                                const GateControllerParams<T>& params, MacCounter* counter = nullptr);

/// g_raw = W_g (v_tilde + v_q) + b_g followed by relu and L1 normalization.
/// Fills g_raw, g_norm and fallback_used; selected and attention stay empty.
template <typename T>
GateDecision<T> gate_weights(const Tensor<T>& v_tilde, const Tensor<T>& question,
                             const GateControllerParams<T>& params, MacCounter* counter = nullptr);

/// Relu + L1 normalization of raw gate logits with the uniform fallback.
template <typename T>
void normalize_gates(std::span<const T> g_raw, std::vector<T>& g_norm, bool& fallback_used);

/// Indices of the k largest entries, ties to the smaller index, sorted ascending.
template <typename T>
std::vector<std::int64_t> topk_select(std::span<const T> g_norm, std::int64_t k);

/// Squared coefficient of variation with population standard deviation.
template <typename T>
T cv_squared(std::span<const T> values);

/// cv_squared of per-expert importance (column sums of a B x E gate matrix).
template <typename T>
T balance_loss(const Tensor<T>& batch_gates);

/// Gradient of balance_loss w.r.t. every entry of batch_gates.
template <typename T>
Tensor<T> balance_loss_backward(const Tensor<T>& batch_gates);

/// Everything gate_backward needs from one sample's forward pass.
template <typename T>
struct GateCache {
  Tensor<T> regions;   // D x F
  Tensor<T> question;  // Q
  Tensor<T> hidden;    // D x Hd, after tanh
  Tensor<T> attention;
  Tensor<T> pooled;  // F
  Tensor<T> query;   // Q, v_tilde + v_q
  std::vector<T> g_raw;
  std::vector<T> g_norm;
  bool fallback_used = false;
};

template <typename T>
struct GateForward {
  GateDecision<T> decision;
  GateCache<T> cache;
};

/// Full controller for one sample: attention, gating MLP, normalization and top-k.
template <typename T>
GateForward<T> gate_forward(const Tensor<T>& regions, const Tensor<T>& question, const GateControllerParams<T>& params,
                            std::int64_t k, MacCounter* counter = nullptr);

template <typename T>
struct GateInputGrads {
  Tensor<T> regions;   // D x F
  Tensor<T> question;  // Q
};

/// Backpropagates a gradient w.r.t. g_norm. Parameter gradients are added to
/// grad_params. The top-k set is treated as constant; the fallback branch
/// passes no gradient to g_raw.
template <typename T>
GateInputGrads<T> gate_backward(const GateCache<T>& cache, const GateControllerParams<T>& params,
                                std::span<const T> grad_g_norm, GateControllerParams<T>& grad_params);

/// Sample n of an N x C x H x W map as D x F regions (D = H*W, F = C).
template <typename T>
Tensor<T> feature_regions(const Tensor<T>& x, std::int64_t n);

/// Adds a D x F region gradient into sample n of an N x C x H x W gradient.
template <typename T>
void add_region_grad(Tensor<T>& grad_x, std::int64_t n, const Tensor<T>& grad_regions);

/// Auxiliary op count of gate_forward for one sample.
std::int64_t gate_controller_ops(std::int64_t regions, std::int64_t features, std::int64_t question,
                                 std::int64_t hidden, std::int64_t experts, bool has_projection);

struct GateCsvRow {
  std::int64_t block_id;
  std::int64_t sample_id;
  std::int64_t k;
  bool fallback_used;
  std::vector<double> g_norm;
  std::vector<std::int64_t> selected;
};

/// Columns: block_id,sample_id,k,fallback_used,g0..g{E-1},selected where
/// selected is a ';'-joined index list. Rows with fewer experts leave the
/// trailing gate columns blank.
void write_gate_csv(std::ostream& os, std::span<const GateCsvRow> rows);

}  // namespace gmc
