#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gmc/moe_block.hpp"
#include "gmc/nn_ops.hpp"
#include "gmc/tensor.hpp"

namespace gmc {

struct InputSpec {
  std::int64_t channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;
  bool operator==(const InputSpec&) const = default;
};

struct StemSpec {
  std::int64_t kernel = 3;
  std::int64_t out = 16;
  std::int64_t stride = 1;
  bool maxpool = false;  // 3x3, stride 2, padding 1
  bool operator==(const StemSpec&) const = default;
};

struct StageConfig {
  std::int64_t blocks = 1;
  std::int64_t out = 0;
  std::int64_t cardinality = 1;
  std::int64_t width = 1;
  std::int64_t stride = 1;  // applied by the first block only
  bool gated = true;
  std::optional<std::int64_t> k;   // overrides the network-wide k
  std::optional<std::int64_t> in;  // optional check against the previous stage's channels
  bool operator==(const StageConfig&) const = default;
};

/// Optional 1x1 convolution between the last stage and the head.
struct PostConvSpec {
  std::int64_t out = 0;
  bool bn_relu = true;  // false: conv with bias only
  bool operator==(const PostConvSpec&) const = default;
};

struct ReferenceFlops {
  std::int64_t k = 0;
  double flops = 0.0;
  bool operator==(const ReferenceFlops&) const = default;
};

struct NetworkConfig {
  std::string name;
  InputSpec input;
  StemSpec stem;
  std::vector<StageConfig> stages;
  std::optional<PostConvSpec> post_conv;
  std::int64_t classes = 2;
  std::int64_t question_dim = 1;
  std::int64_t gate_hidden = 16;
  std::int64_t k = 1;
  std::uint64_t seed = 0;
  std::vector<ReferenceFlops> reference_flops;  // published totals, for display only

  std::int64_t stage_k(std::size_t stage) const { return stages.at(stage).k.value_or(k); }
  bool operator==(const NetworkConfig&) const = default;
};

/// Thrown by parse_config; what() joins every violation on its own line.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

/// Parses and validates a JSON document. Unknown fields are rejected.
NetworkConfig parse_config(std::string_view text);
NetworkConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const NetworkConfig& cfg);

/// Structural checks shared by parse_config and programmatic construction.
std::vector<std::string> config_violations(const NetworkConfig& cfg);

/// Output extent of the stem convolution, each stage and the post conv.
struct LayerExtent {
  std::string layer;
  std::int64_t channels;
  std::int64_t height;
  std::int64_t width;
};
std::vector<LayerExtent> stage_output_extents(const NetworkConfig& cfg);

template <typename T>
struct Network {
  NetworkConfig config;
  Conv2dParams<T> stem_conv;
  BatchNorm2dParams<T> stem_bn;
  std::vector<GatedBlockParams<T>> blocks;
  std::vector<std::string> block_names;  // "stage<i>.block<j>", 1-based stages
  bool has_post_conv = false;
  Conv2dParams<T> post_conv;
  BatchNorm2dParams<T> post_bn;  // used when the post conv carries BN + relu
  LinearParams<T> head;

  template <typename Fn>
  void for_each_trainable(Fn&& fn) {
    fn(stem_conv.weight);
    fn(stem_bn.gamma);
    fn(stem_bn.beta);
    for (auto& b : blocks) b.for_each_trainable(fn);
    if (has_post_conv) {
      fn(post_conv.weight);
      if (!post_conv.bias.empty()) fn(post_conv.bias);
      if (config.post_conv->bn_relu) {
        fn(post_bn.gamma);
        fn(post_bn.beta);
      }
    }
    fn(head.weight);
    fn(head.bias);
  }

  template <typename Fn>
  void for_each_bn(Fn&& fn) {
    fn(stem_bn);
    for (auto& b : blocks) b.for_each_bn(fn);
    if (has_post_conv && config.post_conv->bn_relu) fn(post_bn);
  }

  /// Trainable tensors followed by every BN running statistic; the order used
  /// by parameter dumps.
  template <typename Fn>
  void for_each_state(Fn&& fn) {
    for_each_trainable(fn);
    for_each_bn([&](BatchNorm2dParams<T>& b) {
      fn(b.running_mean);
      fn(b.running_var);
    });
  }

  void set_bn_mode(BnMode mode) {
    for_each_bn([&](BatchNorm2dParams<T>& b) { b.mode = mode; });
  }
  void set_k(std::int64_t k);
  std::int64_t parameter_count();
  std::size_t gated_block_count() const;
  Network zeros_like() const;
};

/// Deterministic initialization: conv weights normal(0, sqrt(2/fan_in)),
/// linear and controller weights uniform(+-sqrt(6/(fan_in+fan_out))), biases
/// zero, BN gamma 1 and beta 0.
template <typename T>
Network<T> build_network(const NetworkConfig& cfg, std::uint64_t seed);

template <typename T>
void save_parameters(Network<T>& net, const std::filesystem::path& path);
template <typename T>
void load_parameters(Network<T>& net, const std::filesystem::path& path);

struct NetworkOptions {
  BlockMode mode = BlockMode::sparse;
  bool inject_gather_fault = false;
};

template <typename T>
struct NetworkCache {
  bool valid = false;
  Tensor<T> images;
  Tensor<T> stem_r, stem_t;  // conv output, activation (before the optional pool)
  std::vector<BlockCache<T>> blocks;
  Tensor<T> post_in, post_r, post_t;
  Tensor<T> features;  // input to global average pooling
  Tensor<T> pooled;
};

template <typename T>
struct NetworkOutput {
  Tensor<T> logits;
  std::vector<std::vector<GateDecision<T>>> decisions;  // one entry per gated block
};

template <typename T>
NetworkOutput<T> network_forward(Network<T>& net, const Tensor<T>& images, const Tensor<T>& questions,
                                 const NetworkOptions& options, MacCounter* counter = nullptr,
                                 NetworkCache<T>* cache = nullptr);

template <typename T>
struct NetworkGrads {
  Network<T> params;
  Tensor<T> grad_images;
  Tensor<T> grad_questions;
};

/// gate_grads holds one N x E tensor (or an empty one) per gated block.
template <typename T>
NetworkGrads<T> network_backward(const NetworkCache<T>& cache, const Network<T>& net, const Tensor<T>& grad_logits,
                                 const std::vector<Tensor<T>>& gate_grads = {});

}  // namespace gmc
