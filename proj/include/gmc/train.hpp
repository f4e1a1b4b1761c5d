#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "gmc/netconfig.hpp"

namespace gmc {

/// Colour-at-quadrant task. Each image holds one square patch per quadrant,
/// drawn in one of n_colors colours over a quadrant-specific grey background;
/// the question is a one-hot quadrant index and the label is the colour of
/// that quadrant's patch.
struct SyntheticTask {
  std::uint64_t seed = 0;
  std::int64_t channels = 3;
  std::int64_t size = 32;  // square images
  std::int64_t n_colors = 4;
  std::int64_t n_positions = 4;  // quadrants
  std::int64_t patch = 8;
  std::int64_t n_train = 8192;
  std::int64_t n_val = 2000;

  std::int64_t question_dim() const { return n_positions; }
  void validate() const;
};

/// Task matching a network's input, question width and class count, or throws
/// when the network cannot take it (3 channels, square input, Q = 4).
SyntheticTask task_for_config(const NetworkConfig& cfg, std::uint64_t seed);

template <typename T>
struct Dataset {
  Tensor<T> images;     // N x C x H x W
  Tensor<T> questions;  // N x Q
  std::vector<std::int64_t> labels;
  std::vector<std::int64_t> positions;  // queried quadrant per sample

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  /// Rows `index` copied into a new dataset, in the given order.
  Dataset subset(std::span<const std::int64_t> index) const;
};

enum class Split { train, val };

/// Deterministic in (task.seed, split).
template <typename T>
Dataset<T> generate_dataset(const SyntheticTask& task, Split split);

/// Label recovered straight from the pixels of the queried quadrant, or -1 when
/// no patch colour is found there.
template <typename T>
std::int64_t oracle_label(const SyntheticTask& task, const Dataset<T>& data, std::int64_t sample);

struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.9;
  std::int64_t batch = 64;
  std::int64_t steps = 5000;
  double lambda = 0.01;  // balance-loss weight
  std::optional<std::int64_t> k;
  std::uint64_t seed = 0;  // batch order
  BlockMode mode = BlockMode::sparse;
  /// When set, validation runs every eval_every steps and training stops once
  /// validation accuracy reaches the target, but not before min_steps.
  std::optional<double> target_accuracy;
  std::int64_t eval_every = 250;
  std::int64_t min_steps = 0;

  void validate() const;
};

struct TraceRow {
  std::int64_t step = 0;
  double loss = 0, task_loss = 0, balance_loss = 0, acc = 0;
  std::vector<std::vector<double>> importance;  // per gated block, per expert
};

struct TrainingTrace {
  std::vector<std::string> block_names;  // gated blocks
  std::vector<TraceRow> rows;
  std::vector<std::pair<std::int64_t, double>> val_accuracy;  // (step, accuracy) checkpoints

  /// Mean over the last `window` steps of the block-averaged cv_squared of
  /// batch importance.
  double final_cv_squared(std::size_t window = 50) const;
};

void write_trace_csv(std::ostream& out, const TrainingTrace& trace);

template <typename T>
struct LossBreakdown {
  double total = 0, task = 0, balance = 0;
  std::int64_t correct = 0;
  std::vector<std::vector<double>> importance;
};

/// Loss = cross-entropy + lambda * sum over gated blocks of balance_loss on the
/// batch's pre-top-k gates. Fills grads when non-null. BN runs in training mode
/// and updates its running statistics.
template <typename T>
LossBreakdown<T> training_loss(Network<T>& net, const Tensor<T>& images, const Tensor<T>& questions,
                               std::span<const std::int64_t> labels, double lambda, BlockMode mode,
                               NetworkGrads<T>* grads = nullptr);

using StepCallback = std::function<void(const TraceRow&)>;

/// SGD with momentum (v = m*v + g; p -= lr*v). Throws on a non-finite loss,
/// naming the step.
template <typename T>
TrainingTrace train_loop(Network<T>& net, const Dataset<T>& train, const Dataset<std::type_identity_t<T>>* val,
                         const TrainConfig& cfg, const StepCallback& on_step = {});

struct EvalResult {
  double accuracy = 0;
  std::vector<double> mean_entropy;                   // per gated block, nats
  std::vector<std::vector<std::int64_t>> usage;       // per gated block, top-k counts per expert
};

/// Runs a copy of net with inference-mode BN, so net itself is untouched.
template <typename T>
EvalResult evaluate(const Network<T>& net, const Dataset<T>& data, std::optional<std::int64_t> k = std::nullopt,
                    BlockMode mode = BlockMode::sparse, std::int64_t batch = 250);

/// Writes params.bin (tensor dump) and config.json into dir.
template <typename T>
void save_checkpoint(Network<T>& net, const std::filesystem::path& dir);
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& dir);

}  // namespace gmc
