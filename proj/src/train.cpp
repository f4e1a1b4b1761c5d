#include "gmc/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string_view>

namespace gmc {

namespace {

constexpr std::array<std::array<double, 3>, 8> kPalette{{
    {0.9, 0.1, 0.1},  // red
    {0.1, 0.8, 0.1},  // green
    {0.1, 0.2, 0.9},  // blue
    {0.9, 0.9, 0.1},  // yellow
    {0.9, 0.1, 0.9},  // magenta
    {0.1, 0.9, 0.9},  // cyan
    {1.0, 0.5, 0.0},  // orange
    {0.5, 0.0, 0.6},  // purple
}};

// Stored pixels are shifted by this so the inputs are roughly centred.
constexpr double kPixelShift = 0.5;

double background(std::int64_t quadrant) { return 0.2 + 0.2 * static_cast<double>(quadrant); }

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

template <typename T>
Tensor<T> rows(const Tensor<T>& t, std::span<const std::int64_t> index) {
  Shape s = t.shape();
  const std::int64_t stride = t.numel() / s[0];
  s[0] = static_cast<std::int64_t>(index.size());
  Tensor<T> out(s);
  for (std::size_t i = 0; i < index.size(); ++i)
    std::copy_n(t.ptr() + index[i] * stride, stride, out.ptr() + static_cast<std::int64_t>(i) * stride);
  return out;
}

std::vector<double> column_sums(const TensorD& g) {
  std::vector<double> s(static_cast<std::size_t>(g.dim(1)), 0.0);
  for (std::int64_t i = 0; i < g.dim(0); ++i)
    for (std::int64_t e = 0; e < g.dim(1); ++e) s[static_cast<std::size_t>(e)] += g[i * g.dim(1) + e];
  return s;
}

template <typename T>
TensorD to_double(const Tensor<T>& t) {
  TensorD out(t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<double>(t[i]);
  return out;
}

}  // namespace

void SyntheticTask::validate() const {
  if (channels != 3) throw Error("synthetic task: images must have 3 channels");
  if (n_positions != 4) throw Error("synthetic task: positions are the 4 quadrants");
  if (n_colors < 2 || n_colors > static_cast<std::int64_t>(kPalette.size()))
    throw Error("synthetic task: n_colors must be in [2, " + std::to_string(kPalette.size()) + "]");
  if (size < 4 || size % 2 != 0) throw Error("synthetic task: size must be even and at least 4");
  if (patch < 1 || patch > size / 2) throw Error("synthetic task: patch must fit inside a quadrant");
  if (n_train < 1 || n_val < 1) throw Error("synthetic task: sample counts must be positive");
}

SyntheticTask task_for_config(const NetworkConfig& cfg, std::uint64_t seed) {
  if (cfg.input.height != cfg.input.width) throw Error("synthetic task: the network input must be square");
  SyntheticTask t;
  t.seed = seed;
  t.channels = cfg.input.channels;
  t.size = cfg.input.height;
  t.n_colors = cfg.classes;
  t.n_positions = cfg.question_dim;
  t.validate();
  return t;
}

template <typename T>
Dataset<T> Dataset<T>::subset(std::span<const std::int64_t> index) const {
  Dataset out;
  out.images = rows(images, index);
  out.questions = rows(questions, index);
  for (auto i : index) {
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    out.positions.push_back(positions[static_cast<std::size_t>(i)]);
  }
  return out;
}

template <typename T>
Dataset<T> generate_dataset(const SyntheticTask& task, Split split) {
  task.validate();
  const std::int64_t n = split == Split::train ? task.n_train : task.n_val;
  const std::int64_t s = task.size, half = s / 2, plane = s * s;
  auto rng = seeded(task.seed, split == Split::train ? 1 : 2);
  std::uniform_int_distribution<std::int64_t> colour(0, task.n_colors - 1), quadrant(0, task.n_positions - 1),
      offset(0, half - task.patch);

  Dataset<T> d;
  d.images = Tensor<T>({n, 3, s, s});
  d.questions = Tensor<T>({n, task.n_positions});
  for (std::int64_t i = 0; i < n; ++i) {
    T* img = d.images.ptr() + i * 3 * plane;
    std::array<std::int64_t, 4> colours{};
    for (std::int64_t qd = 0; qd < 4; ++qd) {
      const std::int64_t y0 = (qd / 2) * half, x0 = (qd % 2) * half;
      for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = y0; y < y0 + half; ++y)
          for (std::int64_t x = x0; x < x0 + half; ++x)
            img[c * plane + y * s + x] = static_cast<T>(background(qd) - kPixelShift);
      colours[static_cast<std::size_t>(qd)] = colour(rng);
      const std::int64_t py = y0 + offset(rng), px = x0 + offset(rng);
      const auto& rgb = kPalette[static_cast<std::size_t>(colours[static_cast<std::size_t>(qd)])];
      for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = py; y < py + task.patch; ++y)
          for (std::int64_t x = px; x < px + task.patch; ++x)
            img[c * plane + y * s + x] = static_cast<T>(rgb[static_cast<std::size_t>(c)] - kPixelShift);
    }
    const std::int64_t asked = quadrant(rng);
    d.questions[i * task.n_positions + asked] = T{1};
    d.positions.push_back(asked);
    d.labels.push_back(colours[static_cast<std::size_t>(asked)]);
  }
  return d;
}

template <typename T>
std::int64_t oracle_label(const SyntheticTask& task, const Dataset<T>& data, std::int64_t sample) {
  const std::int64_t s = task.size, half = s / 2, plane = s * s;
  std::int64_t asked = -1;
  for (std::int64_t q = 0; q < task.n_positions; ++q)
    if (data.questions[sample * task.n_positions + q] == T{1}) asked = q;
  if (asked < 0) return -1;
  const T* img = data.images.ptr() + sample * 3 * plane;
  const std::int64_t y0 = (asked / 2) * half, x0 = (asked % 2) * half;
  for (std::int64_t y = y0; y < y0 + half; ++y)
    for (std::int64_t x = x0; x < x0 + half; ++x)
      for (std::int64_t c = 0; c < task.n_colors; ++c) {
        const auto& rgb = kPalette[static_cast<std::size_t>(c)];
        bool match = true;
        for (std::int64_t ch = 0; ch < 3; ++ch)
          match = match && img[ch * plane + y * s + x] == static_cast<T>(rgb[static_cast<std::size_t>(ch)] - kPixelShift);
        if (match) return c;
      }
  return -1;
}

void TrainConfig::validate() const {
  if (!(lr >= 0)) throw Error("train: lr must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw Error("train: momentum must be in [0, 1)");
  if (!(lambda >= 0)) throw Error("train: lambda must be non-negative");
  if (batch < 1) throw Error("train: batch must be at least 1");
  if (steps < 0) throw Error("train: steps must be non-negative");
  if (eval_every < 1) throw Error("train: eval_every must be at least 1");
}

double TrainingTrace::final_cv_squared(std::size_t window) const {
  if (rows.empty()) throw Error("final_cv_squared: empty trace");
  const std::size_t from = rows.size() > window ? rows.size() - window : 0;
  double acc = 0;
  for (std::size_t r = from; r < rows.size(); ++r) {
    double blocks = 0;
    for (const auto& imp : rows[r].importance) blocks += cv_squared<double>(imp);
    acc += blocks / static_cast<double>(rows[r].importance.size());
  }
  return acc / static_cast<double>(rows.size() - from);
}

void write_trace_csv(std::ostream& out, const TrainingTrace& trace) {
  out << "step,loss,task_loss,balance_loss,acc";
  const std::size_t blocks = trace.rows.empty() ? 0 : trace.rows[0].importance.size();
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t e = 0; e < trace.rows[0].importance[b].size(); ++e)
      out << ',' << trace.block_names[b] << ":importance[" << e << ']';
  out << '\n';
  const auto old = out.precision(17);
  for (const auto& r : trace.rows) {
    out << r.step << ',' << r.loss << ',' << r.task_loss << ',' << r.balance_loss << ',' << r.acc;
    for (const auto& imp : r.importance)
      for (double v : imp) out << ',' << v;
    out << '\n';
  }
  out.precision(old);
}

template <typename T>
LossBreakdown<T> training_loss(Network<T>& net, const Tensor<T>& images, const Tensor<T>& questions,
                               std::span<const std::int64_t> labels, double lambda, BlockMode mode,
                               NetworkGrads<T>* grads) {
  NetworkCache<T> cache;
  const auto out = network_forward(net, images, questions, {mode}, nullptr, grads ? &cache : nullptr);
  const auto ce = softmax_cross_entropy(out.logits, labels);
  LossBreakdown<T> r;
  r.task = static_cast<double>(ce.loss);
  r.correct = ce.correct;
  std::vector<Tensor<T>> gate_grads;
  for (const auto& decisions : out.decisions) {
    const auto g = gate_matrix(decisions);
    r.balance += static_cast<double>(balance_loss(g));
    r.importance.push_back(column_sums(to_double(g)));
    if (grads && lambda > 0) {
      auto gg = balance_loss_backward(g);
      for (auto& v : gg.data()) v = static_cast<T>(lambda * static_cast<double>(v));
      gate_grads.push_back(std::move(gg));
    }
  }
  r.total = r.task + lambda * r.balance;
  if (grads) *grads = network_backward(cache, net, ce.grad_logits, gate_grads);
  return r;
}

template <typename T>
TrainingTrace train_loop(Network<T>& net, const Dataset<T>& train, const Dataset<std::type_identity_t<T>>* val,
                         const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (net.gated_block_count() == 0) throw Error("train: the network has no gated blocks");
  if (cfg.k) net.set_k(*cfg.k);
  net.set_bn_mode(BnMode::training);

  TrainingTrace trace;
  for (std::size_t b = 0; b < net.blocks.size(); ++b)
    if (net.blocks[b].gated) trace.block_names.push_back(net.block_names[b]);

  std::vector<Tensor<T>*> params;
  net.for_each_trainable([&](Tensor<T>& t) { params.push_back(&t); });
  std::vector<Tensor<T>> velocity;
  for (auto* p : params) velocity.emplace_back(p->shape());
  const T lr = static_cast<T>(cfg.lr), mom = static_cast<T>(cfg.momentum);

  std::mt19937_64 rng = seeded(cfg.seed, 3);
  std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<std::int64_t> index(static_cast<std::size_t>(cfg.batch));

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    for (auto& i : index) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      i = order[cursor++];
    }
    const auto batch = train.subset(index);
    NetworkGrads<T> g;
    LossBreakdown<T> loss;
    try {
      loss = training_loss(net, batch.images, batch.questions, batch.labels, cfg.lambda, cfg.mode, &g);
    } catch (const Error& e) {
      // The gate controller rejects non-finite activations before a loss exists.
      if (std::string_view(e.what()).starts_with("non-finite"))
        throw Error("training diverged: non-finite loss at step " + std::to_string(step) + " (" + e.what() + ")");
      throw;
    }
    if (!std::isfinite(loss.total))
      throw Error("training diverged: non-finite loss at step " + std::to_string(step));

    std::size_t i = 0;
    g.params.for_each_trainable([&](Tensor<T>& grad) {
      Tensor<T>& v = velocity[i];
      Tensor<T>& p = *params[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        v[j] = mom * v[j] + grad[j];
        p[j] -= lr * v[j];
      }
      ++i;
    });

    TraceRow row;
    row.step = step;
    row.loss = loss.total;
    row.task_loss = loss.task;
    row.balance_loss = loss.balance;
    row.acc = static_cast<double>(loss.correct) / static_cast<double>(cfg.batch);
    row.importance = loss.importance;
    trace.rows.push_back(row);
    if (on_step) on_step(trace.rows.back());

    if (val && cfg.target_accuracy && (step + 1) % cfg.eval_every == 0) {
      const double acc = evaluate(net, *val, std::nullopt, cfg.mode).accuracy;
      trace.val_accuracy.emplace_back(step + 1, acc);
      if (acc >= *cfg.target_accuracy && step + 1 >= cfg.min_steps) break;
    }
  }
  const std::int64_t done = static_cast<std::int64_t>(trace.rows.size());
  if (val && (trace.val_accuracy.empty() || trace.val_accuracy.back().first != done))
    trace.val_accuracy.emplace_back(done, evaluate(net, *val, std::nullopt, cfg.mode).accuracy);
  return trace;
}

template <typename T>
EvalResult evaluate(const Network<T>& net, const Dataset<T>& data, std::optional<std::int64_t> k, BlockMode mode,
                    std::int64_t batch) {
  if (batch < 1) throw Error("evaluate: batch must be at least 1");
  Network<T> m = net;
  if (k) m.set_k(*k);
  m.set_bn_mode(BnMode::inference);

  EvalResult r;
  const std::size_t blocks = m.gated_block_count();
  r.mean_entropy.assign(blocks, 0.0);
  r.usage.resize(blocks);
  std::int64_t correct = 0;
  const std::int64_t n = data.size();
  for (std::int64_t lo = 0; lo < n; lo += batch) {
    std::vector<std::int64_t> index(static_cast<std::size_t>(std::min(batch, n - lo)));
    std::iota(index.begin(), index.end(), lo);
    const auto part = data.subset(index);
    const auto out = network_forward(m, part.images, part.questions, {mode});
    const std::int64_t classes = out.logits.dim(1);
    for (std::size_t i = 0; i < index.size(); ++i) {
      const T* row = out.logits.ptr() + static_cast<std::int64_t>(i) * classes;
      const auto best = std::max_element(row, row + classes) - row;
      correct += best == part.labels[i] ? 1 : 0;
    }
    for (std::size_t b = 0; b < blocks; ++b) {
      auto& usage = r.usage[b];
      for (const auto& d : out.decisions[b]) {
        if (usage.empty()) usage.assign(d.g_norm.size(), 0);
        for (auto e : d.selected) ++usage[static_cast<std::size_t>(e)];
        double h = 0;
        for (T g : d.g_norm)
          if (g > T{0}) h -= static_cast<double>(g) * std::log(static_cast<double>(g));
        r.mean_entropy[b] += h;
      }
    }
  }
  r.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  for (auto& h : r.mean_entropy) h /= n ? static_cast<double>(n) : 1.0;
  return r;
}

template <typename T>
void save_checkpoint(Network<T>& net, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_parameters(net, dir / "params.bin");
  std::ofstream out(dir / "config.json", std::ios::binary);
  if (!out) throw Error("cannot write " + (dir / "config.json").string());
  out << serialize_config(net.config);
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto cfg = load_config(dir / "config.json");
  auto net = build_network<T>(cfg, cfg.seed);
  load_parameters(net, dir / "params.bin");
  return net;
}

#define GMC_INSTANTIATE(T)                                                                                          \
  template struct Dataset<T>;                                                                                       \
  template Dataset<T> generate_dataset(const SyntheticTask&, Split);                                                \
  template std::int64_t oracle_label(const SyntheticTask&, const Dataset<T>&, std::int64_t);                        \
  template LossBreakdown<T> training_loss(Network<T>&, const Tensor<T>&, const Tensor<T>&,                          \
                                          std::span<const std::int64_t>, double, BlockMode, NetworkGrads<T>*);      \
  template TrainingTrace train_loop(Network<T>&, const Dataset<T>&, const Dataset<T>*, const TrainConfig&,          \
                                    const StepCallback&);                                                           \
  template EvalResult evaluate(const Network<T>&, const Dataset<T>&, std::optional<std::int64_t>, BlockMode, std::int64_t); \
  template void save_checkpoint(Network<T>&, const std::filesystem::path&);                                         \
  template Network<T> load_checkpoint(const std::filesystem::path&);

GMC_INSTANTIATE(float)
GMC_INSTANTIATE(double)
#undef GMC_INSTANTIATE

}  // namespace gmc
