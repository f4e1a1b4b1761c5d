// gmc: command-line front end. Exit codes: 0 success, 1 a check failed or the
// run itself failed, 2 bad usage (flags, config, or arguments out of range).

#include <CLI11.hpp>

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <regex>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmc/flops.hpp"
#include "gmc/gate.hpp"
#include "gmc/train.hpp"
#include "gmc/verify.hpp"

namespace fs = std::filesystem;
using namespace gmc;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown once a check has run and reported its own failure.
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

NetworkConfig read_config(const std::string& path) {
  try {
    return load_config(path);
  } catch (const ConfigError& e) {
    throw UsageError(std::string("invalid config ") + path + ":\n" + e.what());
  }
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3E", v);
  return buf;
}

BlockMode parse_mode(const std::string& s) { return s == "dense" ? BlockMode::dense : BlockMode::sparse; }

// ---------------------------------------------------------------------------
// flops

struct FlopsArgs {
  std::string config;
  std::vector<std::int64_t> ks;
  std::string csv;
  std::string input;
  std::int64_t batch = 1;
};

fs::path csv_path_for(const fs::path& base, std::int64_t k, bool several) {
  if (!several) return base;
  fs::path p = base;
  p.replace_filename(base.stem().string() + "_k" + std::to_string(k) + base.extension().string());
  return p;
}

int cmd_flops(const FlopsArgs& a) {
  const auto cfg = read_config(a.config);
  FlopsOptions base;
  base.batch = a.batch;
  if (!a.input.empty()) {
    std::smatch m;
    static const std::regex hw(R"((\d+)[xX](\d+))");
    if (!std::regex_match(a.input, m, hw)) throw UsageError("--input expects HxW, e.g. 224x224");
    base.height = std::stoll(m[1]);
    base.width = std::stoll(m[2]);
  }

  std::vector<std::optional<std::int64_t>> ks;
  for (auto k : a.ks) ks.emplace_back(k);
  if (ks.empty()) ks.emplace_back(std::nullopt);

  std::vector<FlopsReport> reports;
  for (const auto& k : ks) {
    FlopsOptions o = base;
    o.k = k;
    try {
      reports.push_back(network_flops(cfg, o));
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }

  const auto& r0 = reports.front();
  std::printf("%s  input %" PRId64 "x%" PRId64 "x%" PRId64 "  batch %" PRId64 "\n", cfg.name.c_str(), cfg.input.channels,
              r0.height, r0.width, r0.batch);
  std::printf("headline FLOPS are convolution multiply-accumulates; aux and linear are reported apart\n\n");
  std::printf("%6s %16s %11s %14s %14s %11s %9s\n", "k", "conv_macs", "conv (sci)", "aux_ops", "linear_macs", "published",
              "pub/ours");
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const std::string klabel = ks[i] ? std::to_string(*ks[i]) : "cfg";
    std::string published = "-", ratio = "-";
    const bool reference_applies = ks[i] && r.height == cfg.input.height && r.width == cfg.input.width && r.batch == 1;
    if (reference_applies) {
      for (const auto& ref : cfg.reference_flops)
        if (ref.k == *ks[i]) {
          published = sci(ref.flops);
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.2f", ref.flops / static_cast<double>(r.total_conv_macs));
          ratio = buf;
        }
    }
    std::printf("%6s %16" PRId64 " %11s %14" PRId64 " %14" PRId64 " %11s %9s\n", klabel.c_str(), r.total_conv_macs,
                sci(static_cast<double>(r.total_conv_macs)).c_str(), r.total_aux, r.total_linear_macs, published.c_str(),
                ratio.c_str());
  }

  // conv_macs(k) = b + a*k whenever every gated block runs the same k.
  std::map<std::int64_t, std::int64_t> by_k;
  for (std::size_t i = 0; i < reports.size(); ++i)
    if (ks[i]) by_k[*ks[i]] = reports[i].total_conv_macs;
  if (by_k.size() >= 2) {
    const auto [k1, c1] = *by_k.begin();
    const auto [k2, c2] = *std::next(by_k.begin());
    const std::int64_t num = c2 - c1, den = k2 - k1;
    bool affine = num % den == 0;
    const std::int64_t slope = affine ? num / den : 0, intercept = c1 - slope * k1;
    for (const auto& [k, c] : by_k) affine = affine && c == intercept + slope * k;
    if (affine) {
      std::printf("\naffine in k: conv_macs(k) = %" PRId64 " + %" PRId64 " * k (exact for every row)\n", intercept,
                  slope);
      std::printf("gated-stage portion %" PRId64 " * k:", slope);
      for (const auto& [k, c] : by_k) std::printf("  k=%" PRId64 " -> %" PRId64, k, slope * k);
      std::printf("\n");
    } else {
      std::printf("\nnot affine in k across the requested rows\n");
    }
  }

  if (!a.csv.empty()) {
    for (std::size_t i = 0; i < reports.size(); ++i) {
      const auto path = csv_path_for(a.csv, ks[i].value_or(0), reports.size() > 1);
      std::ofstream out(path);
      if (!out) throw Error("cannot write " + path.string());
      write_flops_csv(out, reports[i]);
      std::printf("wrote %s\n", path.string().c_str());
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  std::string config;
  std::int64_t trials = 200;
  std::uint64_t seed = 0;
  std::string dtype = "f64";
  bool inject_fault = false;
};

int cmd_verify(const VerifyArgs& a) {
  const auto cfg = read_config(a.config);
  if (a.trials < 1) throw UsageError("--trials must be at least 1");
  if (gated_block_specs(cfg).empty()) throw UsageError("config has no gated blocks to verify");
  const auto rep = a.dtype == "f32" ? verify_config<float>(cfg, a.trials, a.seed, a.inject_fault)
                                    : verify_config<double>(cfg, a.trials, a.seed, a.inject_fault);
  std::printf("verify %s: %" PRId64 " trials, %s, seed %" PRIu64 "%s\n", cfg.name.c_str(), rep.trials, a.dtype.c_str(),
              a.seed, a.inject_fault ? ", gather fault injected" : "");
  std::printf("max |sparse - masked| forward   %.3e\n", rep.max_forward);
  std::printf("max |sparse - masked| backward  %.3e%s\n", rep.max_backward,
              rep.check_backward ? "" : "  (reported only in f32)");
  std::printf("tolerance %.0e\n", rep.tolerance);
  if (!rep.passed()) {
    std::printf("FAIL: worst trial %" PRId64 ", seed %" PRIu64 " (replay with --seed %" PRIu64 " --trials 1)\n",
                rep.worst_trial, rep.worst_seed, rep.worst_seed);
    throw CheckFailed("sparse execution disagrees with the masked oracle");
  }
  std::printf("PASS\n");
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  bool all = false;
  std::string dtype = "f64";
  std::uint64_t seed = 1;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (a.dtype != "f64") throw UsageError("gradient checks run in f64 only; central differences are not meaningful in f32");
  constexpr double kTolerance = 1e-4;
  const auto results = a.all ? gradcheck_suite(a.seed) : gradcheck_primitives(a.seed);
  std::printf("gradcheck %s, f64, h 1e-5, seed %" PRIu64 "\n\n", a.all ? "all" : "primitives", a.seed);
  std::printf("%-54s %9s %8s %11s\n", "check", "checked", "skipped", "rel. error");
  double worst = 0;
  std::int64_t skipped = 0;
  for (const auto& r : results) {
    std::printf("%-54s %9" PRId64 " %8" PRId64 " %11.3e%s\n", r.name.c_str(), r.checked, r.skipped, r.error,
                r.error > kTolerance ? "  FAIL" : "");
    worst = std::max(worst, r.error);
    skipped += r.skipped;
  }
  std::printf("\nworst relative error %.3e (tolerance %.0e)", worst, kTolerance);
  if (skipped) std::printf(", %" PRId64 " kink-straddling coordinates skipped", skipped);
  std::printf("\n");
  if (worst > kTolerance) {
    std::printf("FAIL\n");
    throw CheckFailed("finite differences disagree with the backward pass");
  }
  std::printf("PASS\n");
  return 0;
}

// ---------------------------------------------------------------------------
// train / eval / inspect-gates

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::int64_t steps = 5000;
  double lr = 0.05, momentum = 0.9, lambda = 0.01;
  std::int64_t batch = 64;
  std::optional<std::int64_t> k;
  std::string mode = "sparse";
  std::int64_t train_size = 8192, val_size = 2000;
  std::optional<double> target;
  std::int64_t eval_every = 250, min_steps = 0;
  std::string out = "gmc_run";
  std::string dtype = "f32";
};

template <typename T>
int run_train(const TrainArgs& a) {
  const auto cfg = read_config(a.config);
  const std::uint64_t seed = a.seed.value_or(cfg.seed);
  SyntheticTask task;
  TrainConfig tc;
  try {
    task = task_for_config(cfg, seed);
    task.n_train = a.train_size;
    task.n_val = a.val_size;
    task.validate();
    tc.lr = a.lr;
    tc.momentum = a.momentum;
    tc.batch = a.batch;
    tc.steps = a.steps;
    tc.lambda = a.lambda;
    tc.k = a.k;
    tc.seed = seed;
    tc.mode = parse_mode(a.mode);
    tc.target_accuracy = a.target;
    tc.eval_every = a.eval_every;
    tc.min_steps = a.min_steps;
    tc.validate();
    if (a.k) build_network<T>(cfg, seed).set_k(*a.k);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }

  std::printf("train %s: seed %" PRIu64 ", %" PRId64 " steps, batch %" PRId64 ", lr %g, momentum %g, lambda %g, %s, %s\n",
              cfg.name.c_str(), seed, tc.steps, tc.batch, tc.lr, tc.momentum, tc.lambda, a.mode.c_str(),
              a.dtype.c_str());
  const auto train = generate_dataset<T>(task, Split::train);
  const auto val = generate_dataset<T>(task, Split::val);
  auto net = build_network<T>(cfg, seed);

  double loss_sum = 0, acc_sum = 0;
  std::int64_t seen = 0;
  const auto trace = train_loop(net, train, &val, tc, [&](const TraceRow& row) {
    loss_sum += row.loss;
    acc_sum += row.acc;
    ++seen;
    if ((row.step + 1) % tc.eval_every == 0) {
      std::printf("step %6" PRId64 "  loss %.4f  batch acc %.4f\n", row.step + 1, loss_sum / static_cast<double>(seen),
                  acc_sum / static_cast<double>(seen));
      std::fflush(stdout);
      loss_sum = acc_sum = 0;
      seen = 0;
    }
  });

  fs::create_directories(a.out);
  const fs::path trace_path = fs::path(a.out) / "trace.csv";
  {
    std::ofstream os(trace_path);
    if (!os) throw Error("cannot write " + trace_path.string());
    write_trace_csv(os, trace);
  }
  save_checkpoint(net, fs::path(a.out) / "checkpoint");

  for (const auto& [step, acc] : trace.val_accuracy) std::printf("val acc @ %" PRId64 ": %.4f\n", step, acc);
  std::printf("steps run %zu, final cv_squared of expert importance %.4f\n", trace.rows.size(),
              trace.final_cv_squared());
  std::printf("wrote %s and %s\n", trace_path.string().c_str(), (fs::path(a.out) / "checkpoint").string().c_str());
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::int64_t val_size = 2000;
  std::optional<std::int64_t> k;
  std::string mode = "sparse";
  std::string dtype = "f32";
};

template <typename T>
Network<T> open_checkpoint(const std::string& dir) {
  try {
    return load_checkpoint<T>(dir);
  } catch (const ConfigError& e) {
    throw UsageError(std::string("invalid checkpoint config: ") + e.what());
  }
}

template <typename T>
void check_k(Network<T> net, std::optional<std::int64_t> k) {
  if (!k) return;
  try {
    net.set_k(*k);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

template <typename T>
int run_eval(const EvalArgs& a) {
  const auto net = open_checkpoint<T>(a.checkpoint);
  check_k(net, a.k);
  const std::uint64_t seed = a.seed.value_or(net.config.seed);
  SyntheticTask task;
  try {
    task = task_for_config(net.config, seed);
    task.n_val = a.val_size;
    task.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const auto val = generate_dataset<T>(task, Split::val);
  const auto r = evaluate(net, val, a.k, parse_mode(a.mode));
  std::printf("eval %s: %" PRId64 " validation samples, data seed %" PRIu64 ", %s\n", net.config.name.c_str(),
              val.size(), seed, a.mode.c_str());
  std::printf("accuracy %.4f\n", r.accuracy);
  std::size_t g = 0;
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    if (!net.blocks[b].gated) continue;
    std::printf("%s  mean gate entropy %.4f nats  top-k usage", net.block_names[b].c_str(), r.mean_entropy[g]);
    for (auto u : r.usage[g]) std::printf(" %" PRId64, u);
    std::printf("\n");
    ++g;
  }
  return 0;
}

struct InspectArgs {
  std::string checkpoint, config;
  std::optional<std::uint64_t> seed;
  std::int64_t samples = 32;
  std::optional<std::int64_t> k;
  std::string out = "-";
  std::string dtype = "f32";
  std::string inputs = "synthetic";
};

template <typename T>
int run_inspect(const InspectArgs& a) {
  Network<T> net;
  if (!a.checkpoint.empty()) {
    net = open_checkpoint<T>(a.checkpoint);
  } else {
    const auto cfg = read_config(a.config);
    net = build_network<T>(cfg, a.seed.value_or(cfg.seed));
  }
  if (a.k) {
    check_k(net, a.k);
    net.set_k(*a.k);
  }
  const std::uint64_t seed = a.seed.value_or(net.config.seed);
  if (a.samples < 1) throw UsageError("--samples must be at least 1");
  Tensor<T> images, questions;
  if (a.inputs == "random") {
    const auto& in = net.config.input;
    images = Tensor<T>(Shape{a.samples, in.channels, in.height, in.width});
    questions = Tensor<T>(Shape{a.samples, net.config.question_dim});
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    for (auto& v : images.data()) v = static_cast<T>(nd(rng));
    for (auto& v : questions.data()) v = static_cast<T>(nd(rng));
  } else {
    SyntheticTask task;
    try {
      task = task_for_config(net.config, seed);
      task.n_val = a.samples;
      task.validate();
    } catch (const Error& e) {
      throw UsageError(std::string(e.what()) + " (use --inputs random for this network)");
    }
    auto data = generate_dataset<T>(task, Split::val);
    images = std::move(data.images);
    questions = std::move(data.questions);
  }
  net.set_bn_mode(BnMode::inference);
  const auto out = network_forward(net, images, questions, NetworkOptions{});

  std::vector<GateCsvRow> rows;
  std::size_t g = 0;
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    if (!net.blocks[b].gated) continue;
    const auto& decisions = out.decisions[g];
    for (std::size_t n = 0; n < decisions.size(); ++n) {
      const auto& d = decisions[n];
      rows.push_back({static_cast<std::int64_t>(g), static_cast<std::int64_t>(n), net.blocks[b].k, d.fallback_used,
                      std::vector<double>(d.g_norm.begin(), d.g_norm.end()), d.selected});
    }
    std::fprintf(stderr, "block_id %zu = %s\n", g, net.block_names[b].c_str());
    ++g;
  }
  if (a.out == "-") {
    write_gate_csv(std::cout, rows);
  } else {
    std::ofstream os(a.out);
    if (!os) throw Error("cannot write " + a.out);
    write_gate_csv(os, rows);
    std::fprintf(stderr, "wrote %zu rows to %s\n", rows.size(), a.out.c_str());
  }
  std::fprintf(stderr, "data seed %" PRIu64 "\n", seed);
  return 0;
}

template <typename Fn>
int by_dtype(const std::string& dtype, Fn&& fn) {
  return dtype == "f64" ? fn(double{}) : fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Question-gated sparse ResNeXt engine: FLOPS model, verification and toy training"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "gmc 0.1.0");
  const auto dtypes = CLI::IsMember({"f32", "f64"});
  const auto modes = CLI::IsMember({"sparse", "dense"});

  FlopsArgs fa;
  auto* flops = app.add_subcommand("flops", "Analytical FLOPS per k, with the published reference column");
  flops->add_option("--config", fa.config, "network config (JSON)")->required()->check(CLI::ExistingFile);
  flops->add_option("--k", fa.ks, "active experts, comma separated; default: the config's k")->delimiter(',');
  flops->add_option("--csv", fa.csv, "per-layer CSV (one file per k, suffixed _k<k>, when several)");
  flops->add_option("--input", fa.input, "input extent HxW, overriding the config");
  flops->add_option("--batch", fa.batch, "batch size")->check(CLI::PositiveNumber);

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "Sparse execution against the masked-gate oracle on random blocks");
  verify->add_option("--config", va.config, "network config (JSON)")->required()->check(CLI::ExistingFile);
  verify->add_option("--trials", va.trials, "number of randomized trials")->capture_default_str();
  verify->add_option("--seed", va.seed, "first trial seed")->capture_default_str();
  verify->add_option("--dtype", va.dtype, "f32 or f64")->check(dtypes)->capture_default_str();
  verify->add_flag("--inject-fault", va.inject_fault, "corrupt one gathered column (the check must then fail)");

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of every backward pass");
  gradcheck->add_flag("--all", ga.all, "include the gate controller, gated blocks and whole-network loss");
  gradcheck->add_option("--dtype", ga.dtype, "f64 only")->check(dtypes)->capture_default_str();
  gradcheck->add_option("--seed", ga.seed, "instance seed")->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train on the synthetic colour-at-quadrant task");
  train->add_option("--config", ta.config, "network config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", ta.seed, "seed for init, data and batch order; default: the config's");
  train->add_option("--steps", ta.steps)->capture_default_str();
  train->add_option("--lr", ta.lr)->capture_default_str();
  train->add_option("--momentum", ta.momentum)->capture_default_str();
  train->add_option("--batch", ta.batch)->capture_default_str();
  train->add_option("--lambda", ta.lambda, "balance-loss weight")->capture_default_str();
  train->add_option("--k", ta.k, "active experts in every gated block");
  train->add_option("--mode", ta.mode, "sparse or dense execution")->check(modes)->capture_default_str();
  train->add_option("--train-size", ta.train_size)->capture_default_str();
  train->add_option("--val-size", ta.val_size)->capture_default_str();
  train->add_option("--target-acc", ta.target, "stop once validation accuracy reaches this");
  train->add_option("--eval-every", ta.eval_every, "progress and validation interval")->capture_default_str();
  train->add_option("--min-steps", ta.min_steps, "never stop early before this step")->capture_default_str();
  train->add_option("--out", ta.out, "output directory for trace.csv and checkpoint/")->capture_default_str();
  train->add_option("--dtype", ta.dtype)->check(dtypes)->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Validation accuracy and gate statistics of a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--seed", ea.seed, "data seed; default: the config's");
  eval->add_option("--val-size", ea.val_size)->capture_default_str();
  eval->add_option("--k", ea.k);
  eval->add_option("--mode", ea.mode)->check(modes)->capture_default_str();
  eval->add_option("--dtype", ea.dtype)->check(dtypes)->capture_default_str();

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect-gates", "Dump per-sample gate decisions as CSV");
  auto* ck = inspect->add_option("--checkpoint", ia.checkpoint, "checkpoint directory")->check(CLI::ExistingDirectory);
  auto* cf = inspect->add_option("--config", ia.config, "fresh network from a config")->check(CLI::ExistingFile);
  ck->excludes(cf);
  inspect->add_option("--seed", ia.seed, "data (and init) seed; default: the config's");
  inspect->add_option("--samples", ia.samples)->capture_default_str();
  inspect->add_option("--k", ia.k);
  inspect->add_option("--out", ia.out, "CSV path, - for stdout")->capture_default_str();
  inspect->add_option("--dtype", ia.dtype)->check(dtypes)->capture_default_str();
  inspect->add_option("--inputs", ia.inputs, "synthetic task samples, or seeded Gaussian images and questions")
      ->check(CLI::IsMember({"synthetic", "random"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*flops) return cmd_flops(fa);
    if (*verify) return cmd_verify(va);
    if (*gradcheck) return cmd_gradcheck(ga);
    if (*train) return by_dtype(ta.dtype, [&](auto t) { return run_train<decltype(t)>(ta); });
    if (*eval) return by_dtype(ea.dtype, [&](auto t) { return run_eval<decltype(t)>(ea); });
    if (*inspect) {
      if (ia.checkpoint.empty() && ia.config.empty()) throw UsageError("inspect-gates needs --checkpoint or --config");
      return by_dtype(ia.dtype, [&](auto t) { return run_inspect<decltype(t)>(ia); });
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CheckFailed& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
