#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gmc/netconfig.hpp"

namespace gmc {

/// Geometry of one randomized gated block.
struct BlockSpec {
  std::int64_t batch = 2;
  std::int64_t c = 8, c_out = 8, e = 4, d = 2, k = 2, stride = 1;
  std::int64_t height = 6, width = 6;
  std::int64_t question = 5, hidden = 6;
};

/// He-scaled conv weights, BN affine terms drawn away from their defaults and
/// a Gaussian controller, so that gates, relus and BN all carry signal.
template <typename T>
GatedBlockParams<T> random_block_params(const BlockSpec& spec, std::mt19937_64& rng);

struct TrialResult {
  double forward = 0;   // max |y_sparse - y_masked|
  double backward = 0;  // max over every gradient tensor
};

/// Sparse execution against the masked-gate oracle for one random block,
/// input, upstream gradient and gate gradient drawn from seed.
template <typename T>
TrialResult block_equivalence_trial(const BlockSpec& spec, std::uint64_t seed, bool inject_fault = false);

struct VerifyReport {
  std::int64_t trials = 0;
  double max_forward = 0, max_backward = 0;
  std::int64_t worst_trial = -1;
  std::uint64_t worst_seed = 0;
  double tolerance = 0;
  /// Gradients are only held to the tolerance in double precision; in float
  /// they sum thousands of rounded terms and are reported, not gated.
  bool check_backward = true;
  bool passed() const { return max_forward <= tolerance && (!check_backward || max_backward <= tolerance); }
};

/// One spec per gated block of cfg, at its real channel counts and input extent.
std::vector<BlockSpec> gated_block_specs(const NetworkConfig& cfg);

/// Runs `trials` equivalence trials over the gated blocks of cfg. Trial t is
/// fully determined by seed + t, which picks the block, k in [1, E] and the
/// batch size, so `trials = 1` at a reported seed replays that trial. Tolerance is 1e-10 for double and 1e-5 for float (forward only).
template <typename T>
VerifyReport verify_config(const NetworkConfig& cfg, std::int64_t trials, std::uint64_t seed,
                           bool inject_fault = false);

struct GradCheck {
  std::string name;
  double error = 0;  // worst relative error over the checked coordinates
  std::int64_t checked = 0;
  /// Coordinates whose +h and -h probes fell on different sides of a relu,
  /// top-k or fallback boundary, where no derivative exists.
  std::int64_t skipped = 0;
};

/// Finite-difference checks (double precision, h = 1e-5) of every backward
/// pass: convolution, batch norm, linear, softmax, tanh, relu composites,
/// pooling, cross-entropy, the gate controller, the gated block in each mode,
/// and the full training loss including the balance term. The composite checks
/// skip kink-straddling coordinates and report how many.
std::vector<GradCheck> gradcheck_suite(std::uint64_t seed);

/// The single-operation half of the suite: everything up to cross-entropy and
/// the balance loss.
std::vector<GradCheck> gradcheck_primitives(std::uint64_t seed);
/// Gate controller, gated block and whole-network loss. On these, a coordinate
/// whose true derivative is far below the loss scale (saturated tanh or
/// attention) scores its rounding noise against the 1e-8 floor, so a given
/// seed can exceed 1e-4 without any gradient being wrong.
std::vector<GradCheck> gradcheck_composites(std::uint64_t seed);

}  // namespace gmc
