#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "gmc/gate.hpp"
#include "test_support.hpp"

using namespace gmc;
using gmc::testing::randn;
using gmc::testing::random_controller;

namespace {

using Member = TensorD GateControllerParams<double>::*;

const std::vector<std::pair<const char*, Member>>& controller_members() {
  static const std::vector<std::pair<const char*, Member>> m{
      {"image_to_hidden", &GateControllerParams<double>::image_to_hidden},
      {"question_to_hidden", &GateControllerParams<double>::question_to_hidden},
      {"hidden_bias", &GateControllerParams<double>::hidden_bias},
      {"score_weight", &GateControllerParams<double>::score_weight},
      {"score_bias", &GateControllerParams<double>::score_bias},
      {"projection", &GateControllerParams<double>::projection},
      {"gate_weight", &GateControllerParams<double>::gate_weight},
      {"gate_bias", &GateControllerParams<double>::gate_bias},
  };
  return m;
}

// Scalar transcription of the attention equations, written without any
// library helpers so it can serve as an independent oracle.
struct ScalarAttention {
  std::vector<double> p;
  std::vector<double> pooled;
  std::vector<double> v_tilde;
};

ScalarAttention scalar_attention(const TensorD& v, const TensorD& q, const GateControllerParams<double>& prm) {
  const auto d = v.dim(0), f = v.dim(1), hd = prm.image_to_hidden.dim(0), qd = q.numel();
  std::vector<double> score(d);
  for (std::int64_t r = 0; r < d; ++r) {
    double s = prm.score_bias[0];
    for (std::int64_t h = 0; h < hd; ++h) {
      double z = prm.hidden_bias[h];
      for (std::int64_t j = 0; j < f; ++j) z += prm.image_to_hidden[h * f + j] * v[r * f + j];
      for (std::int64_t j = 0; j < qd; ++j) z += prm.question_to_hidden[h * qd + j] * q[j];
      s += prm.score_weight[h] * std::tanh(z);
    }
    score[r] = s;
  }
  const double mx = *std::max_element(score.begin(), score.end());
  double den = 0;
  for (auto s : score) den += std::exp(s - mx);
  ScalarAttention out;
  for (auto s : score) out.p.push_back(std::exp(s - mx) / den);
  out.pooled.assign(f, 0.0);
  for (std::int64_t r = 0; r < d; ++r)
    for (std::int64_t j = 0; j < f; ++j) out.pooled[j] += out.p[r] * v[r * f + j];
  if (prm.projection.empty()) {
    out.v_tilde = out.pooled;
  } else {
    out.v_tilde.assign(qd, 0.0);
    for (std::int64_t i = 0; i < qd; ++i)
      for (std::int64_t j = 0; j < f; ++j) out.v_tilde[i] += prm.projection[i * f + j] * out.pooled[j];
  }
  return out;
}

// Controller with gate_weight zero and a bias that directly sets g_raw.
GateControllerParams<double> fixed_gate_controller(const std::vector<double>& g_raw, std::int64_t q = 2) {
  std::mt19937_64 rng(99);
  auto p = random_controller(q, q, 3, static_cast<std::int64_t>(g_raw.size()), rng);
  p.gate_weight.fill(0.0);
  p.gate_bias = TensorD({static_cast<std::int64_t>(g_raw.size())}, g_raw);
  return p;
}

double sum_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST(GateWeights, ReluThenL1) {
  const auto p = fixed_gate_controller({2, -1, 2});
  const auto d = gate_weights(TensorD({2}), TensorD({2}), p);
  EXPECT_EQ(d.g_norm, (std::vector<double>{0.5, 0.0, 0.5}));
  EXPECT_FALSE(d.fallback_used);
}

TEST(GateWeights, AllNegativeFallsBackToUniform) {
  const auto p = fixed_gate_controller({-1, -0.5, -3, -2});
  const auto d = gate_weights(TensorD({2}), TensorD({2}), p);
  EXPECT_TRUE(d.fallback_used);
  EXPECT_EQ(d.g_norm, std::vector<double>(4, 0.25));
  EXPECT_EQ(topk_select<double>(d.g_norm, 2), (std::vector<std::int64_t>{0, 1}));
}

TEST(GateWeights, RejectsNonFiniteInput) {
  const auto p = fixed_gate_controller({1, 1});
  TensorD bad({2}, {0.0, std::nan("")});
  EXPECT_THROW(gate_weights(bad, TensorD({2}), p), Error);
  EXPECT_THROW(gate_weights(TensorD({3}), TensorD({2}), p), Error);
}

TEST(GateWeights, MatchesAffineMap) {
  std::mt19937_64 rng(11);
  const auto p = random_controller(5, 5, 4, 6, rng);
  const auto vt = randn({5}, rng), q = randn({5}, rng);
  const auto d = gate_weights(vt, q, p);
  for (std::int64_t e = 0; e < 6; ++e) {
    double g = p.gate_bias[e];
    for (std::int64_t j = 0; j < 5; ++j) g += p.gate_weight[e * 5 + j] * (vt[j] + q[j]);
    EXPECT_NEAR(d.g_raw[e], g, 1e-14);
  }
}

TEST(TopK, Examples) {
  const std::vector<double> g{0.1, 0.4, 0.2, 0.3};
  EXPECT_EQ(topk_select<double>(g, 2), (std::vector<std::int64_t>{1, 3}));
  const std::vector<double> uni(4, 0.25);
  EXPECT_EQ(topk_select<double>(uni, 2), (std::vector<std::int64_t>{0, 1}));
  EXPECT_EQ(topk_select<double>(g, 4), (std::vector<std::int64_t>{0, 1, 2, 3}));
}

TEST(TopK, RangeErrors) {
  const std::vector<double> g{0.5, 0.5};
  EXPECT_THROW(topk_select<double>(g, 0), Error);
  EXPECT_THROW(topk_select<double>(g, 3), Error);
}

TEST(TopK, InvariantUnderIncreasingTransform) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> level(0, 5);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> g(8);
    for (auto& v : g) v = level(rng) / 5.0;  // coarse levels force ties
    std::vector<double> h(8);
    std::transform(g.begin(), g.end(), h.begin(), [](double v) { return std::exp(3 * v) + v; });
    const std::int64_t k = 1 + t % 8;
    const auto a = topk_select<double>(g, k);
    ASSERT_EQ(a, topk_select<double>(h, k));
    ASSERT_TRUE(std::is_sorted(a.begin(), a.end()));
    // Brute-force: each selected entry beats or ties every rejected one, and
    // on a tie the selected index is smaller.
    for (std::int64_t i = 0; i < 8; ++i) {
      if (std::find(a.begin(), a.end(), i) != a.end()) continue;
      for (auto s : a) ASSERT_TRUE(g[s] > g[i] || (g[s] == g[i] && s < i));
    }
  }
}

TEST(CvSquared, Examples) {
  const std::vector<double> flat(4, 0.25);
  EXPECT_EQ(cv_squared<double>(flat), 0.0);
  const std::vector<double> v{1, 3};
  EXPECT_DOUBLE_EQ(cv_squared<double>(v), 0.25);
  const std::vector<double> zeros{0, 0};
  try {
    cv_squared<double>(zeros);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "degenerate importance vector");
  }
}

TEST(CvSquared, ScaleInvariantAndMatchesClosedForm) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> x(1 + t % 9);
    for (auto& v : x) v = u(rng);
    x[0] += 0.1;
    const double cv = cv_squared<double>(x);
    double s = 0, sq = 0;
    for (auto v : x) {
      s += v;
      sq += v * v;
    }
    ASSERT_NEAR(cv, static_cast<double>(x.size()) * sq / (s * s) - 1.0, 1e-12);
    std::vector<double> scaled(x);
    for (auto& v : scaled) v *= 7.25;
    ASSERT_NEAR(cv_squared<double>(scaled), cv, 1e-12);
  }
}

TEST(BalanceLoss, Examples) {
  EXPECT_EQ(balance_loss(TensorD({3, 4}, std::vector<double>(12, 0.25))), 0.0);
  EXPECT_EQ(balance_loss(TensorD({2, 2}, {1, 0, 0, 1})), 0.0);
  EXPECT_DOUBLE_EQ(balance_loss(TensorD({2, 2}, {1, 0, 1, 0})), 1.0);
  EXPECT_THROW(balance_loss(TensorD{}), Error);
}

TEST(BalanceLoss, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  auto gates = gmc::testing::uniform({5, 6}, rng, 0.05, 1.0);
  const auto g = balance_loss_backward(gates);
  EXPECT_LE(finite_diff_check([](const TensorD& x) { return balance_loss(x); }, gates, g), 1e-7);
}

TEST(AttentionPool, SingleRegionAndIdenticalRegions) {
  std::mt19937_64 rng(15);
  const auto p = random_controller(4, 3, 5, 2, rng);
  const auto q = randn({3}, rng);
  const auto one = randn({1, 4}, rng);
  const auto a1 = attention_pool(one, q, p);
  EXPECT_EQ(a1.attention[0], 1.0);
  for (std::int64_t i = 0; i < 3; ++i) {
    double acc = 0;
    for (std::int64_t j = 0; j < 4; ++j) acc += p.projection[i * 4 + j] * one[j];
    EXPECT_NEAR(a1.v_tilde[i], acc, 1e-14);
  }
  TensorD same({6, 4});
  for (std::int64_t r = 0; r < 6; ++r)
    for (std::int64_t j = 0; j < 4; ++j) same[r * 4 + j] = one[j];
  const auto a6 = attention_pool(same, q, p);
  for (std::int64_t r = 0; r < 6; ++r) EXPECT_NEAR(a6.attention[r], 1.0 / 6.0, 1e-15);
}

TEST(AttentionPool, MatchesScalarOracle) {
  std::mt19937_64 rng(16);
  for (int t = 0; t < 20; ++t) {
    const std::int64_t f = 2 + t % 5, q = (t % 3 == 0) ? f : 3, d = 1 + t % 7;
    const auto p = random_controller(f, q, 4, 3, rng, 0.8);
    const auto v = randn({d, f}, rng), qv = randn({q}, rng);
    const auto got = attention_pool(v, qv, p);
    const auto want = scalar_attention(v, qv, p);
    for (std::int64_t r = 0; r < d; ++r) ASSERT_NEAR(got.attention[r], want.p[r], 1e-12);
    for (std::int64_t i = 0; i < q; ++i) ASSERT_NEAR(got.v_tilde[i], want.v_tilde[i], 1e-12);
  }
}

TEST(AttentionPool, PermutationEquivariant) {
  std::mt19937_64 rng(17);
  const auto p = random_controller(3, 3, 4, 2, rng);
  const auto v = randn({7, 3}, rng), q = randn({3}, rng);
  std::vector<std::int64_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  TensorD vp({7, 3});
  for (std::int64_t r = 0; r < 7; ++r)
    for (std::int64_t j = 0; j < 3; ++j) vp[r * 3 + j] = v[perm[r] * 3 + j];
  const auto a = attention_pool(v, q, p), b = attention_pool(vp, q, p);
  double total = 0;
  for (std::int64_t r = 0; r < 7; ++r) {
    EXPECT_NEAR(b.attention[r], a.attention[perm[r]], 1e-14);
    total += a.attention[r];
  }
  EXPECT_NEAR(total, 1.0, 1e-14);
}

TEST(AttentionPool, DimensionErrors) {
  std::mt19937_64 rng(18);
  const auto p = random_controller(4, 3, 5, 2, rng);
  EXPECT_THROW(attention_pool(TensorD({2, 5}), TensorD({3}), p), Error);
  EXPECT_THROW(attention_pool(TensorD({2, 4}), TensorD({4}), p), Error);
  auto missing = p;
  missing.projection = TensorD{};
  EXPECT_THROW(attention_pool(TensorD({2, 4}), TensorD({3}), missing), Error);
}

TEST(GateForward, InvariantsOverRandomDraws) {
  std::mt19937_64 rng(19);
  for (int t = 0; t < 300; ++t) {
    const std::int64_t e = 1 + t % 9, f = 2 + t % 4, q = 3;
    const auto p = random_controller(f, q, 4, e, rng, 1.0);
    const auto v = randn({5, f}, rng), qv = randn({q}, rng);
    const std::int64_t k = 1 + t % e;
    const auto out = gate_forward(v, qv, p, k).decision;
    ASSERT_NEAR(sum_of(out.g_norm), 1.0, 1e-12);
    for (auto g : out.g_norm) ASSERT_GE(g, 0.0);
    ASSERT_EQ(static_cast<std::int64_t>(out.selected.size()), k);
    ASSERT_EQ(out.selected, topk_select<double>(out.g_norm, k));
    ASSERT_NEAR(sum_of(out.attention), 1.0, 1e-12);
  }
}

TEST(GateForward, CountsControllerOps) {
  std::mt19937_64 rng(20);
  const auto p = random_controller(6, 4, 5, 3, rng);
  MacCounter c;
  gate_forward(randn({9, 6}, rng), randn({4}, rng), p, 2, &c);
  EXPECT_EQ(c.conv_macs, 0u);
  EXPECT_EQ(c.aux_ops, static_cast<std::uint64_t>(gate_controller_ops(9, 6, 4, 5, 3, true)));
  MacCounter split;
  const auto v = randn({9, 6}, rng);
  const auto q = randn({4}, rng);
  const auto a = attention_pool(v, q, p, &split);
  gate_weights(a.v_tilde, q, p, &split);
  EXPECT_EQ(split, c);
}

TEST(GateBackward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(21);
  const auto p = random_controller(4, 3, 5, 4, rng);
  const auto fw = gate_forward(randn({6, 4}, rng), randn({3}, rng), p, 2);
  auto gp = p.zeros_like();
  const std::vector<double> zero(4, 0.0);
  const auto gi = gate_backward(fw.cache, p, std::span<const double>(zero), gp);
  gp.for_each([](TensorD& t) {
    for (auto v : t.data()) ASSERT_EQ(v, 0.0);
  });
  for (auto v : gi.regions.data()) EXPECT_EQ(v, 0.0);
  for (auto v : gi.question.data()) EXPECT_EQ(v, 0.0);
}

TEST(GateBackward, FallbackPassesNoGradient) {
  const auto p = fixed_gate_controller({-1, -2, -3});
  std::mt19937_64 rng(22);
  const auto fw = gate_forward(randn({4, 2}, rng), randn({2}, rng), p, 1);
  ASSERT_TRUE(fw.decision.fallback_used);
  auto gp = p.zeros_like();
  const std::vector<double> up{1.0, -2.0, 0.5};
  gate_backward(fw.cache, p, std::span<const double>(up), gp);
  EXPECT_EQ(sum_all(gp.gate_bias), 0.0);
  EXPECT_THROW(gate_backward(GateCache<double>{}, p, std::span<const double>(up), gp), Error);
  const std::vector<double> short_up{1.0};
  EXPECT_THROW(gate_backward(fw.cache, p, std::span<const double>(short_up), gp), Error);
}

TEST(GateBackward, FiniteDifferencesOnFullController) {
  std::mt19937_64 rng(23);
  for (const bool projected : {false, true}) {
    const std::int64_t f = 4, q = projected ? 3 : 4, e = 5, d = 6;
    auto p = random_controller(f, q, 5, e, rng, 0.7);
    const auto v = randn({d, f}, rng), qv = randn({q}, rng);
    const auto w = randn({e}, rng);
    // Keep every gate logit away from the relu kink so the loss is smooth.
    {
      const auto fw = gate_forward(v, qv, p, 1);
      for (std::int64_t i = 0; i < e; ++i)
        if (std::abs(fw.decision.g_raw[i]) < 0.05) p.gate_bias[i] += 0.2;
    }
    auto loss = [&](const GateControllerParams<double>& pp, const TensorD& vv, const TensorD& qq) {
      const auto g = gate_forward(vv, qq, pp, 1).decision.g_norm;
      double acc = 0;
      for (std::int64_t i = 0; i < e; ++i) acc += w[i] * g[i];
      return acc;
    };
    const auto fw = gate_forward(v, qv, p, 1);
    ASSERT_FALSE(fw.decision.fallback_used);
    auto gp = p.zeros_like();
    const auto gi = gate_backward(fw.cache, p, w.data(), gp);
    for (const auto& [name, m] : controller_members()) {
      if ((p.*m).empty()) continue;
      if (m == &GateControllerParams<double>::score_bias) {
        // Softmax is shift invariant, so the shared score bias has no effect.
        EXPECT_NEAR(gp.score_bias[0], 0.0, 1e-14);
        auto hi = p, lo = p;
        hi.score_bias[0] += 1e-5;
        lo.score_bias[0] -= 1e-5;
        EXPECT_LE(std::abs(loss(hi, v, qv) - loss(lo, v, qv)) / 2e-5, 1e-9);
        continue;
      }
      const double err = finite_diff_check(
          [&](const TensorD& x) {
            auto pp = p;
            pp.*m = x;
            return loss(pp, v, qv);
          },
          p.*m, gp.*m);
      EXPECT_LE(err, 1e-5) << name << " projected=" << projected;
    }
    EXPECT_LE(finite_diff_check([&](const TensorD& x) { return loss(p, x, qv); }, v, gi.regions), 1e-5);
    EXPECT_LE(finite_diff_check([&](const TensorD& x) { return loss(p, v, x); }, qv, gi.question), 1e-5);
  }
}

TEST(GateBackward, BalanceLossReachesUnselectedExperts) {
  std::mt19937_64 rng(24);
  const std::int64_t e = 6, b = 4;
  const auto p = random_controller(3, 3, 4, e, rng);
  std::vector<GateForward<double>> fws;
  TensorD gates({b, e});
  for (std::int64_t n = 0; n < b; ++n) {
    fws.push_back(gate_forward(randn({5, 3}, rng), randn({3}, rng), p, 2));
    for (std::int64_t i = 0; i < e; ++i) gates[n * e + i] = fws.back().decision.g_norm[i];
  }
  const auto dbal = balance_loss_backward(gates);
  auto bias_grad = [&](double lambda) {
    auto gp = p.zeros_like();
    for (std::int64_t n = 0; n < b; ++n) {
      // Task gradient flows only into selected experts.
      std::vector<double> up(e, 0.0);
      for (auto s : fws[n].decision.selected) up[s] = 1.0;
      for (std::int64_t i = 0; i < e; ++i) up[i] += lambda * dbal[n * e + i];
      gate_backward(fws[n].cache, p, std::span<const double>(up), gp);
    }
    return gp.gate_weight;
  };
  const auto g0 = bias_grad(0.0), g1 = bias_grad(0.01);
  EXPECT_GT(max_abs_diff(g0, g1), 0.0);
}

TEST(GateCsv, HeaderAndRows) {
  std::vector<GateCsvRow> rows{{0, 0, 1, false, {0.75, 0.25}, {0}}, {1, 3, 2, true, {1 / 3.0, 1 / 3.0, 1 / 3.0}, {0, 1}}};
  std::ostringstream os;
  write_gate_csv(os, rows);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "block_id,sample_id,k,fallback_used,g0,g1,g2,selected");
  std::getline(is, line);
  EXPECT_EQ(line, "0,0,1,0,0.75,0.25,,0");
  std::getline(is, line);
  EXPECT_EQ(line.substr(0, 8), "1,3,2,1,");
  EXPECT_EQ(line.substr(line.size() - 4), ",0;1");
}

TEST(FeatureRegions, TransposesChannelsToFeatures) {
  TensorD x({2, 3, 1, 2});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<double>(i);
  const auto r = feature_regions(x, 1);
  EXPECT_EQ(r.shape(), (Shape{2, 3}));
  EXPECT_EQ(r, TensorD({2, 3}, {6, 8, 10, 7, 9, 11}));
  TensorD g({2, 3, 1, 2});
  add_region_grad(g, 1, r);
  for (std::int64_t i = 0; i < 6; ++i) EXPECT_EQ(g[i], 0.0);
  for (std::int64_t i = 6; i < 12; ++i) EXPECT_EQ(g[i], x[i]);
}
