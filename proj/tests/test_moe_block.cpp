#include <gtest/gtest.h>

#include <random>

#include "gmc/moe_block.hpp"
#include "test_support.hpp"

using namespace gmc;
using gmc::testing::BlockShape;
using gmc::testing::randn;
using gmc::testing::random_block;

namespace {

template <typename T>
std::vector<Tensor<T>*> trainables(GatedBlockParams<T>& p) {
  std::vector<Tensor<T>*> out;
  p.for_each_trainable([&](Tensor<T>& t) { out.push_back(&t); });
  return out;
}

double max_grad_diff(BlockGrads<double>& a, BlockGrads<double>& b) {
  double worst = std::max(max_abs_diff(a.grad_x, b.grad_x), max_abs_diff(a.grad_q, b.grad_q));
  const auto ta = trainables(a.params), tb = trainables(b.params);
  for (std::size_t i = 0; i < ta.size(); ++i) worst = std::max(worst, max_abs_diff(*ta[i], *tb[i]));
  return worst;
}

struct Run {
  BlockOutput<double> out;
  BlockCache<double> cache;
};

Run run(const TensorD& x, const TensorD& q, GatedBlockParams<double> p, BlockMode mode) {
  Run r;
  r.out = block_forward(x, q, p, {mode}, nullptr, &r.cache);
  return r;
}

}  // namespace

TEST(GatedBlock, FullKSparseIsBitwiseDense) {
  std::mt19937_64 rng(1);
  BlockShape s;
  s.k = s.e;
  auto p = random_block(s, rng);
  const auto x = randn({3, 8, 6, 6}, rng), q = randn({3, 5}, rng);
  auto pd = p, ps = p;
  const auto dense = block_forward_dense(x, q, pd);
  const auto sparse = block_forward_sparse(x, q, ps);
  EXPECT_EQ(dense.y, sparse.y);
  EXPECT_EQ(pd.bn_mid.running_mean, ps.bn_mid.running_mean);
}

TEST(GatedBlock, SparseMatchesMaskedOracle) {
  std::mt19937_64 rng(2);
  const std::int64_t es[] = {2, 4, 8};
  for (int t = 0; t < 24; ++t) {
    BlockShape s;
    s.e = es[t % 3];
    s.d = 1 + t % 3;
    s.k = 1 + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(s.e));
    s.stride = 1 + t % 2;
    s.c = 6;
    s.c_out = (t % 4 == 0) ? 6 : 10;
    s.shortcut = t % 5 == 0;
    auto p = random_block(s, rng);
    const auto x = randn({3, s.c, 5, 6}, rng), q = randn({3, s.question}, rng);
    auto sp = run(x, q, p, BlockMode::sparse);
    auto ms = run(x, q, p, BlockMode::masked);
    ASSERT_LE(max_abs_diff(sp.out.y, ms.out.y), 1e-10) << "trial " << t;
    const auto gy = randn(sp.out.y.shape(), rng);
    const auto gg = randn({3, s.e}, rng);
    auto ga = block_backward(sp.cache, p, gy, gg);
    auto gb = block_backward(ms.cache, p, gy, gg);
    ASSERT_LE(max_grad_diff(ga, gb), 1e-10) << "trial " << t;
  }
}

TEST(GatedBlock, SinglePrecisionSparseMatchesMaskedOracle) {
  std::mt19937_64 rng(3);
  BlockShape s;
  s.e = 8;
  s.d = 2;
  s.k = 3;
  s.c = 8;
  s.c_out = 16;
  s.stride = 2;
  auto p = random_block<float>(s, rng);
  const auto x = randn<float>({4, 8, 8, 8}, rng), q = randn<float>({4, 5}, rng);
  auto a = p, b = p;
  const auto sp = block_forward(x, q, a, {BlockMode::sparse});
  const auto ms = block_forward(x, q, b, {BlockMode::masked});
  EXPECT_LE(max_abs_diff(sp.y, ms.y), 1e-5f);
}

TEST(GatedBlock, SparseMacsMatchClosedForm) {
  std::mt19937_64 rng(4);
  for (std::int64_t k = 1; k <= 4; ++k)
    for (std::int64_t stride : {1, 2}) {
      BlockShape s;
      s.e = 4;
      s.d = 3;
      s.k = k;
      s.c = 8;
      s.c_out = 12;
      s.stride = stride;
      auto p = random_block(s, rng);
      const std::int64_t n = 2, h = 7, w = 6;
      const auto x = randn({n, 8, h, w}, rng), q = randn({n, 5}, rng);
      MacCounter c;
      block_forward_sparse(x, q, p, &c);
      const std::int64_t h2 = (h - 1) / stride + 1, w2 = (w - 1) / stride + 1;
      const std::int64_t d = 3, cc = 8, co = 12;
      const std::int64_t closed = k * d * cc * h * w + 9 * d * d * k * h2 * w2 + k * d * co * h2 * w2;
      const std::int64_t shortcut = cc * co * h2 * w2;
      EXPECT_EQ(c.conv_macs, static_cast<std::uint64_t>(n * (closed + shortcut)));
      EXPECT_EQ(c.aux_ops, static_cast<std::uint64_t>(gated_block_aux_ops(n, cc, co, 4, d, k, h, w, h2, w2, 5, 6, true)));
      EXPECT_EQ(c.linear_macs, 0u);
    }
}

TEST(GatedBlock, ExecutedMacsStrictlyIncreaseAndAreAffineInK) {
  std::mt19937_64 rng(5);
  BlockShape s;
  s.e = 8;
  s.d = 2;
  s.c = 8;
  s.c_out = 8;
  auto base = random_block(s, rng);
  const auto x = randn({2, 8, 6, 6}, rng), q = randn({2, 5}, rng);
  std::vector<std::uint64_t> macs;
  for (std::int64_t k = 1; k <= 8; ++k) {
    auto p = base;
    p.k = k;
    MacCounter c;
    block_forward_sparse(x, q, p, &c);
    macs.push_back(c.conv_macs);
  }
  for (std::size_t i = 1; i < macs.size(); ++i) {
    EXPECT_GT(macs[i], macs[i - 1]);
    EXPECT_EQ(macs[i] - macs[i - 1], macs[1] - macs[0]);
  }
}

TEST(GatedBlock, UnselectedGroupsGetExactlyZeroGradient) {
  std::mt19937_64 rng(6);
  BlockShape s;
  s.e = 8;
  s.d = 2;
  s.k = 2;
  auto p = random_block(s, rng);
  const auto x = randn({2, 8, 5, 5}, rng), q = randn({2, 5}, rng);
  auto r = run(x, q, p, BlockMode::sparse);
  const auto g = block_backward(r.cache, p, randn(r.out.y.shape(), rng));
  std::vector<bool> used(8, false);
  for (const auto& dcs : r.out.decisions)
    for (auto e : dcs.selected) used[e] = true;
  ASSERT_LT(std::count(used.begin(), used.end(), true), 8);
  const std::int64_t per_row = g.params.conv_conv.weight.numel() / 16;
  for (std::int64_t e = 0; e < 8; ++e) {
    double mass = 0;
    for (std::int64_t ch = e * 2; ch < e * 2 + 2; ++ch) {
      for (std::int64_t i = 0; i < per_row; ++i) mass += std::abs(g.params.conv_conv.weight[ch * per_row + i]);
      mass += std::abs(g.params.bn_mid.gamma[ch]) + std::abs(g.params.bn_reduce.beta[ch]);
      for (std::int64_t i = 0; i < 8; ++i) mass += std::abs(g.params.conv_reduce.weight[ch * 8 + i]);
      for (std::int64_t o = 0; o < 8; ++o) mass += std::abs(g.params.conv_expand.weight[o * 16 + ch]);
    }
    if (used[e])
      EXPECT_GT(mass, 0.0) << "group " << e;
    else
      EXPECT_EQ(mass, 0.0) << "group " << e;
  }
}

TEST(GatedBlock, SparseRunningStatsOnlyMoveForSelectedGroups) {
  std::mt19937_64 rng(7);
  BlockShape s;
  s.e = 8;
  s.d = 1;
  s.k = 1;
  auto p = random_block(s, rng);
  const auto before = p;
  const auto x = randn({2, 8, 4, 4}, rng), q = randn({2, 5}, rng);
  const auto out = block_forward_sparse(x, q, p);
  std::vector<bool> used(8, false);
  for (const auto& dcs : out.decisions) used[dcs.selected[0]] = true;
  for (std::int64_t c = 0; c < 8; ++c) {
    if (used[c]) {
      EXPECT_NE(p.bn_mid.running_mean[c], before.bn_mid.running_mean[c]);
    } else {
      EXPECT_EQ(p.bn_mid.running_mean[c], before.bn_mid.running_mean[c]);
      EXPECT_EQ(p.bn_mid.running_var[c], before.bn_mid.running_var[c]);
      EXPECT_EQ(p.bn_reduce.running_var[c], before.bn_reduce.running_var[c]);
    }
  }
}

TEST(GatedBlock, OneHotGateMatchesSingleGroupOracle) {
  std::mt19937_64 rng(8);
  BlockShape s;
  s.e = 4;
  s.d = 2;
  auto p = random_block(s, rng);
  // Zero the gating map and give expert 2 the only positive bias.
  p.controller.gate_weight.fill(0.0);
  p.controller.gate_bias = TensorD({4}, {-1.0, -0.5, 0.8, -2.0});
  const auto x = randn({2, 8, 5, 5}, rng), q = randn({2, 5}, rng);
  auto r = run(x, q, p, BlockMode::dense);
  for (const auto& dcs : r.out.decisions) EXPECT_EQ(dcs.g_norm, (std::vector<double>{0, 0, 1, 0}));

  // Oracle: full-batch pipeline by hand with every group but 2 zeroed after scaling.
  auto q2 = p;
  auto t1 = relu_forward(batchnorm2d_forward(conv2d_forward(x, q2.conv_reduce), q2.bn_reduce));
  auto t2 = relu_forward(batchnorm2d_forward(conv2d_forward(t1, q2.conv_conv), q2.bn_mid));
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 8; ++c)
      if (c / 2 != 2)
        for (std::int64_t i = 0; i < 25; ++i) t2[(n * 8 + c) * 25 + i] = 0.0;
  auto pre = batchnorm2d_forward(conv2d_forward(t2, q2.conv_expand), q2.bn_expand);
  add_inplace(pre, x);
  EXPECT_LE(max_abs_diff(relu_forward(pre), r.out.y), 1e-12);
}

TEST(GatedBlock, PermutingGroupsLeavesOutputUnchanged) {
  std::mt19937_64 rng(9);
  BlockShape s;
  s.e = 4;
  s.d = 2;
  auto p = random_block(s, rng);
  // Identical gates for every expert.
  p.controller.gate_weight.fill(0.0);
  p.controller.gate_bias.fill(0.3);
  const auto x = randn({2, 8, 4, 4}, rng), q = randn({2, 5}, rng);
  auto a = p;
  const auto ya = block_forward_dense(x, q, a).y;
  const std::vector<std::int64_t> perm{2, 0, 3, 1};
  auto b = p;
  auto permute_rows = [&](const TensorD& src, TensorD& dst) {
    const std::int64_t row = src.numel() / 8;
    for (std::int64_t g = 0; g < 4; ++g)
      for (std::int64_t j = 0; j < 2; ++j)
        std::copy_n(src.ptr() + (perm[g] * 2 + j) * row, row, dst.ptr() + (g * 2 + j) * row);
  };
  permute_rows(p.conv_reduce.weight, b.conv_reduce.weight);
  permute_rows(p.conv_conv.weight, b.conv_conv.weight);
  for (auto [src, dst] : {std::pair{&p.bn_reduce, &b.bn_reduce}, std::pair{&p.bn_mid, &b.bn_mid}}) {
    permute_rows(src->gamma, dst->gamma);
    permute_rows(src->beta, dst->beta);
  }
  for (std::int64_t o = 0; o < 8; ++o)
    for (std::int64_t g = 0; g < 4; ++g)
      for (std::int64_t j = 0; j < 2; ++j)
        b.conv_expand.weight[o * 8 + g * 2 + j] = p.conv_expand.weight[o * 8 + perm[g] * 2 + j];
  const auto yb = block_forward_dense(x, q, b).y;
  EXPECT_LE(max_abs_diff(ya, yb), 1e-12);
}

TEST(GatedBlock, ScalingBeforeOrAfterReluAgrees) {
  std::mt19937_64 rng(10);
  BlockShape s;
  auto p = random_block(s, rng);
  const auto x = randn({2, 8, 5, 5}, rng), q = randn({2, 5}, rng);
  auto r = run(x, q, p, BlockMode::dense);
  auto bn = p.bn_mid;
  const auto b2 = batchnorm2d_forward(r.cache.r2, bn);
  TensorD scaled_first(b2.shape());
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 8; ++c)
      for (std::int64_t i = 0; i < 25; ++i) {
        const std::int64_t off = (n * 8 + c) * 25 + i;
        scaled_first[off] = r.cache.gate_scale[n][c / 2] * b2[off];
      }
  EXPECT_LE(max_abs_diff(relu_forward(scaled_first), r.cache.s), 1e-15);
}

TEST(GatedBlock, DenseFiniteDifferences) {
  std::mt19937_64 rng(11);
  BlockShape s;  // N=2, C=8, E=4, d=2, H=W=6
  auto p = random_block(s, rng);
  const auto x = randn({2, 8, 6, 6}, rng), q = randn({2, 5}, rng);
  auto r = run(x, q, p, BlockMode::dense);
  const auto w = randn(r.out.y.shape(), rng);
  auto g = block_backward(r.cache, p, w);
  auto loss = [&](const GatedBlockParams<double>& pp, const TensorD& xx, const TensorD& qq) {
    auto copy = pp;
    return gmc::testing::weighted_sum(block_forward_dense(xx, qq, copy).y, w);
  };
  double worst = finite_diff_check([&](const TensorD& v) { return loss(p, v, q); }, x, g.grad_x);
  worst = std::max(worst, finite_diff_check([&](const TensorD& v) { return loss(p, x, v); }, q, g.grad_q));
  auto params = trainables(p);
  auto grads = trainables(g.params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i] == &p.controller.score_bias) continue;  // shift invariant, gradient is zero
    const double err = finite_diff_check(
        [&](const TensorD& v) {
          auto pp = p;
          *trainables(pp)[i] = v;
          return loss(pp, x, q);
        },
        *params[i], *grads[i]);
    EXPECT_LE(err, 1e-4) << "tensor " << i;
    worst = std::max(worst, err);
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(GatedBlock, SparseFiniteDifferencesOnGatheredParameters) {
  std::mt19937_64 rng(12);
  BlockShape s;
  s.k = 2;
  auto p = random_block(s, rng);
  const auto x = randn({3, 8, 6, 6}, rng), q = randn({3, 5}, rng);
  auto r = run(x, q, p, BlockMode::sparse);
  const auto w = randn(r.out.y.shape(), rng);
  auto g = block_backward(r.cache, p, w);
  auto loss = [&](const GatedBlockParams<double>& pp) {
    auto copy = pp;
    return gmc::testing::weighted_sum(block_forward_sparse(x, q, copy).y, w);
  };
  for (auto member : {&GatedBlockParams<double>::conv_reduce, &GatedBlockParams<double>::conv_conv,
                      &GatedBlockParams<double>::conv_expand}) {
    const double err = finite_diff_check(
        [&](const TensorD& v) {
          auto pp = p;
          (pp.*member).weight = v;
          return loss(pp);
        },
        (p.*member).weight, (g.params.*member).weight);
    EXPECT_LE(err, 1e-4);
  }
  const double err = finite_diff_check(
      [&](const TensorD& v) {
        auto pp = p;
        pp.bn_mid.gamma = v;
        return loss(pp);
      },
      p.bn_mid.gamma, g.params.bn_mid.gamma);
  EXPECT_LE(err, 1e-4);
}

TEST(GatedBlock, Errors) {
  std::mt19937_64 rng(13);
  BlockShape s;
  auto p = random_block(s, rng);
  const auto x = randn({2, 8, 4, 4}, rng), q = randn({2, 5}, rng);
  auto bad = p;
  bad.k = 5;
  try {
    block_forward_sparse(x, q, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "k exceeds cardinality");
  }
  EXPECT_THROW(block_forward_sparse(randn({2, 7, 4, 4}, rng), q, p), Error);
  EXPECT_THROW(block_forward_sparse(x, randn({3, 5}, rng), p), Error);
  EXPECT_THROW(block_backward(BlockCache<double>{}, p, x), Error);
}

TEST(GatedBlock, InjectedGatherFaultIsVisible) {
  std::mt19937_64 rng(14);
  BlockShape s;
  s.e = 8;
  s.k = 3;
  auto p = random_block(s, rng);
  const auto x = randn({2, 8, 4, 4}, rng), q = randn({2, 5}, rng);
  auto a = p, b = p;
  const auto good = block_forward(x, q, a, {BlockMode::masked});
  const auto bad = block_forward(x, q, b, {BlockMode::sparse, true});
  EXPECT_GT(max_abs_diff(good.y, bad.y), 1e-6);
}
