#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "gmc/nn_ops.hpp"
#include "test_support.hpp"

using namespace gmc;
using gmc::testing::randn;
using gmc::testing::weighted_sum;

namespace {

// Direct seven-loop convolution used as the reference.
TensorD naive_conv(const TensorD& x, const TensorD& w, std::int64_t stride, std::int64_t pad, std::int64_t groups) {
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t cout = w.dim(0), p = w.dim(2), cin_g = cin / groups, cout_g = cout / groups;
  const std::int64_t ho = (h + 2 * pad - p) / stride + 1, wo = (wd + 2 * pad - p) / stride + 1;
  TensorD y({n, cout, ho, wo});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < cout; ++o) {
      const std::int64_t g = o / cout_g;
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t ky = 0; ky < p; ++ky)
              for (std::int64_t kx = 0; kx < p; ++kx) {
                const std::int64_t iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += w.at(o, ci, ky, kx) * x.at(b, g * cin_g + ci, iy, ix);
              }
          y.at(b, o, oy, ox) = acc;
        }
    }
  return y;
}

TensorD block_diagonal(const TensorD& w, std::int64_t cin, std::int64_t groups) {
  const std::int64_t cout = w.dim(0), p = w.dim(2), cin_g = cin / groups, cout_g = cout / groups;
  TensorD dense({cout, cin, p, p});
  for (std::int64_t o = 0; o < cout; ++o)
    for (std::int64_t ci = 0; ci < cin_g; ++ci)
      for (std::int64_t ky = 0; ky < p; ++ky)
        for (std::int64_t kx = 0; kx < p; ++kx) dense.at(o, (o / cout_g) * cin_g + ci, ky, kx) = w.at(o, ci, ky, kx);
  return dense;
}

}  // namespace

TEST(Conv2d, OnesKernelSumsWindow) {
  Conv2dParams<double> p{TensorD::ones({1, 1, 3, 3}), {}, 1, 0, 1};
  const auto y = conv2d_forward(TensorD::ones({1, 1, 3, 3}), p);
  EXPECT_EQ(y, TensorD({1, 1, 1, 1}, {9}));
}

TEST(Conv2d, PointwiseIdentity) {
  std::mt19937_64 rng(1);
  const auto x = randn({2, 1, 4, 3}, rng);
  Conv2dParams<double> p{TensorD::ones({1, 1, 1, 1}), TensorD::zeros({1}), 1, 0, 1};
  EXPECT_EQ(conv2d_forward(x, p), x);
  const auto g = randn({2, 1, 4, 3}, rng);
  EXPECT_EQ(conv2d_backward(x, p, g).grad_x, g);
}

TEST(Conv2d, GroupedEqualsBlockDiagonalDense) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> pick(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t groups = std::array<std::int64_t, 4>{1, 2, 3, 4}[pick(rng)];
    const std::int64_t cin = groups * (1 + pick(rng)), cout = groups * (1 + pick(rng));
    const std::int64_t p = std::array<std::int64_t, 4>{1, 3, 3, 5}[pick(rng)];
    const std::int64_t stride = 1 + pick(rng) % 2, pad = pick(rng) % 3;
    const std::int64_t h = p + 2 + pick(rng), w = p + 1 + pick(rng);
    const auto x = randn({2, cin, h, w}, rng);
    Conv2dParams<double> grouped{randn({cout, cin / groups, p, p}, rng), {}, stride, pad, groups};
    Conv2dParams<double> dense{block_diagonal(grouped.weight, cin, groups), {}, stride, pad, 1};
    const auto yg = conv2d_forward(x, grouped);
    ASSERT_EQ(max_abs_diff(yg, conv2d_forward(x, dense)), 0.0) << "trial " << trial;
    ASSERT_LE(max_abs_diff(yg, naive_conv(x, grouped.weight, stride, pad, groups)), 1e-12);
  }
}

TEST(Conv2d, MacCounterIsFormulaValue) {
  std::mt19937_64 rng(3);
  Conv2dParams<double> p{randn({8, 2, 3, 3}, rng), randn({8}, rng), 2, 1, 2};
  MacCounter c;
  const auto y = conv2d_forward(randn({3, 4, 9, 7}, rng), p, &c);
  const std::int64_t ho = y.dim(2), wo = y.dim(3);
  EXPECT_EQ(c.conv_macs, static_cast<std::uint64_t>(3 * 4 * 8 * 9 * ho * wo / 2));
  EXPECT_EQ(c.aux_ops, static_cast<std::uint64_t>(3 * 8 * ho * wo));  // bias adds
}

TEST(Conv2d, Errors) {
  Conv2dParams<double> big{TensorD::ones({1, 1, 5, 5}), {}, 1, 0, 1};
  try {
    conv2d_forward(TensorD::ones({1, 1, 3, 3}), big);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "kernel larger than padded input");
  }
  Conv2dParams<double> bad{TensorD::ones({3, 1, 1, 1}), {}, 1, 0, 2};
  EXPECT_THROW(conv2d_forward(TensorD::ones({1, 2, 3, 3}), bad), Error);
}

TEST(Conv2dBackward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(4);
  Conv2dParams<double> p{randn({4, 2, 3, 3}, rng), randn({4}, rng), 1, 1, 2};
  const auto x = randn({2, 4, 5, 5}, rng);
  const auto g = conv2d_backward(x, p, TensorD::zeros({2, 4, 5, 5}));
  for (const auto* t : {&g.grad_x, &g.grad_weight, &g.grad_bias})
    for (auto v : t->data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  Conv2dParams<double> p{randn({4, 2, 3, 3}, rng), randn({4}, rng), 1, 1, 2};
  const auto x = randn({2, 4, 5, 5}, rng);
  const auto w = randn({2, 4, 5, 5}, rng);
  const auto g = conv2d_backward(x, p, w);
  EXPECT_LE(finite_diff_check([&](const TensorD& xx) { return weighted_sum(conv2d_forward(xx, p), w); }, x, g.grad_x),
            1e-6);
  EXPECT_LE(finite_diff_check(
                [&](const TensorD& ww) {
                  auto q = p;
                  q.weight = ww;
                  return weighted_sum(conv2d_forward(x, q), w);
                },
                p.weight, g.grad_weight),
            1e-6);
  EXPECT_LE(finite_diff_check(
                [&](const TensorD& bb) {
                  auto q = p;
                  q.bias = bb;
                  return weighted_sum(conv2d_forward(x, q), w);
                },
                p.bias, g.grad_bias),
            1e-6);
}

TEST(Conv2dBackward, StridedFiniteDifferences) {
  std::mt19937_64 rng(6);
  Conv2dParams<double> p{randn({6, 1, 3, 3}, rng), {}, 2, 1, 3};
  const auto x = randn({2, 3, 6, 5}, rng);
  const auto w = randn({2, 6, 3, 3}, rng);
  const auto g = conv2d_backward(x, p, w);
  EXPECT_LE(finite_diff_check([&](const TensorD& xx) { return weighted_sum(conv2d_forward(xx, p), w); }, x, g.grad_x),
            1e-6);
}

TEST(BatchNorm, TrainingModeNormalizes) {
  std::mt19937_64 rng(7);
  auto p = BatchNorm2dParams<double>::make(3);
  const auto x = randn({4, 3, 3, 3}, rng, 2.0);
  const auto y = batchnorm2d_forward(x, p);
  for (std::int64_t c = 0; c < 3; ++c) {
    double mean = 0, sq = 0, xm = 0, xsq = 0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 9; ++i) {
        mean += y[(n * 3 + c) * 9 + i];
        xm += x[(n * 3 + c) * 9 + i];
      }
    mean /= 36;
    xm /= 36;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 9; ++i) {
        sq += std::pow(y[(n * 3 + c) * 9 + i] - mean, 2);
        xsq += std::pow(x[(n * 3 + c) * 9 + i] - xm, 2);
      }
    const double var_x = xsq / 36;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / 36, var_x / (var_x + 1e-5), 1e-12);
    EXPECT_NEAR(sq / 36, 1.0, 1e-4);
    // running <- 0.9 * running + 0.1 * batch
    EXPECT_NEAR(p.running_mean[c], 0.1 * xm, 1e-12);
    EXPECT_NEAR(p.running_var[c], 0.9 + 0.1 * var_x, 1e-12);
  }
}

TEST(BatchNorm, ConstantChannelOutputsBeta) {
  auto p = BatchNorm2dParams<double>::make(1);
  p.beta[0] = 0.75;
  const auto y = batchnorm2d_forward(TensorD({2, 1, 2, 2}, 3.0), p);
  for (auto v : y.data()) EXPECT_EQ(v, 0.75);
}

TEST(BatchNorm, BatchTooSmall) {
  auto p = BatchNorm2dParams<double>::make(2);
  try {
    batchnorm2d_forward(TensorD({1, 2, 1, 1}), p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "batch too small for batch statistics");
  }
  p.mode = BnMode::inference;
  EXPECT_NO_THROW(batchnorm2d_forward(TensorD({1, 2, 1, 1}), p));
}

TEST(BatchNorm, InferenceUsesRunningStats) {
  auto p = BatchNorm2dParams<double>::make(1);
  p.mode = BnMode::inference;
  p.running_mean[0] = 1.0;
  p.running_var[0] = 4.0 - 1e-5;
  p.gamma[0] = 2.0;
  p.beta[0] = -1.0;
  const auto y = batchnorm2d_forward(TensorD({1, 1, 1, 2}, {3.0, 1.0}), p);
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], -1.0, 1e-12);
  EXPECT_EQ(p.running_mean[0], 1.0);
}

TEST(BatchNormBackward, AffineShiftAndZeroUpstream) {
  std::mt19937_64 rng(8);
  auto p = BatchNorm2dParams<double>::make(3);
  const auto x = randn({2, 3, 2, 2}, rng);
  const auto g0 = batchnorm2d_backward(x, p, TensorD::zeros(x.shape()));
  for (const auto* t : {&g0.grad_x, &g0.grad_gamma, &g0.grad_beta})
    for (auto v : t->data()) EXPECT_EQ(v, 0.0);
  const auto go = randn(x.shape(), rng);
  const auto g = batchnorm2d_backward(x, p, go);
  const auto expected = reduce_sum(go, {0, 2, 3});
  for (std::int64_t c = 0; c < 3; ++c) EXPECT_NEAR(g.grad_beta[c], expected[c], 1e-12);
}

TEST(BatchNormBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto p = BatchNorm2dParams<double>::make(3);
  p.gamma = randn({3}, rng);
  p.beta = randn({3}, rng);
  const auto x = randn({3, 3, 2, 3}, rng);
  const auto w = randn(x.shape(), rng);
  const auto g = batchnorm2d_backward(x, p, w);
  auto fx = [&](const TensorD& xx) {
    auto q = p;
    return weighted_sum(batchnorm2d_forward(xx, q), w);
  };
  auto fg = [&](const TensorD& gg) {
    auto q = p;
    q.gamma = gg;
    return weighted_sum(batchnorm2d_forward(x, q), w);
  };
  auto fb = [&](const TensorD& bb) {
    auto q = p;
    q.beta = bb;
    return weighted_sum(batchnorm2d_forward(x, q), w);
  };
  EXPECT_LE(finite_diff_check(fx, x, g.grad_x), 1e-5);
  EXPECT_LE(finite_diff_check(fg, p.gamma, g.grad_gamma), 1e-5);
  EXPECT_LE(finite_diff_check(fb, p.beta, g.grad_beta), 1e-5);
}

TEST(BatchNormMasked, ExcludedSamplesDoNotShapeStatistics) {
  std::mt19937_64 rng(10);
  auto p = BatchNorm2dParams<double>::make(2);
  auto x = randn({3, 2, 2, 2}, rng);
  // Sample 1 is excluded from channel 0; sample 2 from channel 1.
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 0};
  const auto y = batchnorm2d_forward(x, p, nullptr, mask);
  auto x2 = x;
  for (std::int64_t i = 0; i < 4; ++i) x2[(1 * 2 + 0) * 4 + i] += 100.0;
  auto p2 = BatchNorm2dParams<double>::make(2);
  const auto y2 = batchnorm2d_forward(x2, p2, nullptr, mask);
  for (std::int64_t i = 0; i < 4; ++i) {
    EXPECT_EQ(y[(0 * 2 + 0) * 4 + i], y2[(0 * 2 + 0) * 4 + i]);
    EXPECT_EQ(y[(2 * 2 + 0) * 4 + i], y2[(2 * 2 + 0) * 4 + i]);
  }
  EXPECT_EQ(p.running_mean, p2.running_mean);

  const auto w = randn(x.shape(), rng);
  const auto g = batchnorm2d_backward(x, p, w, mask);
  auto fx = [&](const TensorD& xx) {
    auto q = BatchNorm2dParams<double>::make(2);
    return weighted_sum(batchnorm2d_forward(xx, q, nullptr, mask), w);
  };
  EXPECT_LE(finite_diff_check(fx, x, g.grad_x), 1e-5);
}

TEST(BatchNormMasked, EmptyChannelKeepsRunningStats) {
  auto p = BatchNorm2dParams<double>::make(2);
  p.beta[1] = 0.5;
  std::mt19937_64 rng(11);
  const auto x = randn({2, 2, 2, 2}, rng);
  const std::vector<std::uint8_t> mask{1, 0, 1, 0};
  const auto y = batchnorm2d_forward(x, p, nullptr, mask);
  EXPECT_EQ(p.running_mean[1], 0.0);
  EXPECT_EQ(p.running_var[1], 1.0);
  EXPECT_EQ(y.at(0, 1, 0, 0), 0.5);
}

TEST(Activations, ReluSoftmaxTanh) {
  EXPECT_EQ(relu_forward(TensorD({3}, {-1, 0, 2})), TensorD({3}, {0, 0, 2}));
  EXPECT_EQ(softmax_forward(TensorD({2}, {0, 0}), 0), TensorD({2}, {0.5, 0.5}));
  EXPECT_THROW(softmax_forward(TensorD(), 0), Error);
  std::mt19937_64 rng(12);
  const auto x = randn({4, 7}, rng, 3.0);
  const auto s = softmax_forward(x, 1);
  for (std::int64_t i = 0; i < 4; ++i) {
    double sum = 0;
    for (std::int64_t j = 0; j < 7; ++j) sum += s.at(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  EXPECT_NEAR(tanh_forward(TensorD({1}, {0.5}))[0], std::tanh(0.5), 0.0);
}

TEST(Activations, ReluCommutesWithNonNegativeScale) {
  std::mt19937_64 rng(13);
  const auto x = randn({50}, rng);
  for (double g : {0.0, 0.3, 1.0, 7.5}) EXPECT_EQ(relu_forward(scale(x, g)), scale(relu_forward(x), g));
}

TEST(Activations, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  const auto x = randn({3, 5}, rng);
  const auto w = randn({3, 5}, rng);
  for (std::int64_t axis : {0, 1}) {
    const auto y = softmax_forward(x, axis);
    EXPECT_LE(finite_diff_check([&](const TensorD& xx) { return weighted_sum(softmax_forward(xx, axis), w); }, x,
                                softmax_backward(y, w, axis)),
              1e-7);
  }
  EXPECT_LE(finite_diff_check([&](const TensorD& xx) { return weighted_sum(tanh_forward(xx), w); }, x,
                              tanh_backward(tanh_forward(x), w)),
            1e-7);
  EXPECT_LE(finite_diff_check([&](const TensorD& xx) { return weighted_sum(relu_forward(xx), w); }, x,
                              relu_backward(x, w)),
            1e-7);
}

TEST(MaxPool, RampWindow) {
  TensorD x({1, 1, 4, 4});
  for (std::int64_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const auto y = maxpool2d_forward(x, Pool2dSpec{2, 2, 0});
  EXPECT_EQ(y, TensorD({1, 1, 2, 2}, {5, 7, 13, 15}));
}

TEST(MaxPool, StandardThreeByThreeHalves) {
  MacCounter c;
  const auto y = maxpool2d_forward(TensorD({1, 2, 64, 64}), Pool2dSpec{}, &c);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 32, 32}));
  EXPECT_EQ(c.aux_ops, 2u * 32 * 32 * 9);
}

TEST(MaxPool, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  const auto x = randn({2, 2, 7, 6}, rng);
  const Pool2dSpec spec{};
  const auto w = randn(maxpool2d_forward(x, spec).shape(), rng);
  EXPECT_LE(finite_diff_check([&](const TensorD& xx) { return weighted_sum(maxpool2d_forward(xx, spec), w); }, x,
                              maxpool2d_backward(x, spec, w)),
            1e-7);
}

TEST(GlobalAvgPool, ForwardBackward) {
  std::mt19937_64 rng(16);
  const auto x = randn({2, 3, 4, 5}, rng);
  const auto y = global_avg_pool_forward(x);
  EXPECT_NEAR(y.at(1, 2), sum_all(gather_channels(x.sample(1), std::vector<std::int64_t>{2})) / 20, 1e-12);
  const auto w = randn({2, 3}, rng);
  EXPECT_LE(finite_diff_check([&](const TensorD& xx) { return weighted_sum(global_avg_pool_forward(xx), w); }, x,
                              global_avg_pool_backward(x.shape(), w)),
            1e-7);
}

TEST(Linear, ForwardCountsAndGradients) {
  std::mt19937_64 rng(17);
  LinearParams<double> p{randn({3, 5}, rng), randn({3}, rng)};
  const auto x = randn({4, 5}, rng);
  MacCounter c;
  const auto y = linear_forward(x, p, &c);
  EXPECT_EQ(c.linear_macs, 4u * 5 * 3);
  EXPECT_EQ(y.shape(), (Shape{4, 3}));
  const auto w = randn({4, 3}, rng);
  const auto g = linear_backward(x, p, w);
  EXPECT_LE(finite_diff_check([&](const TensorD& xx) { return weighted_sum(linear_forward(xx, p), w); }, x, g.grad_x),
            1e-7);
  EXPECT_LE(finite_diff_check(
                [&](const TensorD& ww) {
                  auto q = p;
                  q.weight = ww;
                  return weighted_sum(linear_forward(x, q), w);
                },
                p.weight, g.grad_weight),
            1e-7);
  EXPECT_LE(finite_diff_check(
                [&](const TensorD& bb) {
                  auto q = p;
                  q.bias = bb;
                  return weighted_sum(linear_forward(x, q), w);
                },
                p.bias, g.grad_bias),
            1e-7);
}

TEST(CrossEntropy, LossAndGradient) {
  std::mt19937_64 rng(18);
  const auto logits = randn({5, 4}, rng);
  const std::vector<std::int64_t> labels{0, 3, 2, 2, 1};
  const auto ce = softmax_cross_entropy(logits, labels);
  EXPECT_LE(finite_diff_check([&](const TensorD& l) { return softmax_cross_entropy(l, labels).loss; }, logits,
                              ce.grad_logits),
            1e-7);
  const auto uniform = softmax_cross_entropy(TensorD({2, 4}), std::vector<std::int64_t>{1, 2});
  EXPECT_NEAR(uniform.loss, std::log(4.0), 1e-12);
}

TEST(FiniteDiffCheck, PolynomialCases) {
  const TensorD x({2}, {1, 2});
  EXPECT_LE(finite_diff_check([](const TensorD& v) { return sum_all(v); }, x, TensorD::ones({2})), 1e-10);
  EXPECT_LE(finite_diff_check([](const TensorD& v) { return sum_all(mul(v, v)); }, x, TensorD({2}, {2, 4})), 1e-9);
  EXPECT_GT(finite_diff_check([](const TensorD& v) { return sum_all(mul(v, v)); }, x, TensorD({2}, {2, 5})), 0.1);
  EXPECT_THROW(finite_diff_check([](const TensorD&) { return std::nan(""); }, x, x), Error);
}
