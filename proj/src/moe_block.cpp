#include "gmc/moe_block.hpp"

#include <algorithm>

#include "gmc/detail/bn_kernels.hpp"

namespace gmc {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw Error("gated block: " + msg);
}

template <typename T>
void require_conv(const Conv2dParams<T>& c, const Shape& weight, std::int64_t groups, const char* name) {
  require(c.weight.shape() == weight,
          std::string(name) + " weight is " + shape_str(c.weight.shape()) + ", expected " + shape_str(weight));
  require(c.groups == groups, std::string(name) + " has " + std::to_string(c.groups) + " groups, expected " +
                                  std::to_string(groups));
  require(c.bias.empty() || c.bias.numel() == weight[0], std::string(name) + " bias length mismatch");
}

template <typename T>
void require_bn(const BatchNorm2dParams<T>& b, std::int64_t c, const char* name) {
  require(b.gamma.numel() == c && b.beta.numel() == c && b.running_mean.numel() == c && b.running_var.numel() == c,
          std::string(name) + " does not have " + std::to_string(c) + " channels");
}

}  // namespace

template <typename T>
void GatedBlockParams<T>::validate() const {
  require(cardinality >= 1 && width >= 1, "cardinality and width must be positive");
  if (k > cardinality) throw Error("k exceeds cardinality");
  if (k < 1) throw Error("k must be at least 1");
  require(conv_reduce.weight.rank() == 4 && conv_expand.weight.rank() == 4, "convolution weights must be rank 4");
  const std::int64_t c = in_channels(), mid = mid_channels(), c_out = out_channels();
  require_conv(conv_reduce, {mid, c, 1, 1}, 1, "conv_reduce");
  require(conv_reduce.stride == 1 && conv_reduce.padding == 0, "conv_reduce must be 1x1 stride 1");
  require_bn(bn_reduce, mid, "bn_reduce");
  require(conv_conv.weight.rank() == 4, "conv_conv weight must be rank 4");
  require_conv(conv_conv, {mid, width, conv_conv.weight.dim(2), conv_conv.weight.dim(3)}, cardinality, "conv_conv");
  require_bn(bn_mid, mid, "bn_mid");
  require_conv(conv_expand, {c_out, mid, 1, 1}, 1, "conv_expand");
  require(conv_expand.stride == 1 && conv_expand.padding == 0, "conv_expand must be 1x1 stride 1");
  require_bn(bn_expand, c_out, "bn_expand");
  if (has_shortcut) {
    require_conv(shortcut_conv, {c_out, c, 1, 1}, 1, "shortcut_conv");
    require(shortcut_conv.stride == conv_conv.stride && shortcut_conv.padding == 0,
            "shortcut stride must match conv_conv");
    require_bn(shortcut_bn, c_out, "shortcut_bn");
  } else {
    require(c == c_out && conv_conv.stride == 1, "identity shortcut needs C == C_out and stride 1");
  }
  if (!gated) return;
  controller.validate();
  require(controller.experts() == cardinality, "controller expert count differs from cardinality");
  require(controller.feature_dim() == c, "controller feature width differs from input channels");
}

template <typename T>
GatedBlockParams<T> GatedBlockParams<T>::zeros_like() const {
  GatedBlockParams z = *this;
  z.for_each_trainable([](Tensor<T>& t) { t.fill(T{0}); });
  return z;
}

std::int64_t gated_block_aux_ops(std::int64_t n, std::int64_t c, std::int64_t c_out, std::int64_t e, std::int64_t d,
                                 std::int64_t active, std::int64_t h1, std::int64_t w1, std::int64_t h2,
                                 std::int64_t w2, std::int64_t question, std::int64_t hidden, bool has_shortcut,
                                 bool gated) {
  const std::int64_t a1 = h1 * w1, a2 = h2 * w2, run = active * d;
  std::int64_t per_sample = gated ? gate_controller_ops(a1, c, question, hidden, e, c != question) : 0;
  per_sample += run * a1 * (kBatchNormOpsPerElement + 1);               // bn_reduce, relu
  per_sample += run * a2 * (kBatchNormOpsPerElement + 1 + (gated ? 1 : 0));  // bn_mid, relu, gate scaling
  per_sample += c_out * a2 * kBatchNormOpsPerElement;          // bn_expand
  if (has_shortcut) per_sample += c_out * a2 * kBatchNormOpsPerElement;
  per_sample += c_out * a2 * 2;  // residual add, final relu
  return n * per_sample;
}

template <typename T>
Tensor<T> gate_matrix(const std::vector<GateDecision<T>>& decisions) {
  if (decisions.empty()) return {};
  const auto e = static_cast<std::int64_t>(decisions.front().g_norm.size());
  Tensor<T> m({static_cast<std::int64_t>(decisions.size()), e});
  for (std::size_t n = 0; n < decisions.size(); ++n)
    std::copy(decisions[n].g_norm.begin(), decisions[n].g_norm.end(), m.ptr() + static_cast<std::int64_t>(n) * e);
  return m;
}

namespace {

std::vector<std::int64_t> group_channels(const std::vector<std::int64_t>& groups, std::int64_t d) {
  std::vector<std::int64_t> ch;
  ch.reserve(groups.size() * static_cast<std::size_t>(d));
  for (auto g : groups)
    for (std::int64_t j = 0; j < d; ++j) ch.push_back(g * d + j);
  return ch;
}

// Rows idx of a tensor whose leading axis indexes output channels.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& w, std::span<const std::int64_t> idx) {
  const std::int64_t rows = w.dim(0), row = w.numel() / rows;
  Shape s = w.shape();
  s[0] = static_cast<std::int64_t>(idx.size());
  return gather_channels(w.reshape({1, rows, row}), idx).reshape(s);
}

template <typename T>
void scatter_add_rows(Tensor<T>& dst, std::span<const std::int64_t> idx, const Tensor<T>& src) {
  const std::int64_t row = dst.numel() / dst.dim(0);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const T* s = src.ptr() + static_cast<std::int64_t>(j) * row;
    T* d = dst.ptr() + idx[j] * row;
    for (std::int64_t i = 0; i < row; ++i) d[i] += s[i];
  }
}

template <typename T>
Tensor<T> question_row(const Tensor<T>& q, std::int64_t n) {
  const std::int64_t w = q.dim(1);
  return Tensor<T>({w}, std::vector<T>(q.ptr() + n * w, q.ptr() + (n + 1) * w));
}

// Multiplies every channel of group e (size d) in an N x C x H x W map by scale[n][e].
template <typename T>
Tensor<T> scale_groups(const Tensor<T>& t, const std::vector<std::vector<T>>& scale, std::int64_t d) {
  Tensor<T> out(t.shape());
  const std::int64_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T g = scale[i][ch / d];
      const T* src = t.ptr() + (i * c + ch) * hw;
      T* dst = out.ptr() + (i * c + ch) * hw;
      for (std::int64_t p = 0; p < hw; ++p) dst[p] = src[p] * g;
    }
  return out;
}

// Batch norm over per-sample gathered maps. Channel c's statistics come from
// the samples whose channel list contains c, visited in ascending sample
// order, which reproduces the masked dense statistics bit for bit.
struct RaggedPlane {
  std::int64_t sample;
  std::int64_t local;
};

std::vector<std::vector<RaggedPlane>> ragged_index(const std::vector<std::vector<std::int64_t>>& channels,
                                                   std::int64_t total) {
  std::vector<std::vector<RaggedPlane>> idx(static_cast<std::size_t>(total));
  for (std::size_t n = 0; n < channels.size(); ++n)
    for (std::size_t j = 0; j < channels[n].size(); ++j)
      idx[channels[n][j]].push_back({static_cast<std::int64_t>(n), static_cast<std::int64_t>(j)});
  return idx;
}

struct RaggedNorm {
  double mean = 0.0;
  double istd = 0.0;
  double var = 0.0;
  std::int64_t count = 0;
};

template <typename T>
RaggedNorm ragged_norm(const std::vector<Tensor<T>>& xs, const std::vector<RaggedPlane>& planes, std::int64_t hw,
                       const BatchNorm2dParams<T>& p, std::int64_t ch) {
  if (p.mode == BnMode::inference)
    return {static_cast<double>(p.running_mean[ch]), detail::inv_std(static_cast<double>(p.running_var[ch]), p.eps),
            0.0, 0};
  std::vector<const T*> ptrs;
  ptrs.reserve(planes.size());
  for (const auto& pl : planes) ptrs.push_back(xs[pl.sample].ptr() + pl.local * hw);
  const auto st = detail::plane_stats<T>(ptrs, hw);
  if (st.count == 0) return {};
  return {st.mean, detail::inv_std(st.var, p.eps), st.var, st.count};
}

template <typename T>
std::vector<Tensor<T>> ragged_bn_forward(const std::vector<Tensor<T>>& xs,
                                         const std::vector<std::vector<std::int64_t>>& channels,
                                         BatchNorm2dParams<T>& p, MacCounter* counter) {
  const std::int64_t hw = xs.front().dim(2) * xs.front().dim(3);
  const auto index = ragged_index(channels, p.channels());
  std::vector<Tensor<T>> ys;
  std::int64_t elements = 0;
  for (const auto& x : xs) {
    ys.emplace_back(x.shape());
    elements += x.numel();
  }
  const T mom = static_cast<T>(p.momentum);
  for (std::int64_t ch = 0; ch < p.channels(); ++ch) {
    const auto& planes = index[ch];
    if (planes.empty()) continue;
    if (p.mode == BnMode::training && static_cast<std::int64_t>(planes.size()) * hw < 2)
      throw Error("batch too small for batch statistics");
    const auto nm = ragged_norm(xs, planes, hw, p, ch);
    for (const auto& pl : planes)
      detail::normalize_plane(xs[pl.sample].ptr() + pl.local * hw, ys[pl.sample].ptr() + pl.local * hw, hw, nm.mean,
                              nm.istd, p.gamma[ch], p.beta[ch]);
    if (p.mode == BnMode::training) {
      p.running_mean[ch] = (T{1} - mom) * p.running_mean[ch] + mom * static_cast<T>(nm.mean);
      p.running_var[ch] = (T{1} - mom) * p.running_var[ch] + mom * static_cast<T>(nm.var);
    }
  }
  count_aux(counter, kBatchNormOpsPerElement * elements);
  return ys;
}

template <typename T>
std::vector<Tensor<T>> ragged_bn_backward(const std::vector<Tensor<T>>& xs, const std::vector<Tensor<T>>& grads,
                                          const std::vector<std::vector<std::int64_t>>& channels,
                                          const BatchNorm2dParams<T>& p, Tensor<T>& grad_gamma,
                                          Tensor<T>& grad_beta) {
  const std::int64_t hw = xs.front().dim(2) * xs.front().dim(3);
  const auto index = ragged_index(channels, p.channels());
  std::vector<Tensor<T>> gx;
  for (const auto& x : xs) gx.emplace_back(x.shape());
  for (std::int64_t ch = 0; ch < p.channels(); ++ch) {
    const auto& planes = index[ch];
    if (planes.empty()) continue;
    const auto nm = ragged_norm(xs, planes, hw, p, ch);
    detail::ChannelGradSums sums;
    for (const auto& pl : planes)
      detail::accumulate_grad_sums(xs[pl.sample].ptr() + pl.local * hw, grads[pl.sample].ptr() + pl.local * hw, hw,
                                   nm.mean, nm.istd, sums);
    grad_beta[ch] += static_cast<T>(sums.sum_g);
    grad_gamma[ch] += static_cast<T>(sums.sum_g_xhat);
    const double gamma = static_cast<double>(p.gamma[ch]);
    for (const auto& pl : planes) {
      const std::int64_t off = pl.local * hw;
      if (nm.count > 0)
        detail::included_grad_plane(xs[pl.sample].ptr() + off, grads[pl.sample].ptr() + off,
                                    gx[pl.sample].ptr() + off, hw, nm.mean, nm.istd, gamma, sums, nm.count);
      else
        detail::excluded_grad_plane(grads[pl.sample].ptr() + off, gx[pl.sample].ptr() + off, hw, nm.istd, gamma);
    }
  }
  return gx;
}

template <typename T>
std::vector<Tensor<T>> relu_each(const std::vector<Tensor<T>>& xs, MacCounter* counter) {
  std::vector<Tensor<T>> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(relu_forward(x, counter));
  return out;
}

template <typename T>
void check_inputs(const Tensor<T>& x, const Tensor<T>& q, const GatedBlockParams<T>& p) {
  if (x.rank() != 4) throw Error("gated block expects N x C x H x W input, got " + shape_str(x.shape()));
  if (x.dim(1) != p.in_channels())
    throw Error("gated block: input has " + std::to_string(x.dim(1)) + " channels, expected " +
                std::to_string(p.in_channels()));
  if (q.rank() != 2 || q.dim(0) != x.dim(0) || (p.gated && q.dim(1) != p.controller.question_dim()))
    throw Error("gated block: question batch " + shape_str(q.shape()) + " does not match input " +
                shape_str(x.shape()) + " with question width " + std::to_string(p.controller.question_dim()));
}

}  // namespace

template <typename T>
BlockOutput<T> block_forward(const Tensor<T>& x, const Tensor<T>& q, GatedBlockParams<T>& p,
                             const BlockOptions& opt, MacCounter* counter, BlockCache<T>* cache) {
  p.validate();
  check_inputs(x, q, p);
  const std::int64_t n = x.dim(0), e = p.cardinality, d = p.width, mid = p.mid_channels();

  BlockCache<T> local;
  BlockCache<T>& c = cache ? *cache : local;
  c = BlockCache<T>{};
  c.mode = opt.mode;
  c.x = x;
  c.q = q;

  BlockOutput<T> out;
  if (!p.gated) {
    c.mode = BlockMode::dense;
    c.gate_scale.assign(static_cast<std::size_t>(n), std::vector<T>(static_cast<std::size_t>(e), T{1}));
  }
  for (std::int64_t i = 0; i < n && p.gated; ++i) {
    auto g = gate_forward(feature_regions(x, i), question_row(q, i), p.controller, p.k, counter);
    c.selected.push_back(g.decision.selected);
    std::vector<T> scale(static_cast<std::size_t>(e), T{0});
    if (opt.mode == BlockMode::dense) {
      scale = g.decision.g_norm;
    } else {
      for (auto s : g.decision.selected) scale[s] = g.decision.g_norm[s];
    }
    c.gate_scale.push_back(std::move(scale));
    c.gates.push_back(std::move(g.cache));
    out.decisions.push_back(std::move(g.decision));
  }

  if (c.mode == BlockMode::sparse) {
    for (std::int64_t i = 0; i < n; ++i) {
      const auto ch = group_channels(c.selected[i], d);
      const auto kk = static_cast<std::int64_t>(c.selected[i].size());
      Conv2dParams<T> red{gather_rows(p.conv_reduce.weight, ch), {}, 1, 0, 1};
      if (!p.conv_reduce.bias.empty()) red.bias = gather_rows(p.conv_reduce.bias, ch);
      Conv2dParams<T> cv{gather_rows(p.conv_conv.weight, ch), {}, p.conv_conv.stride, p.conv_conv.padding, kk};
      if (!p.conv_conv.bias.empty()) cv.bias = gather_rows(p.conv_conv.bias, ch);
      Conv2dParams<T> ex{gather_channels(p.conv_expand.weight, std::span<const std::int64_t>(ch)), p.conv_expand.bias,
                         1, 0, 1};
      if (opt.inject_gather_fault) {
        const std::int64_t wrong = (ch[0] + 1) % mid;
        for (std::int64_t o = 0; o < ex.weight.dim(0); ++o) ex.weight[o * ex.weight.dim(1)] = p.conv_expand.weight[o * mid + wrong];
      }
      c.r1s.push_back(conv2d_forward(x.sample(i), red, counter));
      c.channels.push_back(ch);
      c.reduce_views.push_back(std::move(red));
      c.conv_views.push_back(std::move(cv));
      c.expand_views.push_back(std::move(ex));
    }
    c.t1s = relu_each(ragged_bn_forward(c.r1s, c.channels, p.bn_reduce, counter), counter);
    for (std::int64_t i = 0; i < n; ++i) c.r2s.push_back(conv2d_forward(c.t1s[i], c.conv_views[i], counter));
    c.t2s = relu_each(ragged_bn_forward(c.r2s, c.channels, p.bn_mid, counter), counter);
    std::vector<Tensor<T>> e3s;
    for (std::int64_t i = 0; i < n; ++i) {
      std::vector<std::vector<T>> sc{{}};
      for (auto s : c.selected[i]) sc[0].push_back(c.gate_scale[i][s]);
      c.ss.push_back(scale_groups(c.t2s[i], sc, d));
      count_aux(counter, c.t2s[i].numel());
      e3s.push_back(conv2d_forward(c.ss[i], c.expand_views[i], counter));
    }
    c.e3 = stack_samples<T>(e3s);
  } else {
    if (c.mode == BlockMode::masked) {
      c.stat_mask.assign(static_cast<std::size_t>(n * mid), 0);
      for (std::int64_t i = 0; i < n; ++i)
        for (auto s : c.selected[i])
          for (std::int64_t j = 0; j < d; ++j) c.stat_mask[i * mid + s * d + j] = 1;
    }
    c.r1 = conv2d_forward(x, p.conv_reduce, counter);
    c.t1 = relu_forward(batchnorm2d_forward(c.r1, p.bn_reduce, counter, StatMask(c.stat_mask)), counter);
    c.r2 = conv2d_forward(c.t1, p.conv_conv, counter);
    c.t2 = relu_forward(batchnorm2d_forward(c.r2, p.bn_mid, counter, StatMask(c.stat_mask)), counter);
    if (p.gated) {
      c.s = scale_groups(c.t2, c.gate_scale, d);
      count_aux(counter, c.t2.numel());
    } else {
      c.s = c.t2;
    }
    c.e3 = conv2d_forward(c.s, p.conv_expand, counter);
  }

  Tensor<T> pre = batchnorm2d_forward(c.e3, p.bn_expand, counter);
  if (p.has_shortcut) {
    c.sc = conv2d_forward(x, p.shortcut_conv, counter);
    add_inplace(pre, batchnorm2d_forward(c.sc, p.shortcut_bn, counter));
  } else {
    add_inplace(pre, x);
  }
  count_aux(counter, pre.numel());
  out.y = relu_forward(pre, counter);
  c.pre_relu = std::move(pre);
  c.valid = true;
  return out;
}

template <typename T>
BlockGrads<T> block_backward(const BlockCache<T>& c, const GatedBlockParams<T>& p, const Tensor<T>& grad_y,
                             const Tensor<T>& grad_gates) {
  if (!c.valid) throw Error("block_backward: missing forward cache");
  if (grad_y.shape() != c.pre_relu.shape())
    throw Error("block_backward: grad_y " + shape_str(grad_y.shape()) + " vs output " + shape_str(c.pre_relu.shape()));
  const std::int64_t n = c.x.dim(0), e = p.cardinality, d = p.width;
  if (!grad_gates.empty() && grad_gates.shape() != Shape{n, e})
    throw Error("block_backward: gate gradient must be " + shape_str({n, e}));

  BlockGrads<T> g{p.zeros_like(), Tensor<T>(c.x.shape()), Tensor<T>(c.q.shape())};
  auto& gp = g.params;

  const Tensor<T> g_pre = relu_backward(c.pre_relu, grad_y);
  auto b3 = batchnorm2d_backward(c.e3, p.bn_expand, g_pre);
  gp.bn_expand.gamma = std::move(b3.grad_gamma);
  gp.bn_expand.beta = std::move(b3.grad_beta);
  if (p.has_shortcut) {
    auto bs = batchnorm2d_backward(c.sc, p.shortcut_bn, g_pre);
    gp.shortcut_bn.gamma = std::move(bs.grad_gamma);
    gp.shortcut_bn.beta = std::move(bs.grad_beta);
    auto cs = conv2d_backward(c.x, p.shortcut_conv, bs.grad_x);
    gp.shortcut_conv.weight = std::move(cs.grad_weight);
    if (!cs.grad_bias.empty()) gp.shortcut_conv.bias = std::move(cs.grad_bias);
    add_inplace(g.grad_x, cs.grad_x);
  } else {
    add_inplace(g.grad_x, g_pre);
  }

  // Gradient w.r.t. each group's gate multiplier: <grad of scaled output, unscaled output>.
  std::vector<std::vector<T>> g_gate(static_cast<std::size_t>(n), std::vector<T>(static_cast<std::size_t>(e), T{0}));

  if (c.mode == BlockMode::sparse) {
    const Tensor<T> g_e3 = b3.grad_x;
    std::vector<Tensor<T>> g_r2(static_cast<std::size_t>(n)), g_r1(static_cast<std::size_t>(n));
    std::vector<Tensor<T>> g_t2(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      auto ce = conv2d_backward(c.ss[i], c.expand_views[i], g_e3.sample(i));
      scatter_add_channels(gp.conv_expand.weight, std::span<const std::int64_t>(c.channels[i]), ce.grad_weight);
      if (!ce.grad_bias.empty()) add_inplace(gp.conv_expand.bias, ce.grad_bias);
      const std::int64_t hw = c.t2s[i].dim(2) * c.t2s[i].dim(3);
      Tensor<T> gt(c.t2s[i].shape());
      for (std::size_t gi = 0; gi < c.selected[i].size(); ++gi) {
        const std::int64_t grp = c.selected[i][gi];
        const T scale = c.gate_scale[i][grp];
        T acc{0};
        for (std::int64_t j = 0; j < d; ++j) {
          const std::int64_t off = (static_cast<std::int64_t>(gi) * d + j) * hw;
          for (std::int64_t px = 0; px < hw; ++px) {
            acc += ce.grad_x[off + px] * c.t2s[i][off + px];
            gt[off + px] = ce.grad_x[off + px] * scale;
          }
        }
        g_gate[i][grp] = acc;
      }
      g_t2[i] = relu_backward(c.t2s[i], gt);
    }
    const auto g_b2 =
        ragged_bn_backward(c.r2s, g_t2, c.channels, p.bn_mid, gp.bn_mid.gamma, gp.bn_mid.beta);
    std::vector<Tensor<T>> g_t1(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      auto cc = conv2d_backward(c.t1s[i], c.conv_views[i], g_b2[i]);
      scatter_add_rows(gp.conv_conv.weight, std::span<const std::int64_t>(c.channels[i]), cc.grad_weight);
      if (!cc.grad_bias.empty()) scatter_add_rows(gp.conv_conv.bias, std::span<const std::int64_t>(c.channels[i]), cc.grad_bias);
      g_t1[i] = relu_backward(c.t1s[i], cc.grad_x);
    }
    const auto g_b1 =
        ragged_bn_backward(c.r1s, g_t1, c.channels, p.bn_reduce, gp.bn_reduce.gamma, gp.bn_reduce.beta);
    const std::int64_t per = c.x.numel() / n;
    for (std::int64_t i = 0; i < n; ++i) {
      auto cr = conv2d_backward(c.x.sample(i), c.reduce_views[i], g_b1[i]);
      scatter_add_rows(gp.conv_reduce.weight, std::span<const std::int64_t>(c.channels[i]), cr.grad_weight);
      if (!cr.grad_bias.empty()) scatter_add_rows(gp.conv_reduce.bias, std::span<const std::int64_t>(c.channels[i]), cr.grad_bias);
      T* dst = g.grad_x.ptr() + i * per;
      for (std::int64_t j = 0; j < per; ++j) dst[j] += cr.grad_x[j];
    }
  } else {
    auto ce = conv2d_backward(c.s, p.conv_expand, b3.grad_x);
    gp.conv_expand.weight = std::move(ce.grad_weight);
    if (!ce.grad_bias.empty()) gp.conv_expand.bias = std::move(ce.grad_bias);
    const std::int64_t mid = p.mid_channels(), hw = c.t2.dim(2) * c.t2.dim(3);
    Tensor<T> gt(c.t2.shape());
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ch = 0; ch < mid; ++ch) {
        const std::int64_t grp = ch / d, off = (i * mid + ch) * hw;
        const T scale = c.gate_scale[i][grp];
        T acc{0};
        for (std::int64_t px = 0; px < hw; ++px) {
          acc += ce.grad_x[off + px] * c.t2[off + px];
          gt[off + px] = ce.grad_x[off + px] * scale;
        }
        g_gate[i][grp] += acc;
      }
    // Masked gates are constants zero, so no gradient reaches the controller through them.
    if (c.mode == BlockMode::masked)
      for (std::int64_t i = 0; i < n; ++i) {
        std::vector<T> keep(static_cast<std::size_t>(e), T{0});
        for (auto s : c.selected[i]) keep[s] = g_gate[i][s];
        g_gate[i] = std::move(keep);
      }
    const StatMask mask(c.stat_mask);
    auto b2 = batchnorm2d_backward(c.r2, p.bn_mid, relu_backward(c.t2, gt), mask);
    gp.bn_mid.gamma = std::move(b2.grad_gamma);
    gp.bn_mid.beta = std::move(b2.grad_beta);
    auto cc = conv2d_backward(c.t1, p.conv_conv, b2.grad_x);
    gp.conv_conv.weight = std::move(cc.grad_weight);
    if (!cc.grad_bias.empty()) gp.conv_conv.bias = std::move(cc.grad_bias);
    auto b1 = batchnorm2d_backward(c.r1, p.bn_reduce, relu_backward(c.t1, cc.grad_x), mask);
    gp.bn_reduce.gamma = std::move(b1.grad_gamma);
    gp.bn_reduce.beta = std::move(b1.grad_beta);
    auto cr = conv2d_backward(c.x, p.conv_reduce, b1.grad_x);
    gp.conv_reduce.weight = std::move(cr.grad_weight);
    if (!cr.grad_bias.empty()) gp.conv_reduce.bias = std::move(cr.grad_bias);
    add_inplace(g.grad_x, cr.grad_x);
  }

  const std::int64_t qw = c.q.dim(1);
  for (std::int64_t i = 0; i < n && p.gated; ++i) {
    if (!grad_gates.empty())
      for (std::int64_t j = 0; j < e; ++j) g_gate[i][j] += grad_gates[i * e + j];
    const auto gi = gate_backward(c.gates[i], p.controller, std::span<const T>(g_gate[i]), gp.controller);
    add_region_grad(g.grad_x, i, gi.regions);
    for (std::int64_t j = 0; j < qw; ++j) g.grad_q[i * qw + j] += gi.question[j];
  }
  return g;
}

#define GMC_INSTANTIATE(T)                                                                                       \
  template struct GatedBlockParams<T>;                                                                           \
  template BlockOutput<T> block_forward(const Tensor<T>&, const Tensor<T>&, GatedBlockParams<T>&,                \
                                        const BlockOptions&, MacCounter*, BlockCache<T>*);                       \
  template BlockGrads<T> block_backward(const BlockCache<T>&, const GatedBlockParams<T>&, const Tensor<T>&,      \
                                        const Tensor<T>&);                                                       \
  template Tensor<T> gate_matrix(const std::vector<GateDecision<T>>&);

GMC_INSTANTIATE(float)
GMC_INSTANTIATE(double)
#undef GMC_INSTANTIATE

}  // namespace gmc
