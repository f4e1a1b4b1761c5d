#include "gmc/verify.hpp"

#include <algorithm>
#include <cmath>

#include "gmc/train.hpp"

namespace gmc {

namespace {

template <typename T = double>
Tensor<T> randn(Shape s, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> nd(0.0, stddev);
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(nd(rng));
  return t;
}

template <typename T = double>
Tensor<T> uniform(Shape s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> ud(lo, hi);
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(ud(rng));
  return t;
}

double probe(const TensorD& y, const TensorD& w) {
  double acc = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) acc += y[i] * w[i];
  return acc;
}

std::int64_t pick(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

template <typename T>
std::vector<Tensor<T>*> trainables(GatedBlockParams<T>& p) {
  std::vector<Tensor<T>*> out;
  p.for_each_trainable([&](Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <typename T>
BatchNorm2dParams<T> random_bn(std::int64_t c, std::mt19937_64& rng) {
  auto b = BatchNorm2dParams<T>::make(c);
  b.gamma = uniform<T>({c}, rng, 0.5, 1.5);
  b.beta = randn<T>({c}, rng, 0.3);
  return b;
}

// Gradient of a scalar function of one tensor, checked against the analytic one.
using Probe = std::function<double(const TensorD&)>;

// Which side of every non-smooth point a forward pass landed on: relu signs,
// gate support, fallback flags and top-k sets.
using Pattern = std::vector<std::int64_t>;
using PatternProbe = std::function<std::pair<double, Pattern>(const TensorD&)>;

void add_signs(Pattern& p, const TensorD& t) {
  for (double v : t.data()) p.push_back(v > 0);
}

void add_block(Pattern& p, const BlockCache<double>& c) {
  for (const auto& g : c.gates) {
    for (double v : g.g_raw) p.push_back(v > 0);
    p.push_back(g.fallback_used ? 2 : 3);
  }
  for (const auto& sel : c.selected) {
    p.push_back(-1);
    p.insert(p.end(), sel.begin(), sel.end());
  }
  add_signs(p, c.t1);
  add_signs(p, c.t2);
  for (const auto& t : c.t1s) add_signs(p, t);
  for (const auto& t : c.t2s) add_signs(p, t);
  add_signs(p, c.pre_relu);
}

struct Checker {
  std::vector<GradCheck> results;
  GradCheck current;

  void add(const std::string& name, std::initializer_list<std::tuple<Probe, const TensorD*, const TensorD*>> cases) {
    GradCheck r{name};
    for (const auto& [f, point, analytic] : cases) {
      r.error = std::max(r.error, finite_diff_check(f, *point, *analytic));
      r.checked += point->numel();
    }
    results.push_back(r);
  }

  // Scores the same metric as finite_diff_check into `current`, except that a
  // coordinate whose two probes see different patterns straddles a kink, has no
  // derivative there, and is counted as skipped.
  void piecewise(const PatternProbe& f, const TensorD& point, const TensorD& analytic, double h = 1e-5) {
    TensorD x = point;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const double x0 = x[i];
      x[i] = x0 + h;
      const auto [fp, pp] = f(x);
      x[i] = x0 - h;
      const auto [fm, pm] = f(x);
      x[i] = x0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("finite difference: non-finite function value");
      if (pp != pm) {
        ++current.skipped;
        continue;
      }
      ++current.checked;
      current.error = std::max(current.error, finite_diff_relative_error(analytic[i], (fp - fm) / (2 * h)));
    }
  }

  void finish(const std::string& name) {
    current.name = name;
    results.push_back(current);
    current = {};
  }
};

}  // namespace

template <typename T>
GatedBlockParams<T> random_block_params(const BlockSpec& s, std::mt19937_64& rng) {
  const std::int64_t mid = s.e * s.d;
  auto conv = [&](std::int64_t o, std::int64_t i, std::int64_t p, std::int64_t stride, std::int64_t pad,
                  std::int64_t groups) {
    return Conv2dParams<T>{randn<T>({o, i, p, p}, rng, std::sqrt(2.0 / static_cast<double>(i * p * p))), {}, stride,
                           pad, groups};
  };
  GatedBlockParams<T> p;
  p.cardinality = s.e;
  p.width = s.d;
  p.k = s.k;
  p.conv_reduce = conv(mid, s.c, 1, 1, 0, 1);
  p.bn_reduce = random_bn<T>(mid, rng);
  p.conv_conv = conv(mid, s.d, 3, s.stride, 1, s.e);
  p.bn_mid = random_bn<T>(mid, rng);
  p.conv_expand = conv(s.c_out, mid, 1, 1, 0, 1);
  p.bn_expand = random_bn<T>(s.c_out, rng);
  p.has_shortcut = s.c != s.c_out || s.stride != 1;
  if (p.has_shortcut) {
    p.shortcut_conv = conv(s.c_out, s.c, 1, s.stride, 0, 1);
    p.shortcut_bn = random_bn<T>(s.c_out, rng);
  }
  auto& g = p.controller;
  g.image_to_hidden = randn<T>({s.hidden, s.c}, rng, 0.7);
  g.question_to_hidden = randn<T>({s.hidden, s.question}, rng, 0.7);
  g.hidden_bias = randn<T>({s.hidden}, rng, 0.7);
  g.score_weight = randn<T>({1, s.hidden}, rng, 0.7);
  g.score_bias = randn<T>({1}, rng, 0.7);
  if (s.c != s.question) g.projection = randn<T>({s.question, s.c}, rng, 0.7);
  g.gate_weight = randn<T>({s.e, s.question}, rng, 0.7);
  g.gate_bias = randn<T>({s.e}, rng, 0.7);
  return p;
}

template <typename T>
TrialResult block_equivalence_trial(const BlockSpec& s, std::uint64_t seed, bool inject_fault) {
  std::mt19937_64 rng(seed);
  auto p = random_block_params<T>(s, rng);
  const auto x = randn<T>({s.batch, s.c, s.height, s.width}, rng);
  const auto q = randn<T>({s.batch, s.question}, rng);

  auto pm = p, ps = p;
  BlockCache<T> cm, cs;
  const auto om = block_forward(x, q, pm, {BlockMode::masked}, nullptr, &cm);
  const auto os = block_forward(x, q, ps, {BlockMode::sparse, inject_fault}, nullptr, &cs);
  TrialResult r;
  r.forward = static_cast<double>(max_abs_diff(om.y, os.y));

  const auto gy = randn<T>(om.y.shape(), rng);
  const auto gg = randn<T>({s.batch, s.e}, rng);
  auto gm = block_backward(cm, p, gy, gg);
  auto gs = block_backward(cs, p, gy, gg);
  r.backward = std::max(static_cast<double>(max_abs_diff(gm.grad_x, gs.grad_x)),
                        static_cast<double>(max_abs_diff(gm.grad_q, gs.grad_q)));
  const auto tm = trainables(gm.params), ts = trainables(gs.params);
  for (std::size_t i = 0; i < tm.size(); ++i)
    r.backward = std::max(r.backward, static_cast<double>(max_abs_diff(*tm[i], *ts[i])));
  return r;
}

std::vector<BlockSpec> gated_block_specs(const NetworkConfig& cfg) {
  std::vector<BlockSpec> out;
  const auto extents = stage_output_extents(cfg);
  // stage i's blocks start from the previous layer's extent; the pool halves the stem's
  std::int64_t h = extents[0].height, w = extents[0].width;
  if (cfg.stem.maxpool) {
    const Pool2dSpec pool;
    h = conv_output_extent(h, pool.kernel, pool.stride, pool.padding);
    w = conv_output_extent(w, pool.kernel, pool.stride, pool.padding);
  }
  std::int64_t c = cfg.stem.out;
  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    const auto& st = cfg.stages[si];
    for (std::int64_t b = 0; b < st.blocks; ++b) {
      const std::int64_t stride = b == 0 ? st.stride : 1;
      if (st.gated) {
        BlockSpec s;
        s.c = c;
        s.c_out = st.out;
        s.e = st.cardinality;
        s.d = st.width;
        s.k = cfg.stage_k(si);
        s.stride = stride;
        s.height = h;
        s.width = w;
        s.question = cfg.question_dim;
        s.hidden = cfg.gate_hidden;
        out.push_back(s);
      }
      h = conv_output_extent(h, 3, stride, 1);
      w = conv_output_extent(w, 3, stride, 1);
      c = st.out;
    }
  }
  return out;
}

template <typename T>
VerifyReport verify_config(const NetworkConfig& cfg, std::int64_t trials, std::uint64_t seed, bool inject_fault) {
  if (trials < 1) throw Error("verify: trials must be at least 1");
  const auto specs = gated_block_specs(cfg);
  if (specs.empty()) throw Error("verify: config has no gated blocks");
  VerifyReport rep;
  rep.trials = trials;
  rep.tolerance = std::is_same_v<T, float> ? 1e-5 : 1e-10;
  rep.check_backward = !std::is_same_v<T, float>;
  double worst = -1;
  for (std::int64_t t = 0; t < trials; ++t) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(t);
    std::mt19937_64 rng(s);
    BlockSpec spec = specs[static_cast<std::size_t>(pick(rng, 0, static_cast<std::int64_t>(specs.size()) - 1))];
    spec.k = pick(rng, 1, spec.e);
    spec.batch = pick(rng, 2, 4);
    const auto r = block_equivalence_trial<T>(spec, rng(), inject_fault);
    rep.max_forward = std::max(rep.max_forward, r.forward);
    rep.max_backward = std::max(rep.max_backward, r.backward);
    const double score = rep.check_backward ? std::max(r.forward, r.backward) : r.forward;
    if (score > worst) {
      worst = score;
      rep.worst_trial = t;
      rep.worst_seed = s;
    }
  }
  return rep;
}

std::vector<GradCheck> gradcheck_primitives(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Checker ck;

  for (const bool grouped : {false, true}) {
    const auto x = grouped ? randn({2, 6, 7, 7}, rng) : randn({2, 3, 6, 5}, rng);
    Conv2dParams<double> p = grouped ? Conv2dParams<double>{randn({6, 2, 3, 3}, rng, 0.4), randn({6}, rng), 2, 1, 3}
                                     : Conv2dParams<double>{randn({4, 3, 3, 3}, rng, 0.4), randn({4}, rng), 1, 1, 1};
    const auto w = randn(conv2d_forward(x, p).shape(), rng);
    const auto g = conv2d_backward(x, p, w);
    auto with = [&](auto member) {
      return [&, member](const TensorD& v) {
        auto q = p;
        q.*member = v;
        return probe(conv2d_forward(x, q), w);
      };
    };
    ck.add(grouped ? "conv2d grouped (groups 3, stride 2)" : "conv2d",
           {{[&](const TensorD& v) { return probe(conv2d_forward(v, p), w); }, &x, &g.grad_x},
            {with(&Conv2dParams<double>::weight), &p.weight, &g.grad_weight},
            {with(&Conv2dParams<double>::bias), &p.bias, &g.grad_bias}});
  }

  {
    const auto x = randn({3, 4, 3, 3}, rng, 2.0);
    const auto bn = random_bn<double>(4, rng);
    auto fwd = [&](const TensorD& xx, const BatchNorm2dParams<double>& b) {
      auto copy = b;
      return batchnorm2d_forward(xx, copy);
    };
    const auto w = randn(x.shape(), rng);
    const auto g = batchnorm2d_backward(x, bn, w);
    ck.add("batchnorm (training mode)",
           {{[&](const TensorD& v) { return probe(fwd(v, bn), w); }, &x, &g.grad_x},
            {[&](const TensorD& v) {
               auto b = bn;
               b.gamma = v;
               return probe(fwd(x, b), w);
             },
             &bn.gamma, &g.grad_gamma},
            {[&](const TensorD& v) {
               auto b = bn;
               b.beta = v;
               return probe(fwd(x, b), w);
             },
             &bn.beta, &g.grad_beta}});
  }

  {
    const auto x = randn({3, 5}, rng);
    const LinearParams<double> p{randn({4, 5}, rng), randn({4}, rng)};
    const auto w = randn({3, 4}, rng);
    const auto g = linear_backward(x, p, w);
    ck.add("linear", {{[&](const TensorD& v) { return probe(linear_forward(v, p), w); }, &x, &g.grad_x},
                      {[&](const TensorD& v) { return probe(linear_forward(x, LinearParams<double>{v, p.bias}), w); },
                       &p.weight, &g.grad_weight},
                      {[&](const TensorD& v) { return probe(linear_forward(x, LinearParams<double>{p.weight, v}), w); },
                       &p.bias, &g.grad_bias}});
  }

  for (std::int64_t axis : {0, 1}) {
    const auto x = randn({4, 5}, rng, 2.0);
    const auto w = randn({4, 5}, rng);
    const auto g = softmax_backward(softmax_forward(x, axis), w, axis);
    ck.add("softmax (axis " + std::to_string(axis) + ")",
           {{[&](const TensorD& v) { return probe(softmax_forward(v, axis), w); }, &x, &g}});
  }

  {
    const auto x = randn({3, 7}, rng, 1.5);
    const auto w = randn({3, 7}, rng);
    const auto g = tanh_backward(tanh_forward(x), w);
    ck.add("tanh", {{[&](const TensorD& v) { return probe(tanh_forward(v), w); }, &x, &g}});
  }

  {
    // relu(bn(conv(x))) with the pooling head used by the network
    const auto x = randn({2, 3, 6, 6}, rng);
    const Conv2dParams<double> conv{randn({5, 3, 3, 3}, rng, 0.4), {}, 1, 1, 1};
    const auto bn = random_bn<double>(5, rng);
    auto fwd = [&](const TensorD& xx, const TensorD& weight, const TensorD& gamma) {
      auto c = conv;
      c.weight = weight;
      auto b = bn;
      b.gamma = gamma;
      return maxpool2d_forward(relu_forward(batchnorm2d_forward(conv2d_forward(xx, c), b)), Pool2dSpec{});
    };
    const auto r = conv2d_forward(x, conv);
    auto b = bn;
    const auto t = relu_forward(batchnorm2d_forward(r, b));
    const auto w = randn(maxpool2d_forward(t, Pool2dSpec{}).shape(), rng);
    const auto gb = batchnorm2d_backward(r, bn, relu_backward(t, maxpool2d_backward(t, Pool2dSpec{}, w)));
    const auto gc = conv2d_backward(x, conv, gb.grad_x);
    ck.add("relu composite (conv, bn, relu, maxpool)",
           {{[&](const TensorD& v) { return probe(fwd(v, conv.weight, bn.gamma), w); }, &x, &gc.grad_x},
            {[&](const TensorD& v) { return probe(fwd(x, v, bn.gamma), w); }, &conv.weight, &gc.grad_weight},
            {[&](const TensorD& v) { return probe(fwd(x, conv.weight, v), w); }, &bn.gamma, &gb.grad_gamma}});

    const auto relu_in = randn({3, 8}, rng);
    const auto rw = randn({3, 8}, rng);
    const auto rg = relu_backward(relu_in, rw);
    ck.add("relu", {{[&](const TensorD& v) { return probe(relu_forward(v), rw); }, &relu_in, &rg}});
  }

  {
    const auto x = randn({2, 3, 4, 5}, rng);
    const auto w = randn({2, 3}, rng);
    const auto g = global_avg_pool_backward(x.shape(), w);
    ck.add("global average pool", {{[&](const TensorD& v) { return probe(global_avg_pool_forward(v), w); }, &x, &g}});

    const auto logits = randn({4, 3}, rng, 2.0);
    const std::vector<std::int64_t> labels{0, 2, 1, 2};
    const auto ce = softmax_cross_entropy(logits, labels);
    ck.add("softmax cross-entropy",
           {{[&](const TensorD& v) { return static_cast<double>(softmax_cross_entropy(v, labels).loss); }, &logits,
             &ce.grad_logits}});
  }

  {
    const auto bal = uniform({6, 4}, rng, 0.0, 1.0);
    const auto g = balance_loss_backward(bal);
    ck.add("balance loss", {{[&](const TensorD& v) { return balance_loss(v); }, &bal, &g}});
  }
  return ck.results;
}

std::vector<GradCheck> gradcheck_composites(std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xc0ffee);
  Checker ck;

  for (const bool projected : {true, false}) {
    const std::int64_t f = 6, q = projected ? 5 : 6, e = 5;
    BlockSpec s;
    s.c = f;
    s.question = q;
    s.hidden = 4;
    s.e = e;
    auto params = random_block_params<double>(s, rng).controller;
    const auto regions = randn({9, f}, rng), question = randn({q}, rng);
    const auto w = randn({e}, rng);
    auto loss = [&](const TensorD& r, const TensorD& qq, const GateControllerParams<double>& p) {
      const auto out = gate_forward(r, qq, p, 2);
      std::pair<double, Pattern> res{0.0, {}};
      for (std::int64_t i = 0; i < e; ++i) {
        const auto u = static_cast<std::size_t>(i);
        res.first += out.decision.g_norm[u] * w[i];
        res.second.push_back(out.decision.g_raw[u] > 0);
      }
      res.second.push_back(out.decision.fallback_used);
      return res;
    };
    const auto fwd = gate_forward(regions, question, params, 2);
    auto grads = params.zeros_like();
    const auto gi = gate_backward(fwd.cache, params, std::span<const double>(w.data()), grads);

    std::vector<TensorD*> ps, gs;
    params.for_each([&](TensorD& t) { ps.push_back(&t); });
    grads.for_each([&](TensorD& t) { gs.push_back(&t); });
    ck.piecewise([&](const TensorD& v) { return loss(v, question, params); }, regions, gi.regions);
    ck.piecewise([&](const TensorD& v) { return loss(regions, v, params); }, question, gi.question);
    double shift = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto f_i = [&](const TensorD& v) {
        auto p = params;
        std::vector<TensorD*> pp;
        p.for_each([&](TensorD& t) { pp.push_back(&t); });
        *pp[i] = v;
        return loss(regions, question, p);
      };
      if (ps[i] == &params.score_bias) {
        // Softmax is shift invariant, so the true gradient is exactly zero and a
        // relative error would only measure rounding noise. Check it absolutely.
        TensorD up = *ps[i], down = *ps[i];
        up[0] += 1e-5;
        down[0] -= 1e-5;
        shift = std::max({shift, std::abs((*gs[i])[0]), std::abs((f_i(up).first - f_i(down).first) / 2e-5)});
        continue;
      }
      ck.piecewise(f_i, *ps[i], *gs[i]);
    }
    const std::string tag = projected ? "" : " (no projection)";
    ck.finish("gate controller" + tag);
    ck.results.push_back({"gate controller score bias, absolute" + tag, shift, 1, 0});
  }


  for (BlockMode mode : {BlockMode::dense, BlockMode::masked, BlockMode::sparse}) {
    BlockSpec s;
    s.c = 6;
    s.c_out = 8;
    s.stride = 2;
    s.height = s.width = 5;
    auto p = random_block_params<double>(s, rng);
    const auto x = randn({2, 6, 5, 5}, rng), q = randn({2, 5}, rng);
    auto run = [&](const GatedBlockParams<double>& pp, const TensorD& xx, const TensorD& qq, BlockCache<double>* c) {
      auto copy = pp;
      return block_forward(xx, qq, copy, {mode}, nullptr, c);
    };
    BlockCache<double> cache;
    const auto out = run(p, x, q, &cache);
    const auto w = randn(out.y.shape(), rng), wg = randn({2, 4}, rng);
    auto loss = [&](const GatedBlockParams<double>& pp, const TensorD& xx, const TensorD& qq) {
      BlockCache<double> c;
      const auto o = run(pp, xx, qq, &c);
      std::pair<double, Pattern> res{probe(o.y, w) + probe(gate_matrix(o.decisions), wg), {}};
      add_block(res.second, c);
      return res;
    };
    auto g = block_backward(cache, p, w, wg);
    ck.piecewise([&](const TensorD& v) { return loss(p, v, q); }, x, g.grad_x);
    ck.piecewise([&](const TensorD& v) { return loss(p, x, v); }, q, g.grad_q);
    const auto ps = trainables(p), gs = trainables(g.params);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i] == &p.controller.score_bias) continue;  // shift invariant, see the controller check
      ck.piecewise(
          [&](const TensorD& v) {
            auto pp = p;
            *trainables(pp)[i] = v;
            return loss(pp, x, q);
          },
          *ps[i], *gs[i]);
    }
    const char* names[] = {"gated block (dense)", "gated block (masked)", "gated block (sparse)"};
    ck.finish(names[static_cast<int>(mode)]);
  }

  {
    // Whole network: cross-entropy plus lambda times the balance losses. No stem
    // pool: when every pool window holds an active unit, a stem BN shift reaches
    // the first block as a constant that its training-mode BN removes, so the
    // loss is exactly flat along it and the central difference is pure rounding.
    NetworkConfig cfg;
    cfg.name = "gradcheck";
    cfg.input = {3, 8, 8};
    cfg.stem = {3, 6, 1, false};
    cfg.stages = {StageConfig{1, 8, 4, 2, 2, true, {}, {}}, StageConfig{1, 8, 4, 1, 1, true, 3, {}}};
    cfg.classes = 3;
    cfg.question_dim = 4;
    cfg.gate_hidden = 5;
    cfg.k = 2;
    auto net = build_network<double>(cfg, seed);
    net.for_each_bn([&](BatchNorm2dParams<double>& b) { b = random_bn<double>(b.channels(), rng); });
    const auto x = randn({4, 3, 8, 8}, rng), q = randn({4, 4}, rng);
    const std::vector<std::int64_t> labels{0, 2, 1, 1};
    const double lambda = 0.5;
    for (BlockMode mode : {BlockMode::dense, BlockMode::sparse}) {
      NetworkGrads<double> g;
      auto probe_net = net;
      training_loss(probe_net, x, q, labels, lambda, mode, &g);
      auto loss = [&](Network<double> n, const TensorD& xx, const TensorD& qq) {
        std::pair<double, Pattern> res;
        auto copy = n;
        NetworkCache<double> c;
        network_forward(copy, xx, qq, NetworkOptions{mode}, nullptr, &c);
        add_signs(res.second, c.stem_t);
        for (const auto& b : c.blocks) add_block(res.second, b);
        res.first = training_loss(n, xx, qq, labels, lambda, mode).total;
        return res;
      };
      ck.piecewise([&](const TensorD& v) { return loss(net, v, q); }, x, g.grad_images);
      ck.piecewise([&](const TensorD& v) { return loss(net, x, v); }, q, g.grad_questions);
      std::vector<TensorD*> ps, gs;
      net.for_each_trainable([&](TensorD& t) { ps.push_back(&t); });
      g.params.for_each_trainable([&](TensorD& t) { gs.push_back(&t); });
      for (std::size_t i = 0; i < ps.size(); ++i) {
        if (ps[i]->numel() == 1) continue;  // score biases, shift invariant
        ck.piecewise(
            [&](const TensorD& v) {
              auto n = net;
              std::vector<TensorD*> pp;
              n.for_each_trainable([&](TensorD& t) { pp.push_back(&t); });
              *pp[i] = v;
              return loss(n, x, q);
            },
            *ps[i], *gs[i]);
      }
      ck.finish(std::string("training loss with balance term (") + (mode == BlockMode::dense ? "dense" : "sparse") +
                ")");
    }
  }
  return ck.results;
}

std::vector<GradCheck> gradcheck_suite(std::uint64_t seed) {
  auto out = gradcheck_primitives(seed);
  for (auto& r : gradcheck_composites(seed)) out.push_back(std::move(r));
  return out;
}

#define GMC_INSTANTIATE(T)                                                                       \
  template GatedBlockParams<T> random_block_params(const BlockSpec&, std::mt19937_64&);          \
  template TrialResult block_equivalence_trial<T>(const BlockSpec&, std::uint64_t, bool);        \
  template VerifyReport verify_config<T>(const NetworkConfig&, std::int64_t, std::uint64_t, bool);

GMC_INSTANTIATE(float)
GMC_INSTANTIATE(double)
#undef GMC_INSTANTIATE

}  // namespace gmc
