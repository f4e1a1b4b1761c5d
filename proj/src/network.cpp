#include <cmath>
#include <random>

#include "gmc/netconfig.hpp"
#include "gmc/tensor_io.hpp"

namespace gmc {

namespace {

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Conv2dParams<T> conv(std::int64_t out, std::int64_t in, std::int64_t kernel, std::int64_t stride,
                       std::int64_t padding, std::int64_t groups) {
    const std::int64_t fan_in = in / groups * kernel * kernel;
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor<T> w({out, in / groups, kernel, kernel});
    for (auto& v : w.data()) v = static_cast<T>(nd(rng_));
    return {std::move(w), {}, stride, padding, groups};
  }

  Tensor<T> linear(std::int64_t out, std::int64_t in) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> ud(-a, a);
    Tensor<T> w({out, in});
    for (auto& v : w.data()) v = static_cast<T>(ud(rng_));
    return w;
  }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
GateControllerParams<T> make_controller(Initializer<T>& init, std::int64_t f, std::int64_t q, std::int64_t hidden,
                                        std::int64_t e) {
  GateControllerParams<T> c;
  c.image_to_hidden = init.linear(hidden, f);
  c.question_to_hidden = init.linear(hidden, q);
  c.hidden_bias = Tensor<T>({hidden});
  c.score_weight = init.linear(1, hidden);
  c.score_bias = Tensor<T>({1});
  if (f != q) c.projection = init.linear(q, f);
  c.gate_weight = init.linear(e, q);
  c.gate_bias = Tensor<T>({e});
  return c;
}

template <typename T>
void check_network_inputs(const Network<T>& net, const Tensor<T>& images, const Tensor<T>& questions) {
  const auto& in = net.config.input;
  if (images.rank() != 4 || images.dim(1) != in.channels || images.dim(2) != in.height || images.dim(3) != in.width)
    throw Error("network expects images N x " + std::to_string(in.channels) + " x " + std::to_string(in.height) +
                " x " + std::to_string(in.width) + ", got " + shape_str(images.shape()));
  if (questions.rank() != 2 || questions.dim(0) != images.dim(0) || questions.dim(1) != net.config.question_dim)
    throw Error("network expects questions " + std::to_string(images.dim(0)) + " x " +
                std::to_string(net.config.question_dim) + ", got " + shape_str(questions.shape()));
}

}  // namespace

template <typename T>
Network<T> build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  if (auto v = config_violations(cfg); !v.empty()) throw ConfigError(v);
  Initializer<T> init(seed);
  Network<T> net;
  net.config = cfg;
  net.stem_conv = init.conv(cfg.stem.out, cfg.input.channels, cfg.stem.kernel, cfg.stem.stride, cfg.stem.kernel / 2, 1);
  net.stem_bn = BatchNorm2dParams<T>::make(cfg.stem.out);

  std::int64_t c = cfg.stem.out;
  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    const auto& st = cfg.stages[si];
    const std::int64_t mid = st.cardinality * st.width;
    for (std::int64_t bi = 0; bi < st.blocks; ++bi) {
      const std::int64_t stride = bi == 0 ? st.stride : 1;
      GatedBlockParams<T> b;
      b.cardinality = st.cardinality;
      b.width = st.width;
      b.gated = st.gated;
      b.k = st.gated ? cfg.stage_k(si) : st.cardinality;
      b.conv_reduce = init.conv(mid, c, 1, 1, 0, 1);
      b.bn_reduce = BatchNorm2dParams<T>::make(mid);
      b.conv_conv = init.conv(mid, mid, 3, stride, 1, st.cardinality);
      b.bn_mid = BatchNorm2dParams<T>::make(mid);
      b.conv_expand = init.conv(st.out, mid, 1, 1, 0, 1);
      b.bn_expand = BatchNorm2dParams<T>::make(st.out);
      b.has_shortcut = c != st.out || stride != 1;
      if (b.has_shortcut) {
        b.shortcut_conv = init.conv(st.out, c, 1, stride, 0, 1);
        b.shortcut_bn = BatchNorm2dParams<T>::make(st.out);
      }
      if (st.gated) b.controller = make_controller(init, c, cfg.question_dim, cfg.gate_hidden, st.cardinality);
      net.blocks.push_back(std::move(b));
      net.block_names.push_back("stage" + std::to_string(si + 1) + ".block" + std::to_string(bi + 1));
      c = st.out;
    }
  }
  if (cfg.post_conv) {
    net.has_post_conv = true;
    net.post_conv = init.conv(cfg.post_conv->out, c, 1, 1, 0, 1);
    if (cfg.post_conv->bn_relu)
      net.post_bn = BatchNorm2dParams<T>::make(cfg.post_conv->out);
    else
      net.post_conv.bias = Tensor<T>({cfg.post_conv->out});
    c = cfg.post_conv->out;
  }
  net.head.weight = init.linear(cfg.classes, c);
  net.head.bias = Tensor<T>({cfg.classes});
  return net;
}

template <typename T>
void Network<T>::set_k(std::int64_t k) {
  for (auto& b : blocks)
    if (b.gated) {
      if (k > b.cardinality) throw Error("k exceeds cardinality");
      if (k < 1) throw Error("k must be at least 1");
      b.k = k;
    }
  config.k = k;
  for (auto& s : config.stages) s.k.reset();
}

template <typename T>
std::int64_t Network<T>::parameter_count() {
  std::int64_t n = 0;
  for_each_trainable([&](Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
std::size_t Network<T>::gated_block_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.gated ? 1 : 0;
  return n;
}

template <typename T>
Network<T> Network<T>::zeros_like() const {
  Network z = *this;
  z.for_each_trainable([](Tensor<T>& t) { t.fill(T{0}); });
  return z;
}

template <typename T>
void save_parameters(Network<T>& net, const std::filesystem::path& path) {
  std::vector<const Tensor<T>*> ptrs;
  net.for_each_state([&](Tensor<T>& t) { ptrs.push_back(&t); });
  save_tensors(path.string(), ptrs);
}

template <typename T>
void load_parameters(Network<T>& net, const std::filesystem::path& path) {
  auto loaded = load_tensors<T>(path.string());
  std::size_t i = 0;
  net.for_each_state([&](Tensor<T>& t) {
    if (i >= loaded.size()) throw Error("parameter file " + path.string() + " has too few tensors");
    if (loaded[i].shape() != t.shape())
      throw Error("parameter file " + path.string() + ": tensor " + std::to_string(i) + " has shape " +
                  shape_str(loaded[i].shape()) + ", expected " + shape_str(t.shape()));
    t = std::move(loaded[i++]);
  });
  if (i != loaded.size()) throw Error("parameter file " + path.string() + " has too many tensors");
}

template <typename T>
NetworkOutput<T> network_forward(Network<T>& net, const Tensor<T>& images, const Tensor<T>& questions,
                                 const NetworkOptions& opt, MacCounter* counter, NetworkCache<T>* cache) {
  check_network_inputs(net, images, questions);
  NetworkCache<T> local;
  NetworkCache<T>& c = cache ? *cache : local;
  c = NetworkCache<T>{};
  c.images = images;

  c.stem_r = conv2d_forward(images, net.stem_conv, counter);
  c.stem_t = relu_forward(batchnorm2d_forward(c.stem_r, net.stem_bn, counter), counter);
  Tensor<T> x = net.config.stem.maxpool ? maxpool2d_forward(c.stem_t, Pool2dSpec{}, counter) : c.stem_t;

  NetworkOutput<T> out;
  c.blocks.resize(net.blocks.size());
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    auto r = block_forward(x, questions, net.blocks[b], {opt.mode, opt.inject_gather_fault}, counter, &c.blocks[b]);
    x = std::move(r.y);
    if (net.blocks[b].gated) out.decisions.push_back(std::move(r.decisions));
  }

  if (net.has_post_conv) {
    c.post_in = std::move(x);
    c.post_r = conv2d_forward(c.post_in, net.post_conv, counter);
    c.post_t = net.config.post_conv->bn_relu
                   ? relu_forward(batchnorm2d_forward(c.post_r, net.post_bn, counter), counter)
                   : c.post_r;
    x = c.post_t;
  }
  c.pooled = global_avg_pool_forward(x, counter);
  c.features = std::move(x);
  out.logits = linear_forward(c.pooled, net.head, counter);
  c.valid = true;
  return out;
}

template <typename T>
NetworkGrads<T> network_backward(const NetworkCache<T>& c, const Network<T>& net, const Tensor<T>& grad_logits,
                                 const std::vector<Tensor<T>>& gate_grads) {
  if (!c.valid) throw Error("network_backward: missing forward cache");
  if (!gate_grads.empty() && gate_grads.size() != net.gated_block_count())
    throw Error("network_backward: expected one gate gradient per gated block");
  NetworkGrads<T> g{net.zeros_like(), {}, Tensor<T>({c.images.dim(0), net.config.question_dim})};
  auto& gp = g.params;

  auto lin = linear_backward(c.pooled, net.head, grad_logits);
  gp.head.weight = std::move(lin.grad_weight);
  gp.head.bias = std::move(lin.grad_bias);
  Tensor<T> grad = global_avg_pool_backward(c.features.shape(), lin.grad_x);

  if (net.has_post_conv) {
    if (net.config.post_conv->bn_relu) {
      auto bn = batchnorm2d_backward(c.post_r, net.post_bn, relu_backward(c.post_t, grad));
      gp.post_bn.gamma = std::move(bn.grad_gamma);
      gp.post_bn.beta = std::move(bn.grad_beta);
      grad = std::move(bn.grad_x);
    }
    auto cv = conv2d_backward(c.post_in, net.post_conv, grad);
    gp.post_conv.weight = std::move(cv.grad_weight);
    if (!cv.grad_bias.empty()) gp.post_conv.bias = std::move(cv.grad_bias);
    grad = std::move(cv.grad_x);
  }

  std::size_t gate_index = net.gated_block_count();
  for (std::size_t b = net.blocks.size(); b-- > 0;) {
    const Tensor<T>* gg = nullptr;
    if (net.blocks[b].gated) {
      --gate_index;
      if (!gate_grads.empty()) gg = &gate_grads[gate_index];
    }
    auto bg = block_backward(c.blocks[b], net.blocks[b], grad, gg ? *gg : Tensor<T>{});
    gp.blocks[b] = std::move(bg.params);
    add_inplace(g.grad_questions, bg.grad_q);
    grad = std::move(bg.grad_x);
  }

  if (net.config.stem.maxpool) grad = maxpool2d_backward(c.stem_t, Pool2dSpec{}, grad);
  auto bn = batchnorm2d_backward(c.stem_r, net.stem_bn, relu_backward(c.stem_t, grad));
  gp.stem_bn.gamma = std::move(bn.grad_gamma);
  gp.stem_bn.beta = std::move(bn.grad_beta);
  auto cv = conv2d_backward(c.images, net.stem_conv, bn.grad_x);
  gp.stem_conv.weight = std::move(cv.grad_weight);
  g.grad_images = std::move(cv.grad_x);
  return g;
}

#define GMC_INSTANTIATE(T)                                                                                      \
  template struct Network<T>;                                                                                   \
  template Network<T> build_network(const NetworkConfig&, std::uint64_t);                                      \
  template void save_parameters(Network<T>&, const std::filesystem::path&);                                     \
  template void load_parameters(Network<T>&, const std::filesystem::path&);                                     \
  template NetworkOutput<T> network_forward(Network<T>&, const Tensor<T>&, const Tensor<T>&, const NetworkOptions&, \
                                            MacCounter*, NetworkCache<T>*);                                     \
  template NetworkGrads<T> network_backward(const NetworkCache<T>&, const Network<T>&, const Tensor<T>&,        \
                                            const std::vector<Tensor<T>>&);

GMC_INSTANTIATE(float)
GMC_INSTANTIATE(double)
#undef GMC_INSTANTIATE

}  // namespace gmc
