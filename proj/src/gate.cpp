#include "gmc/gate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace gmc {

namespace {

template <typename T>
void require_vector(const Tensor<T>& t, std::int64_t len, const char* what) {
  if (t.numel() != len)
    throw Error(std::string("gate controller: ") + what + " has shape " + shape_str(t.shape()) + ", expected " +
                std::to_string(len) + " entries");
}

template <typename T>
void require_matrix(const Tensor<T>& t, std::int64_t rows, std::int64_t cols, const char* what) {
  if (t.rank() != 2 || t.dim(0) != rows || t.dim(1) != cols)
    throw Error(std::string("gate controller: ") + what + " has shape " + shape_str(t.shape()) + ", expected " +
                shape_str({rows, cols}));
}

template <typename T>
void require_finite(std::span<const T> v, const char* what) {
  for (auto x : v)
    if (!std::isfinite(static_cast<double>(x))) throw Error(std::string("non-finite ") + what);
}

}  // namespace

template <typename T>
void GateControllerParams<T>::validate() const {
  if (image_to_hidden.rank() != 2) throw Error("gate controller: image_to_hidden must be Hd x F");
  if (gate_weight.rank() != 2) throw Error("gate controller: gate_weight must be E x Q");
  const std::int64_t hd = hidden(), f = feature_dim(), e = experts(), q = gate_weight.dim(1);
  require_matrix(question_to_hidden, hd, q, "question_to_hidden");
  require_vector(hidden_bias, hd, "hidden_bias");
  require_matrix(score_weight, 1, hd, "score_weight");
  require_vector(score_bias, 1, "score_bias");
  if (projection.empty()) {
    if (f != q) throw Error("gate controller: feature width differs from question width but no projection is set");
  } else {
    require_matrix(projection, q, f, "projection");
  }
  require_vector(gate_bias, e, "gate_bias");
}

template <typename T>
GateControllerParams<T> GateControllerParams<T>::zeros_like() const {
  GateControllerParams z = *this;
  z.for_each([](Tensor<T>& t) { t.fill(T{0}); });
  return z;
}

std::int64_t gate_controller_ops(std::int64_t d, std::int64_t f, std::int64_t q, std::int64_t hd, std::int64_t e,
                                 bool has_projection) {
  std::int64_t ops = 0;
  ops += d * f * hd;                  // regions x image_to_hidden
  ops += q * hd + hd;                 // question term and its bias
  ops += d * hd;                      // broadcast add
  ops += d * hd;                      // tanh
  ops += d * hd + d;                  // scores
  ops += d;                           // softmax
  ops += d * f;                       // attention-weighted pooling
  ops += has_projection ? q * f : 0;  // projection into question space
  ops += q;                           // query = v_tilde + v_q
  ops += e * q + e;                   // gating MLP
  ops += 2 * e;                       // relu + L1 normalization
  return ops;
}

template <typename T>
Tensor<T> feature_regions(const Tensor<T>& x, std::int64_t n) {
  if (x.rank() != 4) throw Error("feature_regions expects N x C x H x W, got " + shape_str(x.shape()));
  const std::int64_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> r({hw, c});
  const T* base = x.ptr() + n * c * hw;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t d = 0; d < hw; ++d) r[d * c + ch] = base[ch * hw + d];
  return r;
}

template <typename T>
void add_region_grad(Tensor<T>& grad_x, std::int64_t n, const Tensor<T>& grad_regions) {
  const std::int64_t c = grad_x.dim(1), hw = grad_x.dim(2) * grad_x.dim(3);
  if (grad_regions.shape() != Shape{hw, c}) throw Error("add_region_grad: shape mismatch");
  T* base = grad_x.ptr() + n * c * hw;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t d = 0; d < hw; ++d) base[ch * hw + d] += grad_regions[d * c + ch];
}

namespace {

template <typename T>
struct AttentionInternals {
  Tensor<T> hidden;  // D x Hd after tanh
  Tensor<T> attention;
  Tensor<T> pooled;
  Tensor<T> v_tilde;
};

template <typename T>
AttentionInternals<T> run_attention(const Tensor<T>& regions, const Tensor<T>& question,
                                    const GateControllerParams<T>& p) {
  p.validate();
  if (regions.rank() != 2 || regions.dim(1) != p.feature_dim())
    throw Error("attention_pool: regions " + shape_str(regions.shape()) + " do not have " +
                std::to_string(p.feature_dim()) + " features");
  if (question.numel() != p.question_dim())
    throw Error("attention_pool: question has " + std::to_string(question.numel()) + " entries, expected " +
                std::to_string(p.question_dim()));
  require_finite(regions.data(), "image features");
  require_finite(question.data(), "question features");
  const std::int64_t d = regions.dim(0), f = regions.dim(1), hd = p.hidden(), q = p.question_dim();

  std::vector<T> qterm(static_cast<std::size_t>(hd));
  for (std::int64_t h = 0; h < hd; ++h) {
    T acc{0};
    for (std::int64_t j = 0; j < q; ++j) acc += p.question_to_hidden.at(h, j) * question[j];
    qterm[h] = acc + p.hidden_bias[h];
  }

  AttentionInternals<T> out;
  out.hidden = Tensor<T>({d, hd});
  Tensor<T> scores({d});
  for (std::int64_t r = 0; r < d; ++r) {
    const T* reg = regions.ptr() + r * f;
    T score{0};
    for (std::int64_t h = 0; h < hd; ++h) {
      const T* w = p.image_to_hidden.ptr() + h * f;
      T acc{0};
      for (std::int64_t j = 0; j < f; ++j) acc += w[j] * reg[j];
      const T hv = std::tanh(acc + qterm[h]);
      out.hidden.at(r, h) = hv;
      score += p.score_weight[h] * hv;
    }
    scores[r] = score + p.score_bias[0];
  }
  out.attention = softmax_forward(scores, 0);

  out.pooled = Tensor<T>({f});
  for (std::int64_t r = 0; r < d; ++r) {
    const T a = out.attention[r];
    const T* reg = regions.ptr() + r * f;
    for (std::int64_t j = 0; j < f; ++j) out.pooled[j] += a * reg[j];
  }
  if (p.projection.empty()) {
    out.v_tilde = out.pooled;
  } else {
    out.v_tilde = Tensor<T>({q});
    for (std::int64_t i = 0; i < q; ++i) {
      T acc{0};
      for (std::int64_t j = 0; j < f; ++j) acc += p.projection.at(i, j) * out.pooled[j];
      out.v_tilde[i] = acc;
    }
  }
  return out;
}

}  // namespace

template <typename T>
AttentionPool<T> attention_pool(const Tensor<T>& regions, const Tensor<T>& question,
                                const GateControllerParams<T>& params, MacCounter* counter) {
  auto in = run_attention(regions, question, params);
  if (counter) {
    const std::int64_t e = params.experts();
    count_aux(counter, gate_controller_ops(regions.dim(0), regions.dim(1), params.question_dim(), params.hidden(), e,
                                           !params.projection.empty()) -
                           (params.question_dim() + e * params.question_dim() + e + 2 * e));
  }
  return {std::move(in.v_tilde), std::move(in.attention)};
}

template <typename T>
void normalize_gates(std::span<const T> g_raw, std::vector<T>& g_norm, bool& fallback_used) {
  const std::size_t e = g_raw.size();
  g_norm.assign(e, T{0});
  double l1 = 0.0;
  for (auto v : g_raw) l1 += v > T{0} ? static_cast<double>(v) : 0.0;
  if (l1 > kGateFallbackThreshold) {
    const T s = static_cast<T>(l1);
    for (std::size_t i = 0; i < e; ++i) g_norm[i] = g_raw[i] > T{0} ? g_raw[i] / s : T{0};
    fallback_used = false;
  } else {
    std::fill(g_norm.begin(), g_norm.end(), T{1} / static_cast<T>(e));
    fallback_used = true;
  }
}

template <typename T>
GateDecision<T> gate_weights(const Tensor<T>& v_tilde, const Tensor<T>& question,
                             const GateControllerParams<T>& p, MacCounter* counter) {
  const std::int64_t q = p.gate_weight.dim(1), e = p.experts();
  if (v_tilde.numel() != q || question.numel() != q)
    throw Error("gate_weights: expected query vectors of width " + std::to_string(q));
  if (p.gate_bias.numel() != e) throw Error("gate_weights: gate_bias length mismatch");
  require_finite(v_tilde.data(), "attended features");
  require_finite(question.data(), "question features");
  GateDecision<T> d;
  d.g_raw.resize(static_cast<std::size_t>(e));
  for (std::int64_t i = 0; i < e; ++i) {
    T acc{0};
    for (std::int64_t j = 0; j < q; ++j) acc += p.gate_weight.at(i, j) * (v_tilde[j] + question[j]);
    d.g_raw[i] = acc + p.gate_bias[i];
  }
  require_finite(std::span<const T>(d.g_raw), "gate logits");
  normalize_gates<T>(d.g_raw, d.g_norm, d.fallback_used);
  count_aux(counter, q + e * q + e + 2 * e);
  return d;
}

template <typename T>
std::vector<std::int64_t> topk_select(std::span<const T> g_norm, std::int64_t k) {
  const auto e = static_cast<std::int64_t>(g_norm.size());
  if (k < 1 || k > e)
    throw Error(k > e ? "k exceeds cardinality" : "k must be at least 1");
  std::vector<std::int64_t> order(static_cast<std::size_t>(e));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](std::int64_t a, std::int64_t b) {
    if (g_norm[a] != g_norm[b]) return g_norm[a] > g_norm[b];
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

template <typename T>
T cv_squared(std::span<const T> values) {
  if (values.empty()) throw Error("degenerate importance vector");
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (auto v : values) sum += v;
  const double mean = sum / n;
  if (!(mean > 0.0)) throw Error("degenerate importance vector");
  double sq = 0.0;
  for (auto v : values) sq += (v - mean) * (v - mean);
  return static_cast<T>((sq / n) / (mean * mean));
}

namespace {

template <typename T>
std::vector<T> importance(const Tensor<T>& batch_gates) {
  if (batch_gates.empty()) throw Error("balance_loss: empty batch");
  if (batch_gates.rank() != 2) throw Error("balance_loss expects a B x E matrix, got " + shape_str(batch_gates.shape()));
  const std::int64_t b = batch_gates.dim(0), e = batch_gates.dim(1);
  std::vector<T> imp(static_cast<std::size_t>(e), T{0});
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < e; ++j) imp[j] += batch_gates.at(i, j);
  return imp;
}

}  // namespace

template <typename T>
T balance_loss(const Tensor<T>& batch_gates) {
  const auto imp = importance(batch_gates);
  return cv_squared<T>(imp);
}

template <typename T>
Tensor<T> balance_loss_backward(const Tensor<T>& batch_gates) {
  const auto imp = importance(batch_gates);
  const double e = static_cast<double>(imp.size());
  double s = 0.0, q = 0.0;
  for (auto v : imp) {
    s += v;
    q += static_cast<double>(v) * v;
  }
  if (!(s > 0.0)) throw Error("degenerate importance vector");
  // cv^2 = E * sum(imp^2) / sum(imp)^2 - 1
  Tensor<T> g(batch_gates.shape());
  for (std::size_t j = 0; j < imp.size(); ++j) {
    const T d = static_cast<T>(2.0 * e * imp[j] / (s * s) - 2.0 * e * q / (s * s * s));
    for (std::int64_t i = 0; i < batch_gates.dim(0); ++i) g.at(i, static_cast<std::int64_t>(j)) = d;
  }
  return g;
}

template <typename T>
GateForward<T> gate_forward(const Tensor<T>& regions, const Tensor<T>& question, const GateControllerParams<T>& p,
                            std::int64_t k, MacCounter* counter) {
  auto in = run_attention(regions, question, p);
  GateForward<T> out;
  out.decision = gate_weights(in.v_tilde, question, p);
  out.decision.selected = topk_select<T>(out.decision.g_norm, k);
  out.decision.attention.assign(in.attention.data().begin(), in.attention.data().end());
  count_aux(counter, gate_controller_ops(regions.dim(0), regions.dim(1), p.question_dim(), p.hidden(), p.experts(),
                                         !p.projection.empty()));

  auto& c = out.cache;
  c.regions = regions;
  c.question = question;
  c.hidden = std::move(in.hidden);
  c.attention = std::move(in.attention);
  c.pooled = std::move(in.pooled);
  c.query = add(in.v_tilde, question);
  c.g_raw = out.decision.g_raw;
  c.g_norm = out.decision.g_norm;
  c.fallback_used = out.decision.fallback_used;
  return out;
}

template <typename T>
GateInputGrads<T> gate_backward(const GateCache<T>& c, const GateControllerParams<T>& p,
                                std::span<const T> grad_g_norm, GateControllerParams<T>& gp) {
  if (c.regions.empty()) throw Error("gate_backward: missing forward cache");
  const std::int64_t d = c.regions.dim(0), f = c.regions.dim(1), hd = p.hidden(), q = p.question_dim(),
                     e = p.experts();
  if (static_cast<std::int64_t>(grad_g_norm.size()) != e)
    throw Error("gate_backward: gradient has " + std::to_string(grad_g_norm.size()) + " entries, expected " +
                std::to_string(e));

  GateInputGrads<T> out{Tensor<T>({d, f}), Tensor<T>({q})};
  if (c.fallback_used) return out;

  // g' = r / sum(r), r = relu(g)
  double l1 = 0.0;
  for (auto v : c.g_raw) l1 += v > T{0} ? static_cast<double>(v) : 0.0;
  double dot = 0.0;
  for (std::int64_t i = 0; i < e; ++i) dot += static_cast<double>(grad_g_norm[i]) * c.g_norm[i];
  std::vector<T> dg(static_cast<std::size_t>(e));
  for (std::int64_t i = 0; i < e; ++i)
    dg[i] = c.g_raw[i] > T{0} ? static_cast<T>((grad_g_norm[i] - dot) / l1) : T{0};

  // g = W_g * query + b_g
  std::vector<T> dquery(static_cast<std::size_t>(q), T{0});
  for (std::int64_t i = 0; i < e; ++i) {
    gp.gate_bias[i] += dg[i];
    for (std::int64_t j = 0; j < q; ++j) {
      gp.gate_weight.at(i, j) += dg[i] * c.query[j];
      dquery[j] += p.gate_weight.at(i, j) * dg[i];
    }
  }
  for (std::int64_t j = 0; j < q; ++j) out.question[j] += dquery[j];

  std::vector<T> dpooled(static_cast<std::size_t>(f), T{0});
  if (p.projection.empty()) {
    std::copy(dquery.begin(), dquery.end(), dpooled.begin());
  } else {
    for (std::int64_t i = 0; i < q; ++i)
      for (std::int64_t j = 0; j < f; ++j) {
        gp.projection.at(i, j) += dquery[i] * c.pooled[j];
        dpooled[j] += p.projection.at(i, j) * dquery[i];
      }
  }

  // pooled = sum_r attention[r] * regions[r]
  Tensor<T> dattn({d});
  for (std::int64_t r = 0; r < d; ++r) {
    const T* reg = c.regions.ptr() + r * f;
    T* greg = out.regions.ptr() + r * f;
    T acc{0};
    for (std::int64_t j = 0; j < f; ++j) {
      acc += dpooled[j] * reg[j];
      greg[j] += c.attention[r] * dpooled[j];
    }
    dattn[r] = acc;
  }
  const Tensor<T> dscore = softmax_backward(c.attention, dattn, 0);

  std::vector<T> dqterm(static_cast<std::size_t>(hd), T{0});
  for (std::int64_t r = 0; r < d; ++r) {
    gp.score_bias[0] += dscore[r];
    const T* reg = c.regions.ptr() + r * f;
    T* greg = out.regions.ptr() + r * f;
    for (std::int64_t h = 0; h < hd; ++h) {
      const T hv = c.hidden.at(r, h);
      gp.score_weight[h] += dscore[r] * hv;
      const T dz = dscore[r] * p.score_weight[h] * (T{1} - hv * hv);
      dqterm[h] += dz;
      T* gw = gp.image_to_hidden.ptr() + h * f;
      const T* w = p.image_to_hidden.ptr() + h * f;
      for (std::int64_t j = 0; j < f; ++j) {
        gw[j] += dz * reg[j];
        greg[j] += w[j] * dz;
      }
    }
  }
  for (std::int64_t h = 0; h < hd; ++h) {
    gp.hidden_bias[h] += dqterm[h];
    for (std::int64_t j = 0; j < q; ++j) {
      gp.question_to_hidden.at(h, j) += dqterm[h] * c.question[j];
      out.question[j] += p.question_to_hidden.at(h, j) * dqterm[h];
    }
  }
  return out;
}

void write_gate_csv(std::ostream& os, std::span<const GateCsvRow> rows) {
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.g_norm.size());
  os << "block_id,sample_id,k,fallback_used";
  for (std::size_t i = 0; i < width; ++i) os << ",g" << i;
  os << ",selected\n";
  const auto old_precision = os.precision(17);
  for (const auto& r : rows) {
    os << r.block_id << ',' << r.sample_id << ',' << r.k << ',' << (r.fallback_used ? 1 : 0);
    for (std::size_t i = 0; i < width; ++i) {
      os << ',';
      if (i < r.g_norm.size()) os << r.g_norm[i];
    }
    os << ',';
    for (std::size_t i = 0; i < r.selected.size(); ++i) os << (i ? ";" : "") << r.selected[i];
    os << '\n';
  }
  os.precision(old_precision);
}

#define GMC_INSTANTIATE(T)                                                                                     \
  template struct GateControllerParams<T>;                                                                     \
  template AttentionPool<T> attention_pool(const Tensor<T>&, const Tensor<T>&, const GateControllerParams<T>&, \
                                           MacCounter*);                                                       \
  template GateDecision<T> gate_weights(const Tensor<T>&, const Tensor<T>&, const GateControllerParams<T>&,    \
                                        MacCounter*);                                                          \
  template void normalize_gates(std::span<const T>, std::vector<T>&, bool&);                                   \
  template std::vector<std::int64_t> topk_select(std::span<const T>, std::int64_t);                            \
  template T cv_squared(std::span<const T>);                                                                   \
  template T balance_loss(const Tensor<T>&);                                                                   \
  template Tensor<T> balance_loss_backward(const Tensor<T>&);                                                  \
  template GateForward<T> gate_forward(const Tensor<T>&, const Tensor<T>&, const GateControllerParams<T>&,     \
                                       std::int64_t, MacCounter*);                                             \
  template GateInputGrads<T> gate_backward(const GateCache<T>&, const GateControllerParams<T>&,                \
                                           std::span<const T>, GateControllerParams<T>&);                      \
  template Tensor<T> feature_regions(const Tensor<T>&, std::int64_t);                                          \
  template void add_region_grad(Tensor<T>&, std::int64_t, const Tensor<T>&);

GMC_INSTANTIATE(float)
GMC_INSTANTIATE(double)
#undef GMC_INSTANTIATE

}  // namespace gmc
