#include "gmc/flops.hpp"

#include "gmc/gate.hpp"
#include "gmc/moe_block.hpp"

namespace gmc {

std::int64_t conv_flops(std::int64_t c_in, std::int64_t c_out, std::int64_t p, std::int64_t h_o, std::int64_t w_o,
                        std::int64_t groups) {
  if (c_in < 0 || c_out < 0 || p < 0 || h_o < 0 || w_o < 0 || groups < 1)
    throw Error("conv_flops: arguments must be non-negative and groups at least 1");
  const std::int64_t product = c_in * c_out * p * p * h_o * w_o;
  if (product % groups != 0)
    throw Error("conv_flops: " + std::to_string(product) + " is not divisible by " + std::to_string(groups) +
                " groups");
  return product / groups;
}

std::int64_t gated_block_flops(std::int64_t c, std::int64_t c_out, std::int64_t e, std::int64_t d, std::int64_t k,
                               std::int64_t h1, std::int64_t w1, std::int64_t h2, std::int64_t w2, std::int64_t h3,
                               std::int64_t w3) {
  if (k < 1) throw Error("k must be at least 1");
  if (k > e) throw Error("k exceeds cardinality");
  return k * d * c * h1 * w1 + 9 * d * d * k * h2 * w2 + k * d * c_out * h3 * w3;
}

FlopsReport network_flops(const NetworkConfig& base, const FlopsOptions& opt) {
  NetworkConfig cfg = base;
  if (opt.height) cfg.input.height = *opt.height;
  if (opt.width) cfg.input.width = *opt.width;
  if (opt.k) {
    cfg.k = *opt.k;
    for (auto& s : cfg.stages) s.k.reset();
  }
  if (auto v = config_violations(cfg); !v.empty()) throw ConfigError(v);
  if (opt.batch < 1) throw Error("batch must be at least 1");

  const std::int64_t n = opt.batch;
  FlopsReport r;
  r.batch = n;
  r.height = cfg.input.height;
  r.width = cfg.input.width;

  const auto& stem = cfg.stem;
  std::int64_t h = conv_output_extent(cfg.input.height, stem.kernel, stem.stride, stem.kernel / 2);
  std::int64_t w = conv_output_extent(cfg.input.width, stem.kernel, stem.stride, stem.kernel / 2);
  const std::int64_t stem_elems = n * stem.out * h * w;
  r.per_layer.push_back({"stem", "conv", n * conv_flops(cfg.input.channels, stem.out, stem.kernel, h, w, 1),
                         (kBatchNormOpsPerElement + 1) * stem_elems, 0});
  if (stem.maxpool) {
    const Pool2dSpec pool;
    h = conv_output_extent(h, pool.kernel, pool.stride, pool.padding);
    w = conv_output_extent(w, pool.kernel, pool.stride, pool.padding);
    r.per_layer.push_back({"stem.maxpool", "pool", 0, n * stem.out * h * w * pool.kernel * pool.kernel, 0});
  }

  std::int64_t c = stem.out;
  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    const auto& st = cfg.stages[si];
    for (std::int64_t bi = 0; bi < st.blocks; ++bi) {
      const std::int64_t stride = bi == 0 ? st.stride : 1;
      const std::int64_t h2 = conv_output_extent(h, 3, stride, 1), w2 = conv_output_extent(w, 3, stride, 1);
      const std::int64_t active = st.gated ? cfg.stage_k(si) : st.cardinality;
      const bool shortcut = c != st.out || stride != 1;
      LayerFlops lf;
      lf.layer = "stage" + std::to_string(si + 1) + ".block" + std::to_string(bi + 1);
      lf.kind = st.gated ? "gated_block" : "block";
      lf.conv_macs = n * gated_block_flops(c, st.out, st.cardinality, st.width, active, h, w, h2, w2, h2, w2);
      if (shortcut) lf.conv_macs += n * conv_flops(c, st.out, 1, h2, w2, 1);
      lf.aux_ops = gated_block_aux_ops(n, c, st.out, st.cardinality, st.width, active, h, w, h2, w2, cfg.question_dim,
                                       cfg.gate_hidden, shortcut, st.gated);
      r.per_layer.push_back(lf);
      if (st.gated) r.k_used.push_back(active);
      c = st.out;
      h = h2;
      w = w2;
    }
  }

  if (cfg.post_conv) {
    const std::int64_t out = cfg.post_conv->out;
    const std::int64_t elems = n * out * h * w;
    // bias add, or BN followed by relu
    const std::int64_t aux = cfg.post_conv->bn_relu ? (kBatchNormOpsPerElement + 1) * elems : elems;
    r.per_layer.push_back({"post_conv", "conv", n * conv_flops(c, out, 1, h, w, 1), aux, 0});
    c = out;
  }
  // global average pool, then linear with bias
  r.per_layer.push_back({"head", "head", 0, n * c * h * w + n * cfg.classes, n * c * cfg.classes});

  for (const auto& l : r.per_layer) {
    r.total_conv_macs += l.conv_macs;
    r.total_aux += l.aux_ops;
    r.total_linear_macs += l.linear_macs;
  }
  return r;
}

void write_flops_csv(std::ostream& out, const FlopsReport& report) {
  out << "layer,kind,conv_macs,aux_ops,linear_macs\n";
  for (const auto& l : report.per_layer)
    out << l.layer << ',' << l.kind << ',' << l.conv_macs << ',' << l.aux_ops << ',' << l.linear_macs << '\n';
  out << "total,total," << report.total_conv_macs << ',' << report.total_aux << ',' << report.total_linear_macs
      << '\n';
}

}  // namespace gmc
