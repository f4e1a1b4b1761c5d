#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gmc/netconfig.hpp"

namespace gmc {

/// C_in*C_out*p*p*H_o*W_o/groups, exact. Throws when groups does not divide
/// the product.
std::int64_t conv_flops(std::int64_t c_in, std::int64_t c_out, std::int64_t p, std::int64_t h_o, std::int64_t w_o,
                        std::int64_t groups);

/// Conv MACs of a bottleneck block running k of its E groups:
/// k*d*C*H1*W1 + 9*d*d*k*H2*W2 + k*d*C_out*H3*W3. The shortcut projection is
/// not part of this figure.
std::int64_t gated_block_flops(std::int64_t c, std::int64_t c_out, std::int64_t e, std::int64_t d, std::int64_t k,
                               std::int64_t h1, std::int64_t w1, std::int64_t h2, std::int64_t w2, std::int64_t h3,
                               std::int64_t w3);

struct LayerFlops {
  std::string layer;
  std::string kind;  // conv, pool, block, gated_block, head
  std::int64_t conv_macs = 0;
  std::int64_t aux_ops = 0;
  std::int64_t linear_macs = 0;
};

struct FlopsReport {
  std::vector<LayerFlops> per_layer;
  std::int64_t total_conv_macs = 0;
  std::int64_t total_linear_macs = 0;
  std::int64_t total_aux = 0;
  std::vector<std::int64_t> k_used;  // one per gated block
  std::int64_t batch = 1;
  std::int64_t height = 0;
  std::int64_t width = 0;
};

struct FlopsOptions {
  std::optional<std::int64_t> k;  // every gated block; otherwise the config's per-stage k
  std::int64_t batch = 1;
  std::optional<std::int64_t> height, width;  // override the config input extent
};

/// Analytical counts for one sparse forward pass. The result matches what a
/// MacCounter records for the same pass, category by category.
FlopsReport network_flops(const NetworkConfig& cfg, const FlopsOptions& options = {});

/// Columns layer,kind,conv_macs,aux_ops,linear_macs followed by a total row.
void write_flops_csv(std::ostream& out, const FlopsReport& report);

}  // namespace gmc
