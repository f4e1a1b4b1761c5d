#pragma once

// Per-channel batch-norm kernels shared by the dense (masked) and the gathered
// (per-sample) execution paths. Both feed planes in ascending sample order so
// that identical inputs give bitwise-identical statistics.

#include <cmath>
#include <cstdint>
#include <span>

namespace gmc::detail {

struct ChannelStats {
  double mean = 0.0;
  double var = 0.0;
  std::int64_t count = 0;
};

template <typename T>
ChannelStats plane_stats(std::span<const T* const> planes, std::int64_t plane_size) {
  ChannelStats st;
  st.count = static_cast<std::int64_t>(planes.size()) * plane_size;
  if (st.count == 0) return st;
  double sum = 0.0;
  for (const T* p : planes)
    for (std::int64_t i = 0; i < plane_size; ++i) sum += static_cast<double>(p[i]);
  st.mean = sum / static_cast<double>(st.count);
  double sq = 0.0;
  for (const T* p : planes)
    for (std::int64_t i = 0; i < plane_size; ++i) {
      const double d = static_cast<double>(p[i]) - st.mean;
      sq += d * d;
    }
  st.var = sq / static_cast<double>(st.count);
  return st;
}

inline double inv_std(double var, double eps) { return 1.0 / std::sqrt(var + eps); }

template <typename T>
void normalize_plane(const T* x, T* y, std::int64_t n, double mean, double istd, T gamma, T beta) {
  const T m = static_cast<T>(mean);
  const T s = static_cast<T>(istd);
  for (std::int64_t i = 0; i < n; ++i) y[i] = gamma * ((x[i] - m) * s) + beta;
}

// Running sums over every plane that received an upstream gradient.
struct ChannelGradSums {
  double sum_g = 0.0;       // sum of grad_out
  double sum_g_xhat = 0.0;  // sum of grad_out * xhat
};

template <typename T>
void accumulate_grad_sums(const T* x, const T* g, std::int64_t n, double mean, double istd, ChannelGradSums& acc) {
  for (std::int64_t i = 0; i < n; ++i) {
    const double xhat = (static_cast<double>(x[i]) - mean) * istd;
    acc.sum_g += static_cast<double>(g[i]);
    acc.sum_g_xhat += static_cast<double>(g[i]) * xhat;
  }
}

// Input gradient for a plane that contributed to the statistics (count > 0).
template <typename T>
void included_grad_plane(const T* x, const T* g, T* gx, std::int64_t n, double mean, double istd, double gamma,
                         const ChannelGradSums& s, std::int64_t count) {
  const double inv_m = 1.0 / static_cast<double>(count);
  for (std::int64_t i = 0; i < n; ++i) {
    const double xhat = (static_cast<double>(x[i]) - mean) * istd;
    gx[i] = static_cast<T>(gamma * istd *
                           (static_cast<double>(g[i]) - s.sum_g * inv_m - xhat * s.sum_g_xhat * inv_m));
  }
}

// Input gradient for a plane normalized with statistics it did not contribute to.
template <typename T>
void excluded_grad_plane(const T* g, T* gx, std::int64_t n, double istd, double gamma) {
  for (std::int64_t i = 0; i < n; ++i) gx[i] = static_cast<T>(gamma * istd * static_cast<double>(g[i]));
}

}  // namespace gmc::detail
