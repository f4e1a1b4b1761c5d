#include "gmc/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "gmc/detail/bn_kernels.hpp"

namespace gmc {

std::int64_t conv_output_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride, std::int64_t padding) {
  if (stride < 1) throw Error("stride must be positive");
  if (padding < 0) throw Error("padding must be non-negative");
  const std::int64_t span = in + 2 * padding - kernel;
  if (span < 0) throw Error("kernel larger than padded input");
  return span / stride + 1;
}

namespace {

struct ConvGeometry {
  std::int64_t n, cin, h, w, cout, p, ho, wo, groups, cin_g, cout_g;
  std::int64_t rows() const { return cin_g * p * p; }
  std::int64_t pixels() const { return ho * wo; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Conv2dParams<T>& prm) {
  if (x.rank() != 4) throw Error("conv2d expects N x C x H x W input, got " + shape_str(x.shape()));
  if (prm.weight.rank() != 4 || prm.weight.dim(2) != prm.weight.dim(3))
    throw Error("conv2d weight must be C_out x C_in/groups x p x p, got " + shape_str(prm.weight.shape()));
  ConvGeometry g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = prm.weight.dim(0);
  g.p = prm.weight.dim(2);
  g.groups = prm.groups;
  if (g.groups < 1) throw Error("groups must be positive");
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0)
    throw Error("channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) + " not divisible by groups " +
                std::to_string(g.groups));
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (prm.weight.dim(1) != g.cin_g)
    throw Error("conv2d weight " + shape_str(prm.weight.shape()) + " does not match input " + shape_str(x.shape()) +
                " with groups=" + std::to_string(g.groups));
  if (!prm.bias.empty() && prm.bias.numel() != g.cout) throw Error("conv2d bias length mismatch");
  g.ho = conv_output_extent(g.h, g.p, prm.stride, prm.padding);
  g.wo = conv_output_extent(g.w, g.p, prm.stride, prm.padding);
  return g;
}

bool is_pointwise(const ConvGeometry& g, std::int64_t stride, std::int64_t padding) {
  return g.p == 1 && stride == 1 && padding == 0;
}

// Lowers channels [first, first + cin_g) of one sample into a rows x pixels matrix.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, std::int64_t stride, std::int64_t padding, T* col) {
  const std::int64_t pixels = g.pixels();
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    const T* plane = img + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.p; ++ky)
      for (std::int64_t kx = 0; kx < g.p; ++kx) {
        T* row = col + ((c * g.p + ky) * g.p + kx) * pixels;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * stride - padding + ky;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, T{0});
            continue;
          }
          const T* src = plane + iy * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * stride - padding + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T{0};
          }
        }
      }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::int64_t stride, std::int64_t padding, T* img) {
  const std::int64_t pixels = g.pixels();
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    T* plane = img + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.p; ++ky)
      for (std::int64_t kx = 0; kx < g.p; ++kx) {
        const T* row = col + ((c * g.p + ky) * g.p + kx) * pixels;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = plane + iy * g.w;
          const T* src = row + oy * g.wo;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * stride - padding + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
  }
}

template <typename T>
std::vector<std::uint8_t> full_mask_if_empty(StatMask mask, std::int64_t n, std::int64_t c) {
  if (!mask.empty()) {
    if (static_cast<std::int64_t>(mask.size()) != n * c) throw Error("batch-norm statistics mask has wrong size");
    return {mask.begin(), mask.end()};
  }
  return std::vector<std::uint8_t>(static_cast<std::size_t>(n * c), 1);
}

template <typename T>
void check_bn(const Tensor<T>& x, const BatchNorm2dParams<T>& p) {
  if (x.rank() != 4) throw Error("batchnorm2d expects N x C x H x W input, got " + shape_str(x.shape()));
  if (p.gamma.numel() != x.dim(1) || p.beta.numel() != x.dim(1) || p.running_mean.numel() != x.dim(1) ||
      p.running_var.numel() != x.dim(1))
    throw Error("batchnorm2d parameters do not match " + std::to_string(x.dim(1)) + " channels");
  if (!(p.eps > 0)) throw Error("batchnorm2d eps must be positive");
}

struct ChannelNorm {
  double mean;
  double istd;
  double var;
  std::int64_t count;  // elements that produced the statistics; 0 in inference mode
};

// Statistics used to normalize each channel, honoring the inclusion mask.
template <typename T>
std::vector<ChannelNorm> channel_norms(const Tensor<T>& x, const BatchNorm2dParams<T>& p,
                                       const std::vector<std::uint8_t>& mask) {
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<ChannelNorm> out(static_cast<std::size_t>(c));
  std::vector<const T*> planes;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    if (p.mode == BnMode::inference) {
      out[ch] = {static_cast<double>(p.running_mean[ch]),
                 detail::inv_std(static_cast<double>(p.running_var[ch]), p.eps), 0.0, 0};
      continue;
    }
    planes.clear();
    for (std::int64_t i = 0; i < n; ++i)
      if (mask[i * c + ch]) planes.push_back(x.ptr() + (i * c + ch) * hw);
    const auto st = detail::plane_stats<T>(planes, hw);
    if (st.count == 0)
      out[ch] = {0.0, 0.0, 0.0, 0};
    else
      out[ch] = {st.mean, detail::inv_std(st.var, p.eps), st.var, st.count};
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Conv2dParams<T>& prm, MacCounter* counter) {
  const ConvGeometry g = conv_geometry(x, prm);
  Tensor<T> out({g.n, g.cout, g.ho, g.wo});
  const std::int64_t rows = g.rows(), pixels = g.pixels();
  const bool pointwise = is_pointwise(g, prm.stride, prm.padding);
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(rows * pixels));
  const T* wt = prm.weight.ptr();

  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
      const T* img = x.ptr() + (n * g.cin + grp * g.cin_g) * g.h * g.w;
      const T* lowered = img;
      if (!pointwise) {
        im2col(img, g, prm.stride, prm.padding, col.data());
        lowered = col.data();
      }
      for (std::int64_t oc = 0; oc < g.cout_g; ++oc) {
        const std::int64_t o = grp * g.cout_g + oc;
        T* orow = out.ptr() + (n * g.cout + o) * pixels;
        const T* wrow = wt + o * rows;
        for (std::int64_t r = 0; r < rows; ++r) {
          const T wv = wrow[r];
          const T* crow = lowered + r * pixels;
          for (std::int64_t j = 0; j < pixels; ++j) orow[j] += wv * crow[j];
        }
        if (!prm.bias.empty()) {
          const T b = prm.bias[o];
          for (std::int64_t j = 0; j < pixels; ++j) orow[j] += b;
        }
      }
    }

  if (counter) {
    counter->conv_macs +=
        static_cast<std::uint64_t>(g.n * (g.cin * g.cout * g.p * g.p * g.ho * g.wo / g.groups));
    if (!prm.bias.empty()) count_aux(counter, g.n * g.cout * pixels);
  }
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Conv2dParams<T>& prm, const Tensor<T>& grad_out,
                               bool need_grad_x) {
  const ConvGeometry g = conv_geometry(x, prm);
  if (grad_out.shape() != Shape{g.n, g.cout, g.ho, g.wo})
    throw Error("conv2d_backward: grad_out " + shape_str(grad_out.shape()) + " does not match output " +
                shape_str({g.n, g.cout, g.ho, g.wo}));
  Conv2dGrads<T> res;
  res.grad_weight = Tensor<T>(prm.weight.shape());
  if (need_grad_x) res.grad_x = Tensor<T>(x.shape());
  const std::int64_t rows = g.rows(), pixels = g.pixels();
  const bool pointwise = is_pointwise(g, prm.stride, prm.padding);
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(rows * pixels));
  std::vector<T> gcol(static_cast<std::size_t>(rows * pixels));
  const T* wt = prm.weight.ptr();
  T* gw = res.grad_weight.ptr();

  if (!prm.bias.empty()) {
    res.grad_bias = Tensor<T>({g.cout});
    for (std::int64_t n = 0; n < g.n; ++n)
      for (std::int64_t o = 0; o < g.cout; ++o) {
        const T* grow = grad_out.ptr() + (n * g.cout + o) * pixels;
        T acc{0};
        for (std::int64_t j = 0; j < pixels; ++j) acc += grow[j];
        res.grad_bias[o] += acc;
      }
  }

  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
      const T* img = x.ptr() + (n * g.cin + grp * g.cin_g) * g.h * g.w;
      const T* lowered = img;
      if (!pointwise) {
        im2col(img, g, prm.stride, prm.padding, col.data());
        lowered = col.data();
      }
      if (need_grad_x) std::fill(gcol.begin(), gcol.end(), T{0});
      for (std::int64_t oc = 0; oc < g.cout_g; ++oc) {
        const std::int64_t o = grp * g.cout_g + oc;
        const T* grow = grad_out.ptr() + (n * g.cout + o) * pixels;
        const T* wrow = wt + o * rows;
        T* gwrow = gw + o * rows;
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* crow = lowered + r * pixels;
          T acc{0};
          for (std::int64_t j = 0; j < pixels; ++j) acc += grow[j] * crow[j];
          gwrow[r] += acc;
        }
        if (need_grad_x)
          for (std::int64_t r = 0; r < rows; ++r) {
            const T wv = wrow[r];
            T* dst = gcol.data() + r * pixels;
            for (std::int64_t j = 0; j < pixels; ++j) dst[j] += wv * grow[j];
          }
      }
      if (need_grad_x) {
        T* gimg = res.grad_x.ptr() + (n * g.cin + grp * g.cin_g) * g.h * g.w;
        if (pointwise) {
          for (std::int64_t i = 0; i < rows * pixels; ++i) gimg[i] += gcol[i];
        } else {
          col2im_add(gcol.data(), g, prm.stride, prm.padding, gimg);
        }
      }
    }
  return res;
}

template <typename T>
Tensor<T> batchnorm2d_forward(const Tensor<T>& x, BatchNorm2dParams<T>& p, MacCounter* counter, StatMask mask) {
  check_bn(x, p);
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto m = full_mask_if_empty<T>(mask, n, c);
  if (p.mode == BnMode::training) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      std::int64_t included = 0;
      for (std::int64_t i = 0; i < n; ++i) included += m[i * c + ch];
      if (included > 0 && included * hw < 2) throw Error("batch too small for batch statistics");
    }
  }
  const auto norms = channel_norms(x, p, m);
  Tensor<T> y(x.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t off = (i * c + ch) * hw;
      detail::normalize_plane(x.ptr() + off, y.ptr() + off, hw, norms[ch].mean, norms[ch].istd, p.gamma[ch],
                              p.beta[ch]);
    }
  if (p.mode == BnMode::training) {
    const T mom = static_cast<T>(p.momentum);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      if (norms[ch].count == 0) continue;
      p.running_mean[ch] = (T{1} - mom) * p.running_mean[ch] + mom * static_cast<T>(norms[ch].mean);
      p.running_var[ch] = (T{1} - mom) * p.running_var[ch] + mom * static_cast<T>(norms[ch].var);
    }
  }
  count_aux(counter, kBatchNormOpsPerElement * x.numel());
  return y;
}

template <typename T>
BatchNorm2dGrads<T> batchnorm2d_backward(const Tensor<T>& x, const BatchNorm2dParams<T>& p, const Tensor<T>& grad_out,
                                         StatMask mask) {
  check_bn(x, p);
  if (grad_out.shape() != x.shape())
    throw Error("batchnorm2d_backward: grad_out " + shape_str(grad_out.shape()) + " vs input " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto m = full_mask_if_empty<T>(mask, n, c);
  const auto norms = channel_norms(x, p, m);
  BatchNorm2dGrads<T> res{Tensor<T>(x.shape()), Tensor<T>({c}), Tensor<T>({c})};
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const auto& nm = norms[ch];
    detail::ChannelGradSums sums;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t off = (i * c + ch) * hw;
      detail::accumulate_grad_sums(x.ptr() + off, grad_out.ptr() + off, hw, nm.mean, nm.istd, sums);
    }
    res.grad_beta[ch] = static_cast<T>(sums.sum_g);
    res.grad_gamma[ch] = static_cast<T>(sums.sum_g_xhat);
    const double gamma = static_cast<double>(p.gamma[ch]);
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t off = (i * c + ch) * hw;
      if (nm.count > 0 && m[i * c + ch])
        detail::included_grad_plane(x.ptr() + off, grad_out.ptr() + off, res.grad_x.ptr() + off, hw, nm.mean,
                                    nm.istd, gamma, sums, nm.count);
      else
        detail::excluded_grad_plane(grad_out.ptr() + off, res.grad_x.ptr() + off, hw, nm.istd, gamma);
    }
  }
  return res;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x, MacCounter* counter) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = v > T{0} ? v : T{0};
  count_aux(counter, x.numel());
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  if (x.shape() != grad_out.shape()) throw Error("relu_backward: shape mismatch");
  Tensor<T> g = grad_out;
  for (std::int64_t i = 0; i < g.numel(); ++i)
    if (!(x[i] > T{0})) g[i] = T{0};
  return g;
}

template <typename T>
Tensor<T> tanh_forward(const Tensor<T>& x, MacCounter* counter) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = std::tanh(v);
  count_aux(counter, x.numel());
  return y;
}

template <typename T>
Tensor<T> tanh_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  if (y.shape() != grad_out.shape()) throw Error("tanh_backward: shape mismatch");
  Tensor<T> g = grad_out;
  for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= T{1} - y[i] * y[i];
  return g;
}

namespace {

struct AxisSplit {
  std::int64_t outer, len, inner;
};

template <typename T>
AxisSplit split_axis(const Tensor<T>& x, std::int64_t axis) {
  if (axis < 0 || axis >= x.rank()) throw Error("softmax: axis out of range for " + shape_str(x.shape()));
  AxisSplit s{1, x.dim(axis), 1};
  for (std::int64_t a = 0; a < axis; ++a) s.outer *= x.dim(a);
  for (std::int64_t a = axis + 1; a < x.rank(); ++a) s.inner *= x.dim(a);
  return s;
}

}  // namespace

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x, std::int64_t axis, MacCounter* counter) {
  if (x.empty()) throw Error("softmax on empty axis");
  const AxisSplit s = split_axis(x, axis);
  Tensor<T> y(x.shape());
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.len * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < s.len; ++j) mx = std::max(mx, x[base + j * s.inner]);
      T sum{0};
      for (std::int64_t j = 0; j < s.len; ++j) {
        const T e = std::exp(x[base + j * s.inner] - mx);
        y[base + j * s.inner] = e;
        sum += e;
      }
      for (std::int64_t j = 0; j < s.len; ++j) y[base + j * s.inner] /= sum;
    }
  count_aux(counter, x.numel());
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& grad_out, std::int64_t axis) {
  if (y.shape() != grad_out.shape()) throw Error("softmax_backward: shape mismatch");
  const AxisSplit s = split_axis(y, axis);
  Tensor<T> g(y.shape());
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.len * s.inner + i;
      T dot{0};
      for (std::int64_t j = 0; j < s.len; ++j) dot += y[base + j * s.inner] * grad_out[base + j * s.inner];
      for (std::int64_t j = 0; j < s.len; ++j) {
        const std::int64_t k = base + j * s.inner;
        g[k] = y[k] * (grad_out[k] - dot);
      }
    }
  return g;
}

namespace {

template <typename T>
void check_pool(const Tensor<T>& x, const Pool2dSpec& spec) {
  if (x.rank() != 4) throw Error("maxpool2d expects N x C x H x W input, got " + shape_str(x.shape()));
  if (spec.kernel < 1) throw Error("maxpool2d kernel must be positive");
  if (spec.padding * 2 > spec.kernel) throw Error("maxpool2d padding must be at most half the kernel");
}

// Flat input offset of the winning cell for output (oy, ox) of one plane.
template <typename T>
std::int64_t pool_argmax(const T* plane, std::int64_t h, std::int64_t w, const Pool2dSpec& spec, std::int64_t oy,
                         std::int64_t ox) {
  std::int64_t best = -1;
  T best_v{};
  for (std::int64_t ky = 0; ky < spec.kernel; ++ky) {
    const std::int64_t iy = oy * spec.stride - spec.padding + ky;
    if (iy < 0 || iy >= h) continue;
    for (std::int64_t kx = 0; kx < spec.kernel; ++kx) {
      const std::int64_t ix = ox * spec.stride - spec.padding + kx;
      if (ix < 0 || ix >= w) continue;
      const T v = plane[iy * w + ix];
      if (best < 0 || v > best_v) {
        best = iy * w + ix;
        best_v = v;
      }
    }
  }
  return best;
}

}  // namespace

template <typename T>
Tensor<T> maxpool2d_forward(const Tensor<T>& x, const Pool2dSpec& spec, MacCounter* counter) {
  check_pool(x, spec);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = conv_output_extent(h, spec.kernel, spec.stride, spec.padding);
  const std::int64_t wo = conv_output_extent(w, spec.kernel, spec.stride, spec.padding);
  Tensor<T> y({n, c, ho, wo});
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T* plane = x.ptr() + i * h * w;
    T* out = y.ptr() + i * ho * wo;
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) out[oy * wo + ox] = plane[pool_argmax(plane, h, w, spec, oy, ox)];
  }
  count_aux(counter, y.numel() * spec.kernel * spec.kernel);
  return y;
}

template <typename T>
Tensor<T> maxpool2d_backward(const Tensor<T>& x, const Pool2dSpec& spec, const Tensor<T>& grad_out) {
  check_pool(x, spec);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = conv_output_extent(h, spec.kernel, spec.stride, spec.padding);
  const std::int64_t wo = conv_output_extent(w, spec.kernel, spec.stride, spec.padding);
  if (grad_out.shape() != Shape{n, c, ho, wo}) throw Error("maxpool2d_backward: grad_out shape mismatch");
  Tensor<T> g(x.shape());
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T* plane = x.ptr() + i * h * w;
    const T* go = grad_out.ptr() + i * ho * wo;
    T* gi = g.ptr() + i * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) gi[pool_argmax(plane, h, w, spec, oy, ox)] += go[oy * wo + ox];
  }
  return g;
}

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x, MacCounter* counter) {
  if (x.rank() != 4) throw Error("global_avg_pool expects N x C x H x W input, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y({n, c});
  for (std::int64_t i = 0; i < n * c; ++i) {
    T acc{0};
    const T* plane = x.ptr() + i * hw;
    for (std::int64_t j = 0; j < hw; ++j) acc += plane[j];
    y[i] = acc / static_cast<T>(hw);
  }
  count_aux(counter, x.numel());
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& x_shape, const Tensor<T>& grad_out) {
  if (x_shape.size() != 4 || grad_out.shape() != Shape{x_shape[0], x_shape[1]})
    throw Error("global_avg_pool_backward: shape mismatch");
  const std::int64_t hw = x_shape[2] * x_shape[3];
  Tensor<T> g(x_shape);
  for (std::int64_t i = 0; i < grad_out.numel(); ++i) {
    const T v = grad_out[i] / static_cast<T>(hw);
    std::fill_n(g.ptr() + i * hw, hw, v);
  }
  return g;
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const LinearParams<T>& p, MacCounter* counter) {
  if (x.rank() != 2 || p.weight.rank() != 2 || x.dim(1) != p.weight.dim(1))
    throw Error("linear: extent mismatch " + shape_str(x.shape()) + " x " + shape_str(p.weight.shape()) + "^T");
  const std::int64_t n = x.dim(0), in = x.dim(1), out = p.weight.dim(0);
  if (!p.bias.empty() && p.bias.numel() != out) throw Error("linear bias length mismatch");
  Tensor<T> y({n, out});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < out; ++o) {
      const T* xr = x.ptr() + i * in;
      const T* wr = p.weight.ptr() + o * in;
      T acc{0};
      for (std::int64_t j = 0; j < in; ++j) acc += xr[j] * wr[j];
      y.at(i, o) = p.bias.empty() ? acc : acc + p.bias[o];
    }
  if (counter) {
    counter->linear_macs += static_cast<std::uint64_t>(n * in * out);
    if (!p.bias.empty()) count_aux(counter, n * out);
  }
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const LinearParams<T>& p, const Tensor<T>& grad_out) {
  const std::int64_t n = x.dim(0), in = x.dim(1), out = p.weight.dim(0);
  if (grad_out.shape() != Shape{n, out}) throw Error("linear_backward: grad_out shape mismatch");
  LinearGrads<T> res{Tensor<T>({n, in}), Tensor<T>({out, in}), {}};
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < out; ++o) {
      const T g = grad_out.at(i, o);
      const T* xr = x.ptr() + i * in;
      const T* wr = p.weight.ptr() + o * in;
      T* gx = res.grad_x.ptr() + i * in;
      T* gw = res.grad_weight.ptr() + o * in;
      for (std::int64_t j = 0; j < in; ++j) {
        gx[j] += g * wr[j];
        gw[j] += g * xr[j];
      }
    }
  if (!p.bias.empty()) res.grad_bias = reduce_sum(grad_out, {0});
  return res;
}

template <typename T>
CrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels) {
  if (logits.rank() != 2 || static_cast<std::int64_t>(labels.size()) != logits.dim(0))
    throw Error("cross entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                " labels");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  CrossEntropy<T> res{T{0}, softmax_forward(logits, 1), 0};
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw Error("label out of range");
    std::int64_t arg = 0;
    for (std::int64_t j = 1; j < k; ++j)
      if (logits.at(i, j) > logits.at(i, arg)) arg = j;
    res.correct += arg == y;
    loss -= std::log(std::max(static_cast<double>(res.grad_logits.at(i, y)), 1e-300));
    res.grad_logits.at(i, y) -= T{1};
  }
  for (auto& v : res.grad_logits.data()) v /= static_cast<T>(n);
  res.loss = static_cast<T>(loss / static_cast<double>(n));
  return res;
}

double finite_diff_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

double finite_diff_check(const std::function<double(const TensorD&)>& f, const TensorD& point, const TensorD& analytic,
                         double h) {
  if (!(h > 0)) throw Error("finite difference step must be positive");
  if (analytic.shape() != point.shape()) throw Error("analytic gradient shape does not match the point");
  TensorD probe = point;
  double worst = 0.0;
  for (std::int64_t i = 0; i < point.numel(); ++i) {
    const double x0 = probe[i];
    probe[i] = x0 + h;
    const double fp = f(probe);
    probe[i] = x0 - h;
    const double fm = f(probe);
    probe[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("finite difference: non-finite function value");
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, finite_diff_relative_error(analytic[i], numeric));
  }
  return worst;
}

#define GMC_INSTANTIATE(T)                                                                                   \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Conv2dParams<T>&, MacCounter*);                  \
  template Conv2dGrads<T> conv2d_backward(const Tensor<T>&, const Conv2dParams<T>&, const Tensor<T>&, bool); \
  template Tensor<T> batchnorm2d_forward(const Tensor<T>&, BatchNorm2dParams<T>&, MacCounter*, StatMask);    \
  template BatchNorm2dGrads<T> batchnorm2d_backward(const Tensor<T>&, const BatchNorm2dParams<T>&,           \
                                                    const Tensor<T>&, StatMask);                             \
  template Tensor<T> relu_forward(const Tensor<T>&, MacCounter*);                                            \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> tanh_forward(const Tensor<T>&, MacCounter*);                                            \
  template Tensor<T> tanh_backward(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> softmax_forward(const Tensor<T>&, std::int64_t, MacCounter*);                           \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&, std::int64_t);                     \
  template Tensor<T> maxpool2d_forward(const Tensor<T>&, const Pool2dSpec&, MacCounter*);                    \
  template Tensor<T> maxpool2d_backward(const Tensor<T>&, const Pool2dSpec&, const Tensor<T>&);              \
  template Tensor<T> global_avg_pool_forward(const Tensor<T>&, MacCounter*);                                 \
  template Tensor<T> global_avg_pool_backward(const Shape&, const Tensor<T>&);                               \
  template Tensor<T> linear_forward(const Tensor<T>&, const LinearParams<T>&, MacCounter*);                  \
  template LinearGrads<T> linear_backward(const Tensor<T>&, const LinearParams<T>&, const Tensor<T>&);       \
  template CrossEntropy<T> softmax_cross_entropy(const Tensor<T>&, std::span<const std::int64_t>);

GMC_INSTANTIATE(float)
GMC_INSTANTIATE(double)
#undef GMC_INSTANTIATE

}  // namespace gmc
