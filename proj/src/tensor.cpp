#include "gmc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gmc {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) throw Error("tensor shape must have rank >= 1");
  for (auto e : shape)
    if (e < 1) throw Error("tensor extents must be >= 1, got " + shape_str(shape));
}

void check_channel_index(const Shape& shape, std::span<const std::int64_t> idx, std::int64_t channels) {
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= channels) throw Error("channel index out of bounds");
    if (j > 0 && idx[j] <= idx[j - 1]) throw Error("indices must be strictly increasing");
  }
  (void)shape;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
    throw Error("buffer length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

template <typename T>
Tensor<T> Tensor<T>::identity(std::int64_t n) {
  Tensor out({n, n});
  for (std::int64_t i = 0; i < n; ++i) out.at(i, i) = T{1};
  return out;
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t axis) const {
  if (axis < 0 || axis >= rank()) throw Error("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw Error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::sample(std::int64_t n) const {
  const std::int64_t stride = numel() / shape_[0];
  Shape s = shape_;
  s[0] = 1;
  std::vector<T> out(data_.begin() + n * stride, data_.begin() + (n + 1) * stride);
  return Tensor(std::move(s), std::move(out));
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x, std::span<const std::int64_t> idx) {
  if (x.rank() < 2) throw Error("gather_channels expects rank >= 2, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1);
  check_channel_index(x.shape(), idx, c);
  if (idx.empty()) throw Error("gather_channels: empty index list");
  const std::int64_t plane = x.numel() / (n * c);
  Shape s = x.shape();
  s[1] = static_cast<std::int64_t>(idx.size());
  Tensor<T> out(s);
  const T* src = x.ptr();
  T* dst = out.ptr();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < idx.size(); ++j)
      std::copy_n(src + (i * c + idx[j]) * plane, plane, dst + (i * s[1] + static_cast<std::int64_t>(j)) * plane);
  return out;
}

template <typename T>
Tensor<T> scatter_channels(const Tensor<T>& src, std::span<const std::int64_t> idx, const Tensor<T>& base) {
  if (src.rank() < 2 || base.rank() != src.rank())
    throw Error("scatter_channels: rank mismatch " + shape_str(src.shape()) + " vs " + shape_str(base.shape()));
  for (std::int64_t a = 0; a < src.rank(); ++a)
    if (a != 1 && src.dim(a) != base.dim(a))
      throw Error("scatter_channels: shape mismatch " + shape_str(src.shape()) + " vs " + shape_str(base.shape()));
  if (static_cast<std::int64_t>(idx.size()) != src.dim(1))
    throw Error("scatter_channels: index count does not match source channels");
  check_channel_index(base.shape(), idx, base.dim(1));
  Tensor<T> out = base;
  const std::int64_t n = src.dim(0), k = src.dim(1), c = base.dim(1);
  const std::int64_t plane = src.numel() / (n * k);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < k; ++j)
      std::copy_n(src.ptr() + (i * k + j) * plane, plane, out.ptr() + (i * c + idx[j]) * plane);
  return out;
}

template <typename T>
void scatter_add_channels(Tensor<T>& dst, std::span<const std::int64_t> idx, const Tensor<T>& src) {
  if (src.rank() < 2 || dst.rank() != src.rank() || src.dim(0) != dst.dim(0) ||
      static_cast<std::int64_t>(idx.size()) != src.dim(1))
    throw Error("scatter_add_channels: shape mismatch " + shape_str(src.shape()) + " vs " + shape_str(dst.shape()));
  check_channel_index(dst.shape(), idx, dst.dim(1));
  const std::int64_t n = src.dim(0), k = src.dim(1), c = dst.dim(1);
  const std::int64_t plane = src.numel() / (n * k);
  if (plane != dst.numel() / (n * c)) throw Error("scatter_add_channels: plane size mismatch");
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < k; ++j) {
      const T* s = src.ptr() + (i * k + j) * plane;
      T* d = dst.ptr() + (i * c + idx[j]) * plane;
      for (std::int64_t p = 0; p < plane; ++p) d[p] += s[p];
    }
}

template <typename T>
Tensor<T> stack_samples(std::span<const Tensor<T>> samples) {
  if (samples.empty()) throw Error("stack_samples: nothing to stack");
  Shape s = samples[0].shape();
  const std::int64_t per = samples[0].numel();
  for (const auto& t : samples)
    if (t.shape() != s) throw Error("stack_samples: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(s));
  s[0] = static_cast<std::int64_t>(samples.size());
  Tensor<T> out(s);
  for (std::size_t i = 0; i < samples.size(); ++i)
    std::copy_n(samples[i].ptr(), per, out.ptr() + static_cast<std::int64_t>(i) * per);
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw Error("matmul: extent mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  // Row-axpy form: every out(i,j) accumulates over p = 0..k-1 in order.
  for (std::int64_t i = 0; i < m; ++i) {
    T* row = out.ptr() + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = a.at(i, p);
      const T* brow = b.ptr() + p * n;
      for (std::int64_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out = a;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out = a;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out = a;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out = a;
  for (auto& v : out.data()) v *= factor;
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add_inplace");
  T* d = a.ptr();
  const T* s = b.ptr();
  for (std::int64_t i = 0; i < a.numel(); ++i) d[i] += s[i];
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::span<const std::int64_t> axes) {
  std::vector<bool> reduced(static_cast<std::size_t>(x.rank()), false);
  for (auto a : axes) {
    if (a < 0 || a >= x.rank()) throw Error("reduce: axis out of range for " + shape_str(x.shape()));
    reduced[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape;
  for (std::int64_t a = 0; a < x.rank(); ++a)
    if (!reduced[static_cast<std::size_t>(a)]) out_shape.push_back(x.dim(a));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);

  // Walk the input in row-major order so every output element accumulates its
  // terms in increasing input offset.
  const auto& s = x.shape();
  std::vector<std::int64_t> counter(s.size(), 0);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    std::int64_t o = 0;
    for (std::size_t a = 0; a < s.size(); ++a)
      if (!reduced[a]) o = o * s[a] + counter[a];
    out[o] += x[i];
    for (std::int64_t a = static_cast<std::int64_t>(s.size()) - 1; a >= 0; --a) {
      if (++counter[static_cast<std::size_t>(a)] < s[static_cast<std::size_t>(a)]) break;
      counter[static_cast<std::size_t>(a)] = 0;
    }
  }
  return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::span<const std::int64_t> axes) {
  Tensor<T> out = reduce_sum(x, axes);
  const T denom = static_cast<T>(x.numel() / out.numel());
  for (auto& v : out.data()) v /= denom;
  return out;
}

template <typename T>
T sum_all(const Tensor<T>& x) {
  T acc{0};
  for (auto v : x.data()) acc += v;
  return acc;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "max_abs_diff");
  T worst{0};
  for (std::int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, static_cast<T>(std::abs(a[i] - b[i])));
  return worst;
}

#define GMC_INSTANTIATE(T)                                                                              \
  template class Tensor<T>;                                                                             \
  template Tensor<T> gather_channels(const Tensor<T>&, std::span<const std::int64_t>);                  \
  template Tensor<T> scatter_channels(const Tensor<T>&, std::span<const std::int64_t>, const Tensor<T>&); \
  template void scatter_add_channels(Tensor<T>&, std::span<const std::int64_t>, const Tensor<T>&);      \
  template Tensor<T> stack_samples(std::span<const Tensor<T>>);                                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> scale(const Tensor<T>&, T);                                                        \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> reduce_sum(const Tensor<T>&, std::span<const std::int64_t>);                       \
  template Tensor<T> reduce_mean(const Tensor<T>&, std::span<const std::int64_t>);                      \
  template T sum_all(const Tensor<T>&);                                                                 \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);

GMC_INSTANTIATE(float)
GMC_INSTANTIATE(double)
#undef GMC_INSTANTIATE

}  // namespace gmc
