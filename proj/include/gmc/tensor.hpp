#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmc {

/// Library-wide error type. Every precondition violation raised by gmc is one of these.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

/// Dense row-major array. Feature maps are N x C x H x W.
///
/// A default-constructed tensor is "empty" (no shape, no data) and is used to
/// mark absent optional parameters such as a missing bias. Every non-empty
/// tensor has all extents >= 1.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor identity(std::int64_t n);

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // 2-D and 4-D element access; offset ((n*C + c)*H + h)*W + w.
  T& at(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  const T& at(std::int64_t i, std::int64_t j) const {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  /// Same data, new shape. Element count must agree.
  Tensor reshape(Shape shape) const;

  /// Copy of sample n as a 1 x C x H x W (or 1 x ...) tensor.
  Tensor sample(std::int64_t n) const;

  void fill(T value);

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Output channel j is input channel idx[j]. idx must be strictly increasing.
template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x, std::span<const std::int64_t> idx);

/// Copy of base with channel idx[j] replaced by src channel j.
template <typename T>
Tensor<T> scatter_channels(const Tensor<T>& src, std::span<const std::int64_t> idx, const Tensor<T>& base);

/// Adds src channel j into channel idx[j] of dst, in place.
template <typename T>
void scatter_add_channels(Tensor<T>& dst, std::span<const std::int64_t> idx, const Tensor<T>& src);

/// Stacks 1 x ... tensors of identical trailing shape along axis 0.
template <typename T>
Tensor<T> stack_samples(std::span<const Tensor<T>> samples);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// a += b, in place. Shapes must agree.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

/// Sum over the listed axes; reduced axes are removed. Reducing every axis
/// yields a shape {1} tensor.
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::span<const std::int64_t> axes);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::span<const std::int64_t> axes);
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::initializer_list<std::int64_t> axes) {
  return reduce_sum(x, std::span<const std::int64_t>(axes.begin(), axes.size()));
}
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::initializer_list<std::int64_t> axes) {
  return reduce_mean(x, std::span<const std::int64_t>(axes.begin(), axes.size()));
}
template <typename T>
T sum_all(const Tensor<T>& x);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace gmc
