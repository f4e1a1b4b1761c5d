#pragma once

#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "gmc/tensor.hpp"

namespace gmc {

// Flat binary layout (little-endian):
//   8 bytes  magic "GMCTNSR1"
//   u8       dtype code, 4 = f32, 8 = f64
//   u32      rank
//   u32 x rank  extents
//   raw elements
inline constexpr char kTensorMagic[8] = {'G', 'M', 'C', 'T', 'N', 'S', 'R', '1'};

using AnyTensor = std::variant<TensorF, TensorD>;

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

AnyTensor read_tensor(std::istream& is);

/// Reads a tensor and converts it to T when the stored dtype differs.
template <typename T>
Tensor<T> read_tensor_as(std::istream& is);

template <typename T>
void save_tensors(const std::string& path, const std::vector<const Tensor<T>*>& tensors);

template <typename T>
std::vector<Tensor<T>> load_tensors(const std::string& path);

}  // namespace gmc
