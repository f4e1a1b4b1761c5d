#include "gmc/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace gmc {

static_assert(std::endian::native == std::endian::little, "tensor dumps assume a little-endian host");

namespace {

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); }

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) throw Error("truncated tensor header");
  return v;
}

template <typename T>
Tensor<T> read_body(std::istream& is, Shape shape) {
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T))))
    throw Error("truncated tensor data");
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.empty()) throw Error("cannot dump an empty tensor");
  os.write(kTensorMagic, sizeof(kTensorMagic));
  const auto code = static_cast<std::uint8_t>(sizeof(T));
  os.write(reinterpret_cast<const char*>(&code), 1);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_u32(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

AnyTensor read_tensor(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof(magic))) throw Error("truncated tensor header");
  if (std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) throw Error("bad tensor magic");
  std::uint8_t code = 0;
  if (!is.read(reinterpret_cast<char*>(&code), 1)) throw Error("truncated tensor header");
  const std::uint32_t rank = read_u32(is);
  if (rank == 0 || rank > 16) throw Error("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = read_u32(is);
  if (code == 4) return read_body<float>(is, std::move(shape));
  if (code == 8) return read_body<double>(is, std::move(shape));
  throw Error("unknown dtype code " + std::to_string(code));
}

template <typename T>
Tensor<T> read_tensor_as(std::istream& is) {
  return std::visit([](auto&& t) { return t.template cast<T>(); }, read_tensor(is));
}

template <typename T>
void save_tensors(const std::string& path, const std::vector<const Tensor<T>*>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  for (const auto* t : tensors) write_tensor(os, *t);
  if (!os) throw Error("write failed: " + path);
}

template <typename T>
std::vector<Tensor<T>> load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  std::vector<Tensor<T>> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor_as<T>(is));
  return out;
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor_as<float>(std::istream&);
template Tensor<double> read_tensor_as<double>(std::istream&);
template void save_tensors(const std::string&, const std::vector<const Tensor<float>*>&);
template void save_tensors(const std::string&, const std::vector<const Tensor<double>*>&);
template std::vector<Tensor<float>> load_tensors<float>(const std::string&);
template std::vector<Tensor<double>> load_tensors<double>(const std::string&);

}  // namespace gmc
