#include "diablo/tensor.hpp"

#include <bit>
#include <cstring>
#include <numeric>

#include "diablo/io.hpp"

namespace diablo {

namespace {

constexpr char kMagic[4] = {'D', 'B', 'T', '1'};

template <typename T>
using bits_t = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw std::invalid_argument("unknown dtype '" + name + "' (expected f32 or f64)");
}

template <typename T>
std::vector<std::uint8_t> serialize(const Tensor<T>& t) {
  if (t.rank() > 255) throw FormatError("rank exceeds 255");
  std::vector<std::uint8_t> out;
  out.reserve(6 + 8 * t.rank() + sizeof(T) * t.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) io::append_u64_le(out, d);
  for (T v : t.data()) {
    const auto bits = std::bit_cast<bits_t<T>>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

DType peek_dtype(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("missing DBT1 magic");
  }
  if (bytes[4] > 1) throw FormatError("unknown dtype code " + std::to_string(bytes[4]));
  return static_cast<DType>(bytes[4]);
}

template <typename T>
Tensor<T> deserialize(std::span<const std::uint8_t> bytes) {
  if (peek_dtype(bytes) != dtype_of<T>()) {
    throw FormatError("dtype mismatch: stored " + dtype_name(peek_dtype(bytes)) + ", requested " +
                      dtype_name(dtype_of<T>()));
  }
  const std::size_t rank = bytes[5];
  std::size_t offset = 6;
  if (bytes.size() < offset + 8 * rank) throw FormatError("truncated tensor header");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i, offset += 8) shape[i] = io::read_u64_le(bytes, offset);
  for (std::size_t d : shape)
    if (d == 0) throw FormatError("zero dimension in tensor header");
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != offset + n * sizeof(T)) {
    throw FormatError("tensor payload is " + std::to_string(bytes.size() - offset) + " bytes, expected " +
                      std::to_string(n * sizeof(T)));
  }
  std::vector<T> data(n);
  for (std::size_t k = 0; k < n; ++k) {
    bits_t<T> bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<bits_t<T>>(bytes[offset + k * sizeof(T) + i]) << (8 * i);
    }
    data[k] = std::bit_cast<T>(bits);
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  io::write_file_atomic(path, serialize(t));
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  return deserialize<T>(io::read_file_bytes(path));
}

template std::vector<std::uint8_t> serialize(const Tensor<float>&);
template std::vector<std::uint8_t> serialize(const Tensor<double>&);
template Tensor<float> deserialize(std::span<const std::uint8_t>);
template Tensor<double> deserialize(std::span<const std::uint8_t>);
template void save_tensor(const std::string&, const Tensor<float>&);
template void save_tensor(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::string&);
template Tensor<double> load_tensor(const std::string&);

}  // namespace diablo
