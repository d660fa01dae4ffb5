#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "diablo/tensor.hpp"

namespace diablo {

/// Frozen weight in symmetric group-absmax form.
///
/// For every output column j, the input dimension is cut into contiguous groups of
/// `group_size` rows (the last group may be short). Each group g has one scale
/// s = max|w| / (2^(bits−1) − 1) and each element is stored as the unsigned code
/// clamp(round(w/s)) + 2^(bits−1). Codes are packed LSB-first, 8/bits per byte, in row-major
/// element order.
struct QuantizedWeight {
  int bits = 4;
  std::size_t group_size = 64;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::vector<std::uint8_t> packed_codes;
  Tensor<float> scales;  // [groups_per_column * out_features], index (g, j) → g * out_features + j

  std::size_t groups_per_column() const noexcept { return (in_features + group_size - 1) / group_size; }
  std::size_t num_groups() const noexcept { return groups_per_column() * out_features; }
  int zero_point() const noexcept { return 1 << (bits - 1); }
  int max_level() const noexcept { return (1 << (bits - 1)) - 1; }

  std::uint8_t code(std::size_t row, std::size_t col) const noexcept {
    const std::size_t e = row * out_features + col;
    const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
    const unsigned shift = static_cast<unsigned>((e % per_byte) * bits);
    return static_cast<std::uint8_t>((packed_codes[e / per_byte] >> shift) & ((1u << bits) - 1));
  }

  float scale(std::size_t row, std::size_t col) const noexcept {
    return scales[(row / group_size) * out_features + col];
  }
};

template <typename T>
QuantizedWeight quantize(const Tensor<T>& w, int bits, std::size_t group_size = 64);

template <typename T>
Tensor<T> dequantize(const QuantizedWeight& qw);

/// x · dequantize(qw), dequantizing one row group at a time. Each output element is
/// accumulated in ascending input order, so the result matches the dense product bit-for-bit.
template <typename T>
Tensor<T> dequant_matmul(const Tensor<T>& x, const QuantizedWeight& qw);

/// g · dequantize(qw)ᵀ, for the input cotangent through a quantized base.
template <typename T>
Tensor<T> dequant_matmul_nt(const Tensor<T>& g, const QuantizedWeight& qw);

/// `manifest.json`, `codes.bin` (packed codes) and `scales.dbt` inside `dir`.
void save_quantized(const std::string& dir, const QuantizedWeight& qw);
QuantizedWeight load_quantized(const std::string& dir);

}  // namespace diablo
