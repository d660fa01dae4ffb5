#include "diablo/quant.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <nlohmann/json.hpp>

#include "diablo/io.hpp"

namespace diablo {

namespace {

using json = nlohmann::json;

void validate(const QuantizedWeight& qw) {
  if (qw.bits != 2 && qw.bits != 4) throw std::invalid_argument("quantize: bits must be 2 or 4");
  if (qw.group_size == 0) throw std::invalid_argument("quantize: group_size must be >= 1");
  const std::size_t per_byte = 8 / static_cast<std::size_t>(qw.bits);
  const std::size_t elems = qw.in_features * qw.out_features;
  if (qw.packed_codes.size() != (elems + per_byte - 1) / per_byte) {
    throw FormatError("quantized weight: packed code buffer has the wrong length");
  }
  if (qw.scales.shape() != Shape{qw.num_groups()}) throw FormatError("quantized weight: scale count mismatch");
}

// Dequantizes rows [r0, r1) into `buf` (row-major, out_features wide).
template <typename T>
void dequantize_rows(const QuantizedWeight& qw, std::size_t r0, std::size_t r1, std::vector<T>& buf) {
  const std::size_t m2 = qw.out_features;
  buf.resize((r1 - r0) * m2);
  const int zp = qw.zero_point();
  for (std::size_t r = r0; r < r1; ++r) {
    const float* srow = qw.scales.raw() + (r / qw.group_size) * m2;
    T* dst = buf.data() + (r - r0) * m2;
    for (std::size_t c = 0; c < m2; ++c) {
      dst[c] = static_cast<T>(static_cast<T>(static_cast<int>(qw.code(r, c)) - zp) * static_cast<T>(srow[c]));
    }
  }
}

}  // namespace

template <typename T>
QuantizedWeight quantize(const Tensor<T>& w, int bits, std::size_t group_size) {
  if (w.rank() != 2) throw RankError("quantize: weight must be rank 2, got " + shape_to_string(w.shape()));
  QuantizedWeight qw;
  qw.bits = bits;
  qw.group_size = group_size;
  qw.in_features = w.dim(0);
  qw.out_features = w.dim(1);
  if (bits != 2 && bits != 4) throw std::invalid_argument("quantize: bits must be 2 or 4");
  if (group_size == 0) throw std::invalid_argument("quantize: group_size must be >= 1");

  const std::size_t m1 = qw.in_features, m2 = qw.out_features;
  const int qmax = qw.max_level();
  const int zp = qw.zero_point();
  const std::size_t per_byte = 8 / static_cast<std::size_t>(bits);
  qw.scales = Tensor<float>({qw.num_groups()});
  qw.packed_codes.assign((m1 * m2 + per_byte - 1) / per_byte, 0);

  for (std::size_t g = 0; g < qw.groups_per_column(); ++g) {
    const std::size_t r0 = g * group_size, r1 = std::min(m1, r0 + group_size);
    for (std::size_t c = 0; c < m2; ++c) {
      double absmax = 0.0;
      for (std::size_t r = r0; r < r1; ++r) absmax = std::max(absmax, std::abs(static_cast<double>(w(r, c))));
      const float scale = static_cast<float>(absmax / qmax);
      qw.scales[g * m2 + c] = scale;
      for (std::size_t r = r0; r < r1; ++r) {
        int level = 0;
        if (scale > 0.0f) {
          level = static_cast<int>(std::lround(static_cast<double>(w(r, c)) / static_cast<double>(scale)));
          level = std::clamp(level, -qmax, qmax);
        }
        const auto code = static_cast<unsigned>(level + zp);
        const std::size_t e = r * m2 + c;
        qw.packed_codes[e / per_byte] |= static_cast<std::uint8_t>(code << ((e % per_byte) * bits));
      }
    }
  }
  return qw;
}

template <typename T>
Tensor<T> dequantize(const QuantizedWeight& qw) {
  validate(qw);
  std::vector<T> buf;
  dequantize_rows(qw, 0, qw.in_features, buf);
  return Tensor<T>({qw.in_features, qw.out_features}, std::move(buf));
}

template <typename T>
Tensor<T> dequant_matmul(const Tensor<T>& x, const QuantizedWeight& qw) {
  if (x.rank() != 2 || x.dim(1) != qw.in_features) {
    throw DimensionError("dequant_matmul: input " + shape_to_string(x.shape()) + " does not fit weight " +
                         shape_to_string(Shape{qw.in_features, qw.out_features}));
  }
  const std::size_t b = x.dim(0), m1 = qw.in_features, m2 = qw.out_features;
  Tensor<T> out({b, m2});
  std::vector<T> chunk;
  for (std::size_t r0 = 0; r0 < m1; r0 += qw.group_size) {
    const std::size_t r1 = std::min(m1, r0 + qw.group_size);
    dequantize_rows(qw, r0, r1, chunk);
    for (std::size_t i = 0; i < b; ++i) {
      T* orow = out.raw() + i * m2;
      for (std::size_t r = r0; r < r1; ++r) {
        const T xv = x(i, r);
        const T* wrow = chunk.data() + (r - r0) * m2;
        for (std::size_t c = 0; c < m2; ++c) orow[c] += xv * wrow[c];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> dequant_matmul_nt(const Tensor<T>& g, const QuantizedWeight& qw) {
  if (g.rank() != 2 || g.dim(1) != qw.out_features) {
    throw DimensionError("dequant_matmul_nt: cotangent " + shape_to_string(g.shape()) + " does not fit weight " +
                         shape_to_string(Shape{qw.in_features, qw.out_features}));
  }
  const std::size_t b = g.dim(0), m1 = qw.in_features, m2 = qw.out_features;
  Tensor<T> out({b, m1});
  std::vector<T> chunk;
  for (std::size_t r0 = 0; r0 < m1; r0 += qw.group_size) {
    const std::size_t r1 = std::min(m1, r0 + qw.group_size);
    dequantize_rows(qw, r0, r1, chunk);
    for (std::size_t i = 0; i < b; ++i) {
      const T* grow = g.raw() + i * m2;
      for (std::size_t r = r0; r < r1; ++r) {
        const T* wrow = chunk.data() + (r - r0) * m2;
        T acc(0);
        for (std::size_t c = 0; c < m2; ++c) acc += grow[c] * wrow[c];
        out(i, r) = acc;
      }
    }
  }
  return out;
}

void save_quantized(const std::string& dir, const QuantizedWeight& qw) {
  validate(qw);
  std::filesystem::create_directories(dir);
  io::write_file_atomic(dir + "/codes.bin", qw.packed_codes);
  save_tensor(dir + "/scales.dbt", qw.scales);
  json manifest = {{"format", "diablo-quantized/1"},
                   {"bits", qw.bits},
                   {"group_size", qw.group_size},
                   {"in_features", qw.in_features},
                   {"out_features", qw.out_features},
                   {"codes", "codes.bin"},
                   {"scales", "scales.dbt"}};
  io::write_file_atomic(dir + "/manifest.json", manifest.dump(2) + "\n");
}

QuantizedWeight load_quantized(const std::string& dir) {
  json manifest;
  try {
    manifest = json::parse(io::read_file_text(dir + "/manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("quantized manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "diablo-quantized/1") throw FormatError("quantized manifest: unknown format");
  QuantizedWeight qw;
  qw.bits = manifest.at("bits");
  qw.group_size = manifest.at("group_size");
  qw.in_features = manifest.at("in_features");
  qw.out_features = manifest.at("out_features");
  qw.packed_codes = io::read_file_bytes(dir + "/" + manifest.at("codes").get<std::string>());
  qw.scales = load_tensor<float>(dir + "/" + manifest.at("scales").get<std::string>());
  validate(qw);
  return qw;
}

template QuantizedWeight quantize(const Tensor<float>&, int, std::size_t);
template QuantizedWeight quantize(const Tensor<double>&, int, std::size_t);
template Tensor<float> dequantize<float>(const QuantizedWeight&);
template Tensor<double> dequantize<double>(const QuantizedWeight&);
template Tensor<float> dequant_matmul(const Tensor<float>&, const QuantizedWeight&);
template Tensor<double> dequant_matmul(const Tensor<double>&, const QuantizedWeight&);
template Tensor<float> dequant_matmul_nt(const Tensor<float>&, const QuantizedWeight&);
template Tensor<double> dequant_matmul_nt(const Tensor<double>&, const QuantizedWeight&);

}  // namespace diablo
