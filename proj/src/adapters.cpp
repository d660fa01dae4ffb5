#include "diablo/adapters.hpp"

#include <filesystem>
#include <nlohmann/json.hpp>

#include "diablo/io.hpp"

namespace diablo {

namespace {

using json = nlohmann::json;

constexpr const char* kCheckpointFormat = "diablo-adapters/1";

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

template <typename T>
void require_cols(const Tensor<T>& t, std::size_t cols, const char* op, const char* what) {
  if (t.rank() != 2 || t.dim(1) != cols) {
    throw DimensionError(std::string(op) + ": " + what + " has shape " + shape_to_string(t.shape()) +
                         ", expected " + std::to_string(cols) + " columns");
  }
}

template <typename T>
void require_base_output(const Tensor<T>& x, const Tensor<T>& w_out, std::size_t m2, const char* op) {
  if (w_out.shape() != Shape{x.dim(0), m2}) {
    throw DimensionError(std::string(op) + ": base output has shape " + shape_to_string(w_out.shape()) +
                         ", expected " + shape_to_string(Shape{x.dim(0), m2}));
  }
}

// b×m → b×N×d, zero-extending the trailing columns.
template <typename T>
Tensor<T> to_blocks(const Tensor<T>& t, std::size_t num_blocks, std::size_t block_width) {
  const std::size_t b = t.dim(0), m = t.dim(1), padded = num_blocks * block_width;
  if (m == padded) return t.reshaped({b, num_blocks, block_width});
  Tensor<T> out({b, num_blocks, block_width});
  for (std::size_t i = 0; i < b; ++i) std::copy_n(t.raw() + i * m, m, out.raw() + i * padded);
  return out;
}

// b×N×d → b×m, dropping trailing columns.
template <typename T>
Tensor<T> from_blocks(Tensor<T> t, std::size_t m) {
  const std::size_t b = t.dim(0), padded = t.dim(1) * t.dim(2);
  if (m == padded) return std::move(t).reshaped({b, m});
  Tensor<T> out({b, m});
  for (std::size_t i = 0; i < b; ++i) std::copy_n(t.raw() + i * padded, m, out.raw() + i * m);
  return out;
}

template <typename T>
void check_diablo(const BlockDiagonalAdapter<T>& ad) {
  if (ad.blocks.shape() != Shape{ad.num_blocks, ad.block_rows, ad.block_cols} ||
      ad.num_blocks * ad.block_rows != ad.in_features + ad.pad_in ||
      ad.num_blocks * ad.block_cols != ad.out_features + ad.pad_out) {
    throw DimensionError("inconsistent block-diagonal adapter: blocks " + shape_to_string(ad.blocks.shape()) +
                         " for " + std::to_string(ad.in_features) + "x" + std::to_string(ad.out_features));
  }
}

}  // namespace

template <typename T>
BlockDiagonalAdapter<T> init_diablo(std::size_t in_features, std::size_t out_features, std::size_t num_blocks) {
  if (in_features == 0 || out_features == 0 || num_blocks == 0) {
    throw DimensionError("init_diablo: features and block count must be >= 1");
  }
  BlockDiagonalAdapter<T> ad;
  ad.in_features = in_features;
  ad.out_features = out_features;
  ad.num_blocks = num_blocks;
  ad.block_rows = ceil_div(in_features, num_blocks);
  ad.block_cols = ceil_div(out_features, num_blocks);
  ad.pad_in = num_blocks * ad.block_rows - in_features;
  ad.pad_out = num_blocks * ad.block_cols - out_features;
  ad.blocks = Tensor<T>({num_blocks, ad.block_rows, ad.block_cols});
  return ad;
}

template <typename T>
LoRAAdapter<T> init_lora(std::size_t in_features, std::size_t out_features, std::size_t rank, Rng& rng,
                         T scaling) {
  if (rank == 0) throw DimensionError("init_lora: rank must be >= 1");
  LoRAAdapter<T> ad;
  ad.rank = rank;
  ad.scaling = scaling;
  ad.a = rand_kaiming_uniform<T>(rng, in_features, rank);
  ad.b = Tensor<T>({rank, out_features});
  return ad;
}

template <typename T>
Tensor<T> diablo_delta(const Tensor<T>& x, const BlockDiagonalAdapter<T>& ad, MatmulOptions opts) {
  check_diablo(ad);
  require_cols(x, ad.in_features, "diablo_forward", "input");
  auto xb = to_blocks(x, ad.num_blocks, ad.block_rows);
  return from_blocks(batched_matmul(xb, ad.blocks, opts), ad.out_features);
}

template <typename T>
Tensor<T> diablo_forward(const Tensor<T>& x, const Tensor<T>& w_out, const BlockDiagonalAdapter<T>& ad,
                         MatmulOptions opts) {
  require_cols(x, ad.in_features, "diablo_forward", "input");
  require_base_output(x, w_out, ad.out_features, "diablo_forward");
  auto out = diablo_delta(x, ad, opts);
  // w_out + XD, summed in that order so a zero adapter returns w_out bit-for-bit.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w_out[i] + out[i];
  return out;
}

template <typename T>
AdapterBackward<DiabloGrads<T>, T> diablo_backward(const Tensor<T>& x, const Tensor<T>& g_y,
                                                   const BlockDiagonalAdapter<T>& ad, MatmulOptions opts) {
  check_diablo(ad);
  require_cols(x, ad.in_features, "diablo_backward", "input");
  require_base_output(x, g_y, ad.out_features, "diablo_backward");
  const auto xb = to_blocks(x, ad.num_blocks, ad.block_rows);
  const auto gb = to_blocks(g_y, ad.num_blocks, ad.block_cols);
  // Padded input columns are zero and padded output cotangents are zero, so the padded
  // rows/columns of every block gradient come out exactly zero.
  AdapterBackward<DiabloGrads<T>, T> res;
  res.grads.blocks = batched_matmul_weight_grad(xb, gb, opts);
  res.g_x = from_blocks(batched_matmul_input_grad(gb, ad.blocks, opts), ad.in_features);
  return res;
}

template <typename T>
Tensor<T> lora_delta(const Tensor<T>& x, const LoRAAdapter<T>& ad, MatmulOptions opts) {
  require_cols(x, ad.in_features(), "lora_forward", "input");
  auto out = matmul(matmul(x, ad.a, opts), ad.b, opts);
  if (ad.scaling != T(1)) scale_inplace(out, ad.scaling);
  return out;
}

template <typename T>
Tensor<T> lora_forward(const Tensor<T>& x, const Tensor<T>& w_out, const LoRAAdapter<T>& ad, MatmulOptions opts) {
  require_cols(x, ad.in_features(), "lora_forward", "input");
  require_base_output(x, w_out, ad.out_features(), "lora_forward");
  auto out = lora_delta(x, ad, opts);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w_out[i] + out[i];
  return out;
}

template <typename T>
AdapterBackward<LoRAGrads<T>, T> lora_backward(const Tensor<T>& x, const Tensor<T>& g_y,
                                               const LoRAAdapter<T>& ad, MatmulOptions opts) {
  require_cols(x, ad.in_features(), "lora_backward", "input");
  require_base_output(x, g_y, ad.out_features(), "lora_backward");
  // g_A = s·Xᵀ(g_Y Bᵀ), g_B = s·(XA)ᵀ g_Y; the m₁×m₂ product Xᵀg_Y is never formed.
  auto gy_bt = matmul_nt(g_y, ad.b, opts);
  auto xa = matmul(x, ad.a, opts);
  AdapterBackward<LoRAGrads<T>, T> res;
  res.grads.a = matmul_tn(x, gy_bt, opts);
  res.grads.b = matmul_tn(xa, g_y, opts);
  res.g_x = matmul_nt(gy_bt, ad.a, opts);
  if (ad.scaling != T(1)) {
    scale_inplace(res.grads.a, ad.scaling);
    scale_inplace(res.grads.b, ad.scaling);
    scale_inplace(res.g_x, ad.scaling);
  }
  return res;
}

template <typename T>
Tensor<T> dense_form(const BlockDiagonalAdapter<T>& ad) {
  check_diablo(ad);
  Tensor<T> out({ad.in_features, ad.out_features});
  for (std::size_t n = 0; n < ad.num_blocks; ++n) {
    for (std::size_t r = 0; r < ad.block_rows; ++r) {
      const std::size_t row = n * ad.block_rows + r;
      if (row >= ad.in_features) break;
      for (std::size_t c = 0; c < ad.block_cols; ++c) {
        const std::size_t col = n * ad.block_cols + c;
        if (col >= ad.out_features) break;
        out(row, col) = ad.blocks(n, r, c);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> dense_form(const LoRAAdapter<T>& ad) {
  auto out = matmul(ad.a, ad.b);
  if (ad.scaling != T(1)) scale_inplace(out, ad.scaling);
  return out;
}

template <typename T>
Tensor<T> merge_adapter(const Tensor<T>& w, const BlockDiagonalAdapter<T>& ad) {
  if (w.shape() != Shape{ad.in_features, ad.out_features}) {
    throw DimensionError("merge_adapter: weight " + shape_to_string(w.shape()) + " does not match adapter " +
                         shape_to_string(Shape{ad.in_features, ad.out_features}));
  }
  return add(w, dense_form(ad));
}

template <typename T>
Tensor<T> merge_adapter(const Tensor<T>& w, const LoRAAdapter<T>& ad) {
  if (w.shape() != Shape{ad.in_features(), ad.out_features()}) {
    throw DimensionError("merge_adapter: weight " + shape_to_string(w.shape()) + " does not match adapter " +
                         shape_to_string(Shape{ad.in_features(), ad.out_features()}));
  }
  return add(w, dense_form(ad));
}

template <typename T>
void save_adapter_checkpoint(const std::string& dir, const std::vector<NamedAdapter<T>>& adapters) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["dtype"] = dtype_name(dtype_of<T>());
  manifest["adapters"] = json::array();
  for (const auto& entry : adapters) {
    if (const auto* d = std::get_if<BlockDiagonalAdapter<T>>(&entry.adapter)) {
      const std::string file = entry.name + ".blocks.dbt";
      save_tensor(dir + "/" + file, d->blocks);
      manifest["adapters"].push_back({{"name", entry.name},
                                      {"kind", "diablo"},
                                      {"num_blocks", d->num_blocks},
                                      {"block_rows", d->block_rows},
                                      {"block_cols", d->block_cols},
                                      {"in_features", d->in_features},
                                      {"out_features", d->out_features},
                                      {"pad_in", d->pad_in},
                                      {"pad_out", d->pad_out},
                                      {"tensors", {{"blocks", file}}}});
    } else if (const auto* l = std::get_if<LoRAAdapter<T>>(&entry.adapter)) {
      const std::string fa = entry.name + ".a.dbt";
      const std::string fb = entry.name + ".b.dbt";
      save_tensor(dir + "/" + fa, l->a);
      save_tensor(dir + "/" + fb, l->b);
      manifest["adapters"].push_back({{"name", entry.name},
                                      {"kind", "lora"},
                                      {"rank", l->rank},
                                      {"scaling", static_cast<double>(l->scaling)},
                                      {"in_features", l->in_features()},
                                      {"out_features", l->out_features()},
                                      {"tensors", {{"a", fa}, {"b", fb}}}});
    }
  }
  io::write_file_atomic(dir + "/manifest.json", manifest.dump(2) + "\n");
}

template <typename T>
std::vector<NamedAdapter<T>> load_adapter_checkpoint(const std::string& dir) {
  json manifest;
  try {
    manifest = json::parse(io::read_file_text(dir + "/manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("adapter manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) throw FormatError("adapter manifest: unknown format");
  if (manifest.at("dtype").get<std::string>() != dtype_name(dtype_of<T>())) {
    throw FormatError("adapter manifest: dtype " + manifest.at("dtype").get<std::string>() + " requested as " +
                      dtype_name(dtype_of<T>()));
  }
  std::vector<NamedAdapter<T>> out;
  for (const auto& e : manifest.at("adapters")) {
    NamedAdapter<T> named;
    named.name = e.at("name").get<std::string>();
    const auto kind = e.at("kind").get<std::string>();
    const auto& files = e.at("tensors");
    if (kind == "diablo") {
      auto d = init_diablo<T>(e.at("in_features"), e.at("out_features"), e.at("num_blocks"));
      if (d.block_rows != e.at("block_rows").get<std::size_t>() || d.pad_in != e.at("pad_in").get<std::size_t>() ||
          d.block_cols != e.at("block_cols").get<std::size_t>() || d.pad_out != e.at("pad_out").get<std::size_t>()) {
        throw FormatError("adapter manifest: block geometry of '" + named.name + "' is inconsistent");
      }
      d.blocks = load_tensor<T>(dir + "/" + files.at("blocks").get<std::string>());
      check_diablo(d);
      named.adapter = std::move(d);
    } else if (kind == "lora") {
      LoRAAdapter<T> l;
      l.rank = e.at("rank");
      l.scaling = static_cast<T>(e.at("scaling").get<double>());
      l.a = load_tensor<T>(dir + "/" + files.at("a").get<std::string>());
      l.b = load_tensor<T>(dir + "/" + files.at("b").get<std::string>());
      if (l.a.shape() != Shape{e.at("in_features"), l.rank} || l.b.shape() != Shape{l.rank, e.at("out_features")}) {
        throw FormatError("adapter manifest: factor shapes of '" + named.name + "' are inconsistent");
      }
      named.adapter = std::move(l);
    } else {
      throw FormatError("adapter manifest: unknown adapter kind '" + kind + "'");
    }
    out.push_back(std::move(named));
  }
  return out;
}

#define DIABLO_INSTANTIATE_ADAPTERS(T)                                                                      \
  template BlockDiagonalAdapter<T> init_diablo<T>(std::size_t, std::size_t, std::size_t);                   \
  template LoRAAdapter<T> init_lora<T>(std::size_t, std::size_t, std::size_t, Rng&, T);                     \
  template Tensor<T> diablo_delta(const Tensor<T>&, const BlockDiagonalAdapter<T>&, MatmulOptions);        \
  template Tensor<T> diablo_forward(const Tensor<T>&, const Tensor<T>&, const BlockDiagonalAdapter<T>&,    \
                                    MatmulOptions);                                                         \
  template AdapterBackward<DiabloGrads<T>, T> diablo_backward(const Tensor<T>&, const Tensor<T>&,          \
                                                              const BlockDiagonalAdapter<T>&, MatmulOptions); \
  template Tensor<T> lora_delta(const Tensor<T>&, const LoRAAdapter<T>&, MatmulOptions);                   \
  template Tensor<T> lora_forward(const Tensor<T>&, const Tensor<T>&, const LoRAAdapter<T>&, MatmulOptions); \
  template AdapterBackward<LoRAGrads<T>, T> lora_backward(const Tensor<T>&, const Tensor<T>&,              \
                                                          const LoRAAdapter<T>&, MatmulOptions);            \
  template Tensor<T> dense_form(const BlockDiagonalAdapter<T>&);                                            \
  template Tensor<T> dense_form(const LoRAAdapter<T>&);                                                     \
  template Tensor<T> merge_adapter(const Tensor<T>&, const BlockDiagonalAdapter<T>&);                       \
  template Tensor<T> merge_adapter(const Tensor<T>&, const LoRAAdapter<T>&);                                \
  template void save_adapter_checkpoint(const std::string&, const std::vector<NamedAdapter<T>>&);           \
  template std::vector<NamedAdapter<T>> load_adapter_checkpoint<T>(const std::string&);

DIABLO_INSTANTIATE_ADAPTERS(float)
DIABLO_INSTANTIATE_ADAPTERS(double)

#undef DIABLO_INSTANTIATE_ADAPTERS

}  // namespace diablo
