#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "diablo/ops.hpp"
#include "diablo/rng.hpp"
#include "diablo/tensor.hpp"

namespace diablo {

/// Trainable block-diagonal update D = diag(D₁, …, D_N), stored as an N×d₁×d₂ tensor.
///
/// When N does not divide a feature dimension the blocks are sized with a ceiling and the
/// trailing `pad_in` inputs / `pad_out` outputs are virtual: inputs are zero-extended on the
/// way in and the surplus output columns are dropped on the way out. The frozen base weight is
/// never padded.
template <typename T>
struct BlockDiagonalAdapter {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::size_t num_blocks = 0;
  std::size_t block_rows = 0;  // d₁
  std::size_t block_cols = 0;  // d₂
  std::size_t pad_in = 0;
  std::size_t pad_out = 0;
  Tensor<T> blocks;

  std::size_t parameter_count() const noexcept { return blocks.size(); }
};

/// Low-rank update scaling · A·B with A[m₁×r], B[r×m₂].
template <typename T>
struct LoRAAdapter {
  Tensor<T> a;
  Tensor<T> b;
  std::size_t rank = 0;
  T scaling = T(1);

  std::size_t in_features() const { return a.dim(0); }
  std::size_t out_features() const { return b.dim(1); }
  std::size_t parameter_count() const noexcept { return a.size() + b.size(); }
};

template <typename T>
struct DiabloGrads {
  Tensor<T> blocks;
};

template <typename T>
struct LoRAGrads {
  Tensor<T> a;
  Tensor<T> b;
};

template <typename Grads, typename T>
struct AdapterBackward {
  Grads grads;
  Tensor<T> g_x;  // cotangent of the input through the adapter path only
};

/// d₁ = ⌈m₁/N⌉, d₂ = ⌈m₂/N⌉, all blocks zero.
template <typename T>
BlockDiagonalAdapter<T> init_diablo(std::size_t in_features, std::size_t out_features, std::size_t num_blocks);

/// A Kaiming-uniform, B zero, so A·B = 0.
template <typename T>
LoRAAdapter<T> init_lora(std::size_t in_features, std::size_t out_features, std::size_t rank, Rng& rng,
                         T scaling = T(1));

/// X·D via one batched contraction over the blocks; D is never densified.
template <typename T>
Tensor<T> diablo_delta(const Tensor<T>& x, const BlockDiagonalAdapter<T>& adapter, MatmulOptions opts = {});

/// w_out + X·D, where w_out is the base output X·W.
template <typename T>
Tensor<T> diablo_forward(const Tensor<T>& x, const Tensor<T>& w_out, const BlockDiagonalAdapter<T>& adapter,
                         MatmulOptions opts = {});

/// g_{Dᵢ} = Xᵢᵀ g_{Yᵢ} for every block, plus the input cotangent g_Y Dᵀ.
template <typename T>
AdapterBackward<DiabloGrads<T>, T> diablo_backward(const Tensor<T>& x, const Tensor<T>& g_y,
                                                   const BlockDiagonalAdapter<T>& adapter,
                                                   MatmulOptions opts = {});

template <typename T>
Tensor<T> lora_delta(const Tensor<T>& x, const LoRAAdapter<T>& adapter, MatmulOptions opts = {});

template <typename T>
Tensor<T> lora_forward(const Tensor<T>& x, const Tensor<T>& w_out, const LoRAAdapter<T>& adapter,
                       MatmulOptions opts = {});

template <typename T>
AdapterBackward<LoRAGrads<T>, T> lora_backward(const Tensor<T>& x, const Tensor<T>& g_y,
                                               const LoRAAdapter<T>& adapter, MatmulOptions opts = {});

/// Dense m₁×m₂ form of the update, padding removed. Used for merging, not in the training path.
template <typename T>
Tensor<T> dense_form(const BlockDiagonalAdapter<T>& adapter);

template <typename T>
Tensor<T> dense_form(const LoRAAdapter<T>& adapter);

template <typename T>
Tensor<T> merge_adapter(const Tensor<T>& w, const BlockDiagonalAdapter<T>& adapter);

template <typename T>
Tensor<T> merge_adapter(const Tensor<T>& w, const LoRAAdapter<T>& adapter);

// --- checkpoints -----------------------------------------------------------------------------

template <typename T>
using Adapter = std::variant<std::monostate, BlockDiagonalAdapter<T>, LoRAAdapter<T>>;

template <typename T>
struct NamedAdapter {
  std::string name;
  Adapter<T> adapter;
};

/// Writes `manifest.json` plus one DBT1 file per tensor into `dir`. Entries holding no adapter
/// are skipped.
template <typename T>
void save_adapter_checkpoint(const std::string& dir, const std::vector<NamedAdapter<T>>& adapters);

template <typename T>
std::vector<NamedAdapter<T>> load_adapter_checkpoint(const std::string& dir);

}  // namespace diablo
