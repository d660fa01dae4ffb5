#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "diablo/adapters.hpp"
#include "diablo/quant.hpp"
#include "diablo/rng.hpp"
#include "diablo/tensor.hpp"

namespace diablo {

/// Named projection inside a transformer layer; `generic` covers plain linear/MLP layers.
enum class ModuleTag { Q, K, V, O, G, U, D, generic };

std::string tag_name(ModuleTag tag);
std::optional<ModuleTag> parse_tag(const std::string& name);
std::vector<ModuleTag> all_tags();

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A trainable tensor and its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
};

template <typename T>
using BaseWeight = std::variant<Tensor<T>, QuantizedWeight>;

/// Frozen base weight plus an optional additive adapter.
template <typename T>
class AdaptedLinear {
 public:
  AdaptedLinear(std::string name, ModuleTag tag, BaseWeight<T> base);

  const std::string& name() const noexcept { return name_; }
  ModuleTag tag() const noexcept { return tag_; }
  std::size_t in_features() const noexcept { return in_features_; }
  std::size_t out_features() const noexcept { return out_features_; }

  const BaseWeight<T>& base() const noexcept { return base_; }
  bool is_quantized() const noexcept { return std::holds_alternative<QuantizedWeight>(base_); }

  const Adapter<T>& adapter() const noexcept { return adapter_; }
  Adapter<T>& adapter() noexcept { return adapter_; }
  bool has_adapter() const noexcept { return !std::holds_alternative<std::monostate>(adapter_); }
  void attach(Adapter<T> adapter);
  void detach();

  /// x·W, no adapter.
  Tensor<T> base_forward(const Tensor<T>& x) const;
  /// x·W + adapter path.
  Tensor<T> forward(const Tensor<T>& x) const;
  /// Adds adapter gradients for (x, g_y) into the accumulators and returns g_x through base
  /// and adapter. The base weight receives no gradient.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& g_y);

  void zero_grad();
  void collect_parameters(std::vector<Parameter<T>>& out);
  std::size_t trainable_count() const noexcept;

  /// W + dense adapter update (dequantized first when the base is quantized).
  Tensor<T> merged_weight() const;

 private:
  std::string name_;
  ModuleTag tag_;
  BaseWeight<T> base_;
  std::size_t in_features_ = 0;
  std::size_t out_features_ = 0;
  Adapter<T> adapter_;
  Tensor<T> grad_blocks_;
  Tensor<T> grad_a_;
  Tensor<T> grad_b_;
};

/// A differentiable network made of adapted linear layers. forward() caches what backward()
/// needs; backward() accumulates adapter gradients and returns the input cotangent.
template <typename T>
class Model {
 public:
  virtual ~Model() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& g_y) = 0;
  virtual std::vector<AdaptedLinear<T>*> linears() = 0;

  std::vector<Parameter<T>> parameters();
  void zero_grad();
  std::size_t trainable_parameters();
  std::set<ModuleTag> tags();
};

/// One adapted linear layer.
template <typename T>
class LinearModel final : public Model<T> {
 public:
  explicit LinearModel(BaseWeight<T> base, std::string name = "linear");
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& g_y) override;
  std::vector<AdaptedLinear<T>*> linears() override { return {&layer_}; }
  AdaptedLinear<T>& layer() noexcept { return layer_; }

 private:
  AdaptedLinear<T> layer_;
  Tensor<T> input_;
};

/// Linear layers with tanh between them (none after the last).
template <typename T>
class Mlp final : public Model<T> {
 public:
  explicit Mlp(std::vector<AdaptedLinear<T>> layers);
  static Mlp random(const std::vector<std::size_t>& widths, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& g_y) override;
  std::vector<AdaptedLinear<T>*> linears() override;

 private:
  std::vector<AdaptedLinear<T>> layers_;
  std::vector<Tensor<T>> inputs_;  // input of each layer
  std::vector<Tensor<T>> pre_;     // pre-activation output of each hidden layer
};

/// Single-head pre-norm block:
///   h = x + O(attn(Q(n(x)), K(n(x)), V(n(x))))
///   y = h + D(silu(G(n(h))) ⊙ U(n(h)))
/// where n is parameter-free RMS normalization and attention is softmax(QKᵀ/√h)·V over the
/// sequence axis. Input and output are b×s×h.
template <typename T>
class TinyTransformerBlock final : public Model<T> {
 public:
  struct Weights {
    Tensor<T> q, k, v, o, g, u, d;
  };

  TinyTransformerBlock(Weights w, std::string prefix = "block");
  static TinyTransformerBlock random(std::size_t hidden, std::size_t intermediate, Rng& rng,
                                     std::string prefix = "block");

  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& g_y) override;
  std::vector<AdaptedLinear<T>*> linears() override;

  std::size_t hidden() const noexcept { return q_.in_features(); }
  std::size_t intermediate() const noexcept { return g_.out_features(); }
  AdaptedLinear<T>& module(ModuleTag tag);

  /// Attention mixing output (before O) from the most recent forward, (b·s)×h.
  const Tensor<T>& last_attention_values() const noexcept { return attn_; }
  /// V projection of the normalized input from the most recent forward, (b·s)×h.
  const Tensor<T>& last_value_projection() const noexcept { return v_out_; }

 private:
  AdaptedLinear<T> q_, k_, v_, o_, g_, u_, d_;
  std::size_t batch_ = 0, seq_ = 0;
  Tensor<T> x_, n1_, q_out_, k_out_, v_out_, probs_, attn_, h1_, n2_, gate_, up_, mix_;
};

// --- adapter attachment ----------------------------------------------------------------------

enum class AdapterKind { none, diablo, lora };

std::string adapter_kind_name(AdapterKind kind);
AdapterKind parse_adapter_kind(const std::string& name);

struct AdapterSpec {
  AdapterKind kind = AdapterKind::none;
  std::size_t num_blocks = 0;  // DiaBlo N
  std::size_t rank = 0;        // LoRA r
  double scaling = 1.0;
};

/// Gives every layer whose tag is in `targets` a fresh adapter. Throws ConfigError when a target
/// is not present in the model.
template <typename T>
void attach_adapters(Model<T>& model, const AdapterSpec& spec, const std::set<ModuleTag>& targets, Rng& rng);

template <typename T>
std::vector<NamedAdapter<T>> collect_adapters(Model<T>& model);

// --- architecture configs --------------------------------------------------------------------

struct ModuleShape {
  ModuleTag tag = ModuleTag::generic;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
};

/// Shape-only description of a stack of identical layers, for accounting without weights.
struct ModelConfig {
  std::string name;
  std::size_t layers = 1;
  std::vector<ModuleShape> modules;  // per layer
  std::uint64_t per_layer_extra_params = 0;  // norms etc.
  std::uint64_t extra_params = 0;            // embeddings, head, final norm
  std::optional<std::uint64_t> published_total_params;

  std::uint64_t linear_params_per_layer() const;
  std::uint64_t total_params() const;
  std::set<ModuleTag> tags() const;
  void validate() const;
};

ModelConfig model_config_from_json(const std::string& text);
std::string preset_directory();
std::vector<std::string> preset_names();
ModelConfig load_preset(const std::string& name);

ModelConfig linear_config(std::size_t in_features, std::size_t out_features);
ModelConfig mlp_config(const std::vector<std::size_t>& widths);
ModelConfig transformer_config(std::size_t hidden, std::size_t intermediate, std::size_t layers);

}  // namespace diablo
