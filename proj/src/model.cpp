#include "diablo/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <tuple>
#include <nlohmann/json.hpp>

#include "diablo/io.hpp"
#include "diablo/ops.hpp"

#ifndef DIABLO_DEFAULT_PRESET_DIR
#define DIABLO_DEFAULT_PRESET_DIR "configs/presets"
#endif

namespace diablo {

namespace {

using json = nlohmann::json;

constexpr double kRmsEps = 1e-6;

template <typename T>
std::pair<std::size_t, std::size_t> shape_of(const BaseWeight<T>& base) {
  if (const auto* w = std::get_if<Tensor<T>>(&base)) {
    if (w->rank() != 2) throw RankError("base weight must be rank 2, got " + shape_to_string(w->shape()));
    return {w->dim(0), w->dim(1)};
  }
  const auto& q = std::get<QuantizedWeight>(base);
  return {q.in_features, q.out_features};
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x) {
  const std::size_t rows = x.dim(0), h = x.dim(1);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < h; ++j) ms += static_cast<double>(x(i, j)) * x(i, j);
    const T r = static_cast<T>(1.0 / std::sqrt(ms / static_cast<double>(h) + kRmsEps));
    for (std::size_t j = 0; j < h; ++j) out(i, j) = x(i, j) * r;
  }
  return out;
}

// g_x = r·g − r³·x·(g·x)/h per row.
template <typename T>
Tensor<T> rms_norm_backward(const Tensor<T>& x, const Tensor<T>& g) {
  const std::size_t rows = x.dim(0), h = x.dim(1);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    double ms = 0.0, gx = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      ms += static_cast<double>(x(i, j)) * x(i, j);
      gx += static_cast<double>(g(i, j)) * x(i, j);
    }
    const double r = 1.0 / std::sqrt(ms / static_cast<double>(h) + kRmsEps);
    const double c = r * r * r * gx / static_cast<double>(h);
    for (std::size_t j = 0; j < h; ++j) out(i, j) = static_cast<T>(r * g(i, j) - c * x(i, j));
  }
  return out;
}

template <typename T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

std::string join_tags(const std::set<ModuleTag>& tags) {
  std::string s;
  for (auto t : tags) s += (s.empty() ? "" : ", ") + tag_name(t);
  return s;
}

}  // namespace

std::string tag_name(ModuleTag tag) {
  switch (tag) {
    case ModuleTag::Q: return "Q";
    case ModuleTag::K: return "K";
    case ModuleTag::V: return "V";
    case ModuleTag::O: return "O";
    case ModuleTag::G: return "G";
    case ModuleTag::U: return "U";
    case ModuleTag::D: return "D";
    case ModuleTag::generic: return "generic";
  }
  return "?";
}

std::vector<ModuleTag> all_tags() {
  return {ModuleTag::Q, ModuleTag::K, ModuleTag::V, ModuleTag::O,
          ModuleTag::G, ModuleTag::U, ModuleTag::D, ModuleTag::generic};
}

std::optional<ModuleTag> parse_tag(const std::string& name) {
  for (auto t : all_tags())
    if (tag_name(t) == name) return t;
  return std::nullopt;
}

// --- AdaptedLinear ---------------------------------------------------------------------------

template <typename T>
AdaptedLinear<T>::AdaptedLinear(std::string name, ModuleTag tag, BaseWeight<T> base)
    : name_(std::move(name)), tag_(tag), base_(std::move(base)) {
  std::tie(in_features_, out_features_) = shape_of(base_);
}

template <typename T>
void AdaptedLinear<T>::attach(Adapter<T> adapter) {
  if (const auto* d = std::get_if<BlockDiagonalAdapter<T>>(&adapter)) {
    if (d->in_features != in_features_ || d->out_features != out_features_) {
      throw DimensionError(name_ + ": block-diagonal adapter is " + std::to_string(d->in_features) + "x" +
                           std::to_string(d->out_features) + ", layer is " + std::to_string(in_features_) + "x" +
                           std::to_string(out_features_));
    }
  } else if (const auto* l = std::get_if<LoRAAdapter<T>>(&adapter)) {
    if (l->in_features() != in_features_ || l->out_features() != out_features_) {
      throw DimensionError(name_ + ": LoRA adapter does not match layer shape");
    }
  }
  adapter_ = std::move(adapter);
  zero_grad();
}

template <typename T>
void AdaptedLinear<T>::detach() {
  adapter_ = std::monostate{};
  grad_blocks_ = {};
  grad_a_ = {};
  grad_b_ = {};
}

template <typename T>
Tensor<T> AdaptedLinear<T>::base_forward(const Tensor<T>& x) const {
  if (const auto* w = std::get_if<Tensor<T>>(&base_)) return matmul(x, *w);
  return dequant_matmul(x, std::get<QuantizedWeight>(base_));
}

template <typename T>
Tensor<T> AdaptedLinear<T>::forward(const Tensor<T>& x) const {
  auto y = base_forward(x);
  if (const auto* d = std::get_if<BlockDiagonalAdapter<T>>(&adapter_)) return diablo_forward(x, y, *d);
  if (const auto* l = std::get_if<LoRAAdapter<T>>(&adapter_)) return lora_forward(x, y, *l);
  return y;
}

template <typename T>
Tensor<T> AdaptedLinear<T>::backward(const Tensor<T>& x, const Tensor<T>& g_y) {
  Tensor<T> g_x = std::holds_alternative<Tensor<T>>(base_)
                      ? matmul_nt(g_y, std::get<Tensor<T>>(base_))
                      : dequant_matmul_nt(g_y, std::get<QuantizedWeight>(base_));
  if (const auto* d = std::get_if<BlockDiagonalAdapter<T>>(&adapter_)) {
    auto r = diablo_backward(x, g_y, *d);
    add_inplace(grad_blocks_, r.grads.blocks);
    add_inplace(g_x, r.g_x);
  } else if (const auto* l = std::get_if<LoRAAdapter<T>>(&adapter_)) {
    auto r = lora_backward(x, g_y, *l);
    add_inplace(grad_a_, r.grads.a);
    add_inplace(grad_b_, r.grads.b);
    add_inplace(g_x, r.g_x);
  }
  return g_x;
}

template <typename T>
void AdaptedLinear<T>::zero_grad() {
  if (const auto* d = std::get_if<BlockDiagonalAdapter<T>>(&adapter_)) {
    grad_blocks_ = Tensor<T>(d->blocks.shape());
  } else if (const auto* l = std::get_if<LoRAAdapter<T>>(&adapter_)) {
    grad_a_ = Tensor<T>(l->a.shape());
    grad_b_ = Tensor<T>(l->b.shape());
  }
}

template <typename T>
void AdaptedLinear<T>::collect_parameters(std::vector<Parameter<T>>& out) {
  if (auto* d = std::get_if<BlockDiagonalAdapter<T>>(&adapter_)) {
    out.push_back({name_ + ".blocks", &d->blocks, &grad_blocks_});
  } else if (auto* l = std::get_if<LoRAAdapter<T>>(&adapter_)) {
    out.push_back({name_ + ".a", &l->a, &grad_a_});
    out.push_back({name_ + ".b", &l->b, &grad_b_});
  }
}

template <typename T>
std::size_t AdaptedLinear<T>::trainable_count() const noexcept {
  if (const auto* d = std::get_if<BlockDiagonalAdapter<T>>(&adapter_)) return d->parameter_count();
  if (const auto* l = std::get_if<LoRAAdapter<T>>(&adapter_)) return l->parameter_count();
  return 0;
}

template <typename T>
Tensor<T> AdaptedLinear<T>::merged_weight() const {
  Tensor<T> w = std::holds_alternative<Tensor<T>>(base_) ? std::get<Tensor<T>>(base_)
                                                         : dequantize<T>(std::get<QuantizedWeight>(base_));
  if (const auto* d = std::get_if<BlockDiagonalAdapter<T>>(&adapter_)) return merge_adapter(w, *d);
  if (const auto* l = std::get_if<LoRAAdapter<T>>(&adapter_)) return merge_adapter(w, *l);
  return w;
}

// --- Model -----------------------------------------------------------------------------------

template <typename T>
std::vector<Parameter<T>> Model<T>::parameters() {
  std::vector<Parameter<T>> out;
  for (auto* l : linears()) l->collect_parameters(out);
  return out;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto* l : linears()) l->zero_grad();
}

template <typename T>
std::size_t Model<T>::trainable_parameters() {
  std::size_t n = 0;
  for (auto* l : linears()) n += l->trainable_count();
  return n;
}

template <typename T>
std::set<ModuleTag> Model<T>::tags() {
  std::set<ModuleTag> out;
  for (auto* l : linears()) out.insert(l->tag());
  return out;
}

template <typename T>
LinearModel<T>::LinearModel(BaseWeight<T> base, std::string name)
    : layer_(std::move(name), ModuleTag::generic, std::move(base)) {}

template <typename T>
Tensor<T> LinearModel<T>::forward(const Tensor<T>& x) {
  input_ = x;
  return layer_.forward(x);
}

template <typename T>
Tensor<T> LinearModel<T>::backward(const Tensor<T>& g_y) {
  return layer_.backward(input_, g_y);
}

template <typename T>
Mlp<T>::Mlp(std::vector<AdaptedLinear<T>> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ConfigError("MLP needs at least one layer");
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (layers_[i].in_features() != layers_[i - 1].out_features()) {
      throw DimensionError("MLP layer " + std::to_string(i) + " input width does not match previous output");
    }
  }
}

template <typename T>
Mlp<T> Mlp<T>::random(const std::vector<std::size_t>& widths, Rng& rng) {
  if (widths.size() < 2) throw ConfigError("MLP needs at least two widths");
  std::vector<AdaptedLinear<T>> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    auto w = rand_normal<T>(rng, {widths[i], widths[i + 1]}, 1.0 / std::sqrt(static_cast<double>(widths[i])));
    layers.emplace_back("mlp." + std::to_string(i), ModuleTag::generic, std::move(w));
  }
  return Mlp(std::move(layers));
}

template <typename T>
Tensor<T> Mlp<T>::forward(const Tensor<T>& x) {
  inputs_.clear();
  pre_.clear();
  Tensor<T> h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    inputs_.push_back(h);
    h = layers_[i].forward(h);
    if (i + 1 < layers_.size()) {
      pre_.push_back(h);
      for (auto& v : h.data()) v = std::tanh(v);
    }
  }
  return h;
}

template <typename T>
Tensor<T> Mlp<T>::backward(const Tensor<T>& g_y) {
  Tensor<T> g = g_y;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (i + 1 < layers_.size()) {
      const auto& z = pre_[i];
      for (std::size_t e = 0; e < g.size(); ++e) {
        const T t = std::tanh(z[e]);
        g[e] *= T(1) - t * t;
      }
    }
    g = layers_[i].backward(inputs_[i], g);
  }
  return g;
}

template <typename T>
std::vector<AdaptedLinear<T>*> Mlp<T>::linears() {
  std::vector<AdaptedLinear<T>*> out;
  for (auto& l : layers_) out.push_back(&l);
  return out;
}

// --- TinyTransformerBlock --------------------------------------------------------------------

template <typename T>
TinyTransformerBlock<T>::TinyTransformerBlock(Weights w, std::string prefix)
    : q_(prefix + ".Q", ModuleTag::Q, std::move(w.q)),
      k_(prefix + ".K", ModuleTag::K, std::move(w.k)),
      v_(prefix + ".V", ModuleTag::V, std::move(w.v)),
      o_(prefix + ".O", ModuleTag::O, std::move(w.o)),
      g_(prefix + ".G", ModuleTag::G, std::move(w.g)),
      u_(prefix + ".U", ModuleTag::U, std::move(w.u)),
      d_(prefix + ".D", ModuleTag::D, std::move(w.d)) {
  const std::size_t h = q_.in_features(), f = g_.out_features();
  auto expect = [](const AdaptedLinear<T>& l, std::size_t in, std::size_t out) {
    if (l.in_features() != in || l.out_features() != out) {
      throw DimensionError(l.name() + " must be " + std::to_string(in) + "x" + std::to_string(out));
    }
  };
  for (const auto* l : {&q_, &k_, &v_, &o_}) expect(*l, h, h);
  expect(g_, h, f);
  expect(u_, h, f);
  expect(d_, f, h);
}

template <typename T>
TinyTransformerBlock<T> TinyTransformerBlock<T>::random(std::size_t hidden, std::size_t intermediate, Rng& rng,
                                                        std::string prefix) {
  auto init = [&](std::size_t in, std::size_t out) {
    return rand_normal<T>(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  Weights w;
  w.q = init(hidden, hidden);
  w.k = init(hidden, hidden);
  w.v = init(hidden, hidden);
  w.o = init(hidden, hidden);
  w.g = init(hidden, intermediate);
  w.u = init(hidden, intermediate);
  w.d = init(intermediate, hidden);
  return TinyTransformerBlock(std::move(w), std::move(prefix));
}

template <typename T>
AdaptedLinear<T>& TinyTransformerBlock<T>::module(ModuleTag tag) {
  switch (tag) {
    case ModuleTag::Q: return q_;
    case ModuleTag::K: return k_;
    case ModuleTag::V: return v_;
    case ModuleTag::O: return o_;
    case ModuleTag::G: return g_;
    case ModuleTag::U: return u_;
    case ModuleTag::D: return d_;
    case ModuleTag::generic: break;
  }
  throw ConfigError("transformer block has no '" + tag_name(tag) + "' module");
}

template <typename T>
std::vector<AdaptedLinear<T>*> TinyTransformerBlock<T>::linears() {
  return {&q_, &k_, &v_, &o_, &g_, &u_, &d_};
}

template <typename T>
Tensor<T> TinyTransformerBlock<T>::forward(const Tensor<T>& x) {
  const std::size_t h = hidden();
  if (x.rank() != 3 || x.dim(2) != h) {
    throw DimensionError("transformer block expects b x s x " + std::to_string(h) + ", got " +
                         shape_to_string(x.shape()));
  }
  batch_ = x.dim(0);
  seq_ = x.dim(1);
  const std::size_t rows = batch_ * seq_;
  x_ = x.reshaped({rows, h});

  n1_ = rms_norm(x_);
  q_out_ = q_.forward(n1_);
  k_out_ = k_.forward(n1_);
  v_out_ = v_.forward(n1_);

  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(h)));
  probs_ = Tensor<T>({batch_, seq_, seq_});
  attn_ = Tensor<T>({rows, h});
  for (std::size_t b = 0; b < batch_; ++b) {
    const std::size_t base = b * seq_;
    for (std::size_t i = 0; i < seq_; ++i) {
      T row_max = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < seq_; ++j) {
        T s(0);
        for (std::size_t c = 0; c < h; ++c) s += q_out_(base + i, c) * k_out_(base + j, c);
        probs_(b, i, j) = s * inv_sqrt;
        row_max = std::max(row_max, probs_(b, i, j));
      }
      T denom(0);
      for (std::size_t j = 0; j < seq_; ++j) {
        probs_(b, i, j) = std::exp(probs_(b, i, j) - row_max);
        denom += probs_(b, i, j);
      }
      for (std::size_t j = 0; j < seq_; ++j) probs_(b, i, j) /= denom;
      for (std::size_t j = 0; j < seq_; ++j) {
        const T p = probs_(b, i, j);
        for (std::size_t c = 0; c < h; ++c) attn_(base + i, c) += p * v_out_(base + j, c);
      }
    }
  }

  h1_ = add(x_, o_.forward(attn_));
  n2_ = rms_norm(h1_);
  gate_ = g_.forward(n2_);
  up_ = u_.forward(n2_);
  mix_ = Tensor<T>(gate_.shape());
  for (std::size_t e = 0; e < mix_.size(); ++e) mix_[e] = gate_[e] * sigmoid(gate_[e]) * up_[e];
  auto y = add(h1_, d_.forward(mix_));
  return std::move(y).reshaped({batch_, seq_, h});
}

template <typename T>
Tensor<T> TinyTransformerBlock<T>::backward(const Tensor<T>& g_y) {
  const std::size_t h = hidden(), rows = batch_ * seq_;
  if (g_y.shape() != Shape{batch_, seq_, h}) {
    throw DimensionError("transformer backward: cotangent shape " + shape_to_string(g_y.shape()) +
                         " does not match the last forward");
  }
  const auto gy = g_y.reshaped({rows, h});

  // Feed-forward branch.
  auto g_mix = d_.backward(mix_, gy);
  Tensor<T> g_gate(gate_.shape()), g_up(up_.shape());
  for (std::size_t e = 0; e < g_mix.size(); ++e) {
    const T z = gate_[e], sg = sigmoid(z);
    g_up[e] = g_mix[e] * z * sg;
    g_gate[e] = g_mix[e] * up_[e] * sg * (T(1) + z * (T(1) - sg));
  }
  auto g_n2 = g_.backward(n2_, g_gate);
  add_inplace(g_n2, u_.backward(n2_, g_up));
  auto g_h1 = add(gy, rms_norm_backward(h1_, g_n2));

  // Attention branch.
  auto g_attn = o_.backward(attn_, g_h1);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(h)));
  Tensor<T> g_q({rows, h}), g_k({rows, h}), g_v({rows, h});
  std::vector<T> g_p(seq_ * seq_);
  for (std::size_t b = 0; b < batch_; ++b) {
    const std::size_t base = b * seq_;
    for (std::size_t i = 0; i < seq_; ++i) {
      for (std::size_t j = 0; j < seq_; ++j) {
        T s(0);
        for (std::size_t c = 0; c < h; ++c) s += g_attn(base + i, c) * v_out_(base + j, c);
        g_p[i * seq_ + j] = s;
        const T p = probs_(b, i, j);
        for (std::size_t c = 0; c < h; ++c) g_v(base + j, c) += p * g_attn(base + i, c);
      }
      T dot(0);
      for (std::size_t j = 0; j < seq_; ++j) dot += g_p[i * seq_ + j] * probs_(b, i, j);
      for (std::size_t j = 0; j < seq_; ++j) {
        const T g_s = probs_(b, i, j) * (g_p[i * seq_ + j] - dot) * inv_sqrt;
        for (std::size_t c = 0; c < h; ++c) {
          g_q(base + i, c) += g_s * k_out_(base + j, c);
          g_k(base + j, c) += g_s * q_out_(base + i, c);
        }
      }
    }
  }
  auto g_n1 = q_.backward(n1_, g_q);
  add_inplace(g_n1, k_.backward(n1_, g_k));
  add_inplace(g_n1, v_.backward(n1_, g_v));
  auto g_x = add(g_h1, rms_norm_backward(x_, g_n1));
  return std::move(g_x).reshaped({batch_, seq_, h});
}

// --- attachment ------------------------------------------------------------------------------

std::string adapter_kind_name(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::none: return "none";
    case AdapterKind::diablo: return "diablo";
    case AdapterKind::lora: return "lora";
  }
  return "?";
}

AdapterKind parse_adapter_kind(const std::string& name) {
  if (name == "none") return AdapterKind::none;
  if (name == "diablo") return AdapterKind::diablo;
  if (name == "lora") return AdapterKind::lora;
  throw ConfigError("unknown adapter kind '" + name + "' (expected none, diablo or lora)");
}

template <typename T>
void attach_adapters(Model<T>& model, const AdapterSpec& spec, const std::set<ModuleTag>& targets, Rng& rng) {
  if (spec.kind == AdapterKind::none) return;
  const auto available = model.tags();
  for (auto t : targets) {
    if (!available.count(t)) {
      throw ConfigError("module tag '" + tag_name(t) + "' is not in this model; valid tags: " +
                        join_tags(available));
    }
  }
  if (spec.kind == AdapterKind::diablo && spec.num_blocks == 0) throw ConfigError("diablo adapter needs blocks >= 1");
  if (spec.kind == AdapterKind::lora && spec.rank == 0) throw ConfigError("lora adapter needs rank >= 1");
  for (auto* layer : model.linears()) {
    if (!targets.count(layer->tag())) continue;
    if (spec.kind == AdapterKind::diablo) {
      layer->attach(init_diablo<T>(layer->in_features(), layer->out_features(), spec.num_blocks));
    } else {
      layer->attach(init_lora<T>(layer->in_features(), layer->out_features(), spec.rank, rng,
                                 static_cast<T>(spec.scaling)));
    }
  }
}

template <typename T>
std::vector<NamedAdapter<T>> collect_adapters(Model<T>& model) {
  std::vector<NamedAdapter<T>> out;
  for (auto* l : model.linears())
    if (l->has_adapter()) out.push_back({l->name(), l->adapter()});
  return out;
}

// --- ModelConfig -----------------------------------------------------------------------------

std::uint64_t ModelConfig::linear_params_per_layer() const {
  std::uint64_t n = 0;
  for (const auto& m : modules) n += static_cast<std::uint64_t>(m.in_features) * m.out_features;
  return n;
}

std::uint64_t ModelConfig::total_params() const {
  return layers * (linear_params_per_layer() + per_layer_extra_params) + extra_params;
}

std::set<ModuleTag> ModelConfig::tags() const {
  std::set<ModuleTag> out;
  for (const auto& m : modules) out.insert(m.tag);
  return out;
}

void ModelConfig::validate() const {
  if (layers == 0) throw ConfigError("model '" + name + "': layers must be >= 1");
  if (modules.empty()) throw ConfigError("model '" + name + "': no modules");
  for (const auto& m : modules) {
    if (m.in_features == 0 || m.out_features == 0) {
      throw ConfigError("model '" + name + "': module " + tag_name(m.tag) + " has a zero dimension");
    }
  }
}

ModelConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  static const std::set<std::string> allowed = {"name", "layers", "modules", "per_layer_extra_params",
                                                "extra_params", "published_total_params", "source"};
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("model config: unknown key '" + key + "'");
  }
  ModelConfig cfg;
  try {
    cfg.name = j.value("name", "");
    cfg.layers = j.value("layers", std::size_t{1});
    cfg.per_layer_extra_params = j.value("per_layer_extra_params", std::uint64_t{0});
    cfg.extra_params = j.value("extra_params", std::uint64_t{0});
    if (j.contains("published_total_params")) cfg.published_total_params = j.at("published_total_params");
    for (const auto& m : j.at("modules")) {
      for (const auto& [key, _] : m.items()) {
        if (key != "tag" && key != "in" && key != "out") {
          throw ConfigError("model config: unknown module key '" + key + "'");
        }
      }
      const auto tag_str = m.at("tag").get<std::string>();
      const auto tag = parse_tag(tag_str);
      if (!tag) throw ConfigError("model config: unknown module tag '" + tag_str + "'");
      cfg.modules.push_back({*tag, m.at("in").get<std::size_t>(), m.at("out").get<std::size_t>()});
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string preset_directory() {
  if (const char* env = std::getenv("DIABLO_PRESET_DIR"); env && *env) return env;
  return DIABLO_DEFAULT_PRESET_DIR;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(preset_directory(), ec)) {
    if (entry.path().extension() == ".json") out.push_back(entry.path().stem().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

ModelConfig load_preset(const std::string& name) {
  const auto path = std::filesystem::path(preset_directory()) / (name + ".json");
  if (!std::filesystem::exists(path)) {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }
  auto cfg = model_config_from_json(io::read_file_text(path.string()));
  if (cfg.name.empty()) cfg.name = name;
  return cfg;
}

ModelConfig linear_config(std::size_t in_features, std::size_t out_features) {
  ModelConfig cfg;
  cfg.name = "linear";
  cfg.modules = {{ModuleTag::generic, in_features, out_features}};
  cfg.validate();
  return cfg;
}

ModelConfig mlp_config(const std::vector<std::size_t>& widths) {
  if (widths.size() < 2) throw ConfigError("MLP needs at least two widths");
  ModelConfig cfg;
  cfg.name = "mlp";
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) cfg.modules.push_back({ModuleTag::generic, widths[i], widths[i + 1]});
  cfg.validate();
  return cfg;
}

ModelConfig transformer_config(std::size_t hidden, std::size_t intermediate, std::size_t layers) {
  ModelConfig cfg;
  cfg.name = "tiny-transformer";
  cfg.layers = layers;
  cfg.modules = {{ModuleTag::Q, hidden, hidden},       {ModuleTag::K, hidden, hidden},
                 {ModuleTag::V, hidden, hidden},       {ModuleTag::O, hidden, hidden},
                 {ModuleTag::G, hidden, intermediate}, {ModuleTag::U, hidden, intermediate},
                 {ModuleTag::D, intermediate, hidden}};
  cfg.validate();
  return cfg;
}

template class AdaptedLinear<float>;
template class AdaptedLinear<double>;
template class Model<float>;
template class Model<double>;
template class LinearModel<float>;
template class LinearModel<double>;
template class Mlp<float>;
template class Mlp<double>;
template class TinyTransformerBlock<float>;
template class TinyTransformerBlock<double>;
template void attach_adapters(Model<float>&, const AdapterSpec&, const std::set<ModuleTag>&, Rng&);
template void attach_adapters(Model<double>&, const AdapterSpec&, const std::set<ModuleTag>&, Rng&);
template std::vector<NamedAdapter<float>> collect_adapters(Model<float>&);
template std::vector<NamedAdapter<double>> collect_adapters(Model<double>&);

}  // namespace diablo
