#include "diablo/cli/config.hpp"

#include <cmath>
#include <initializer_list>
#include <nlohmann/json.hpp>

#include "diablo/io.hpp"

namespace diablo::cli {

namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& field, const std::string& what) {
  throw ConfigError("config field '" + field + "': " + what);
}

// A JSON object plus its dotted path, with strict key checking.
class Section {
 public:
  Section(const json& j, std::string path, std::initializer_list<const char*> allowed) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
    for (const auto& item : j_.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || item.key() == a;
      if (!ok) fail(field(item.key()), "unknown key");
    }
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) const { return j_.at(key); }

  void read(const char* key, std::size_t& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
      fail(field(key), "expected a non-negative integer");
    }
    out = v.get<std::size_t>();
  }
  void read(const char* key, std::uint64_t& out, int) const {
    std::size_t tmp = out;
    read(key, tmp);
    out = tmp;
  }
  void read(const char* key, int& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_number_integer()) fail(field(key), "expected an integer");
    out = j_.at(key).get<int>();
  }
  void read(const char* key, double& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_number()) fail(field(key), "expected a number");
    out = j_.at(key).get<double>();
    if (!std::isfinite(out)) fail(field(key), "must be finite");
  }
  void read(const char* key, std::string& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_string()) fail(field(key), "expected a string");
    out = j_.at(key).get<std::string>();
  }
  void read(const char* key, std::vector<std::size_t>& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_array()) fail(field(key), "expected an array of integers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number_unsigned()) fail(field(key), "expected an array of non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
  }
  void read(const char* key, std::vector<std::string>& out) const {
    const auto& v = j_.at(key);
    if (!v.is_array()) fail(field(key), "expected an array of strings");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_string()) fail(field(key), "expected an array of strings");
      out.push_back(e.get<std::string>());
    }
  }

  // Runs `parse` on the textual value, rewording its error with the field name.
  template <typename F>
  void read_enum(const char* key, F parse) const {
    if (!has(key)) return;
    std::string s;
    read(key, s);
    try {
      parse(s);
    } catch (const std::exception& e) {
      fail(field(key), e.what());
    }
  }

 private:
  const json& j_;
  std::string path_;
};

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) fail(field, what);
}

void parse_model(const Section& s, ModelSection& m) {
  s.read("preset", m.preset);
  s.read_enum("kind", [&](const std::string& v) {
    if (v == "linear") m.kind = ModelKind::linear;
    else if (v == "mlp") m.kind = ModelKind::mlp;
    else if (v == "transformer") m.kind = ModelKind::transformer;
    else throw ConfigError("unknown model kind '" + v + "' (expected linear, mlp or transformer)");
  });
  s.read("in", m.in_features);
  s.read("out", m.out_features);
  s.read("widths", m.widths);
  s.read("hidden", m.hidden);
  s.read("intermediate", m.intermediate);
  s.read("seq_len", m.seq_len);
  require(m.in_features > 0 && m.out_features > 0, s.field("in/out"), "must be >= 1");
  require(m.widths.size() >= 2, s.field("widths"), "needs at least an input and an output width");
  for (auto w : m.widths) require(w > 0, s.field("widths"), "widths must be >= 1");
  require(m.hidden > 0 && m.intermediate > 0 && m.seq_len > 0, s.field("hidden/intermediate/seq_len"),
          "must be >= 1");
}

}  // namespace

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::linear: return "linear";
    case ModelKind::mlp: return "mlp";
    case ModelKind::transformer: return "transformer";
  }
  return "?";
}

std::set<ModuleTag> ExperimentConfig::resolved_targets() const {
  if (adapter.targets) {
    std::set<ModuleTag> out;
    for (const auto& name : *adapter.targets) {
      const auto tag = parse_tag(name);
      if (!tag) fail("adapter.targets", "unknown module tag '" + name + "' (expected Q, K, V, O, G, U, D or generic)");
      out.insert(*tag);
    }
    return out;
  }
  if (!model.preset.empty() || model.kind == ModelKind::transformer) {
    return {ModuleTag::Q, ModuleTag::K, ModuleTag::V, ModuleTag::U, ModuleTag::D};
  }
  return {ModuleTag::generic};
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  const Section top(root, "",
                    {"model", "adapter", "task", "optimizer", "steps", "batch_size", "seed", "dtype", "quantization",
                     "output_dir", "bench", "gradcheck"});
  if (top.has("model")) {
    parse_model(Section(top.at("model"), "model",
                        {"preset", "kind", "in", "out", "widths", "hidden", "intermediate", "seq_len"}),
                c.model);
  }

  if (top.has("adapter")) {
    const Section s(top.at("adapter"), "adapter", {"kind", "blocks", "rank", "scaling", "targets"});
    s.read_enum("kind", [&](const std::string& v) { c.adapter.kind = parse_adapter_kind(v); });
    s.read("blocks", c.adapter.blocks);
    s.read("rank", c.adapter.rank);
    s.read("scaling", c.adapter.scaling);
    if (s.has("targets")) {
      std::vector<std::string> t;
      s.read("targets", t);
      c.adapter.targets = std::move(t);
    }
    require(c.adapter.blocks > 0, "adapter.blocks", "must be >= 1");
    require(c.adapter.rank > 0, "adapter.rank", "must be >= 1");
  }

  if (top.has("task")) {
    const Section s(top.at("task"), "task", {"kind", "blocks", "rank", "noise", "samples", "delta_scale"});
    s.read_enum("kind", [&](const std::string& v) { c.task.kind = parse_task_kind(v); });
    s.read("blocks", c.task.num_blocks);
    s.read("rank", c.task.rank);
    s.read("noise", c.task.noise);
    s.read("samples", c.task.samples);
    s.read("delta_scale", c.task.delta_scale);
    require(c.task.num_blocks > 0, "task.blocks", "must be >= 1");
    require(c.task.rank > 0, "task.rank", "must be >= 1");
    require(c.task.noise >= 0.0, "task.noise", "must be >= 0");
    require(c.task.samples > 0, "task.samples", "must be >= 1");
  }

  if (top.has("optimizer")) {
    const Section s(top.at("optimizer"), "optimizer",
                    {"lr", "warmup_steps", "schedule", "weight_decay", "beta1", "beta2", "eps"});
    s.read("lr", c.schedule.base_lr);
    s.read("warmup_steps", c.schedule.warmup_steps);
    s.read_enum("schedule", [&](const std::string& v) { c.schedule.kind = parse_schedule(v); });
    s.read("weight_decay", c.adamw.weight_decay);
    s.read("beta1", c.adamw.beta1);
    s.read("beta2", c.adamw.beta2);
    s.read("eps", c.adamw.eps);
    require(c.schedule.base_lr > 0.0, "optimizer.lr", "must be > 0");
    require(c.adamw.weight_decay >= 0.0, "optimizer.weight_decay", "must be >= 0");
    require(c.adamw.beta1 >= 0.0 && c.adamw.beta1 < 1.0, "optimizer.beta1", "must be in [0, 1)");
    require(c.adamw.beta2 >= 0.0 && c.adamw.beta2 < 1.0, "optimizer.beta2", "must be in [0, 1)");
    require(c.adamw.eps > 0.0, "optimizer.eps", "must be > 0");
  }

  top.read("steps", c.steps);
  top.read("batch_size", c.batch_size);
  top.read("seed", c.seed, 0);
  top.read_enum("dtype", [&](const std::string& v) { c.dtype = parse_dtype(v); });
  top.read("output_dir", c.output_dir);
  require(!c.output_dir.empty(), "output_dir", "must not be empty");

  if (top.has("quantization")) {
    const Section s(top.at("quantization"), "quantization", {"bits", "group_size"});
    s.read("bits", c.quantization.bits);
    s.read("group_size", c.quantization.group_size);
    require(c.quantization.bits == 0 || c.quantization.bits == 2 || c.quantization.bits == 4, "quantization.bits",
            "must be 0 (off), 2 or 4");
    require(c.quantization.group_size > 0, "quantization.group_size", "must be >= 1");
  }

  if (top.has("bench")) {
    const Section s(top.at("bench"), "bench", {"repeats", "warmup", "steps"});
    s.read("repeats", c.bench.repeats);
    s.read("warmup", c.bench.warmup);
    s.read("steps", c.bench.steps);
    require(c.bench.repeats > 0, "bench.repeats", "must be >= 1");
    require(c.bench.steps > 0, "bench.steps", "must be >= 1");
  }

  if (top.has("gradcheck")) {
    const Section s(top.at("gradcheck"), "gradcheck", {"trials", "batch", "tolerance"});
    s.read("trials", c.gradcheck.trials);
    s.read("batch", c.gradcheck.batch);
    s.read("tolerance", c.gradcheck.tolerance);
    require(c.gradcheck.trials > 0, "gradcheck.trials", "must be >= 1");
    require(c.gradcheck.batch > 0, "gradcheck.batch", "must be >= 1");
    require(c.gradcheck.tolerance > 0.0, "gradcheck.tolerance", "must be > 0");
  }

  c.task.in_features = c.model.in_features;
  c.task.out_features = c.model.out_features;
  c.task.seed = c.seed;
  c.resolved_targets();  // validates tag names early
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::string text;
  try {
    text = io::read_file_text(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config '" + path + "': " + e.what());
  }
  return parse_experiment_config(text);
}

ModelConfig accounting_config(const ExperimentConfig& config) {
  if (!config.model.preset.empty()) return load_preset(config.model.preset);
  switch (config.model.kind) {
    case ModelKind::linear: return linear_config(config.model.in_features, config.model.out_features);
    case ModelKind::mlp: return mlp_config(config.model.widths);
    case ModelKind::transformer: return transformer_config(config.model.hidden, config.model.intermediate, 1);
  }
  throw ConfigError("unreachable model kind");
}

}  // namespace diablo::cli
