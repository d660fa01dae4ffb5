#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "diablo/model.hpp"
#include "diablo/optim.hpp"
#include "diablo/tensor.hpp"
#include "diablo/train.hpp"

namespace diablo::cli {

enum class ModelKind { linear, mlp, transformer };

struct ModelSection {
  std::string preset;  // shapes-only preset; overrides `kind` when set
  ModelKind kind = ModelKind::linear;
  std::size_t in_features = 16;   // linear
  std::size_t out_features = 16;  // linear
  std::vector<std::size_t> widths{8, 12, 6};  // mlp
  std::size_t hidden = 8;         // transformer
  std::size_t intermediate = 12;  // transformer
  std::size_t seq_len = 3;        // transformer
};

struct AdapterSection {
  AdapterKind kind = AdapterKind::diablo;
  std::size_t blocks = 4;
  std::size_t rank = 4;
  double scaling = 1.0;
  std::optional<std::vector<std::string>> targets;  // unset: model default
};

struct QuantSection {
  int bits = 0;  // 0 = off
  std::size_t group_size = 64;
};

struct BenchSection {
  std::size_t repeats = 5;
  std::size_t warmup = 1;
  std::size_t steps = 20;  // optimizer steps per timed run
};

struct GradcheckSection {
  std::size_t trials = 1;
  std::size_t batch = 3;
  double tolerance = 1e-4;
};

struct ExperimentConfig {
  ModelSection model;
  AdapterSection adapter;
  TaskSpec task;  // in/out features come from the model; seed from `seed`
  LrSchedule schedule;
  AdamWConfig adamw;
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
  QuantSection quantization;
  std::string output_dir = "runs/default";
  BenchSection bench;
  GradcheckSection gradcheck;

  /// Targets resolved against the model: explicit list, or Q,K,V,U,D for presets and
  /// transformers and the single generic tag for linear/MLP models.
  std::set<ModuleTag> resolved_targets() const;
};

/// Parses JSON with comments. Unknown keys, wrong types and out-of-range values throw
/// ConfigError naming the offending field.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

std::string model_kind_name(ModelKind kind);

/// Shape-only view of the configured model, for parameter accounting.
ModelConfig accounting_config(const ExperimentConfig& config);

}  // namespace diablo::cli
