#include "diablo/accounting.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace diablo {

namespace {

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

std::uint64_t base_flops_per_token(const ModelConfig& config) { return 2 * config.layers * config.linear_params_per_layer(); }

void check_targets(const ModelConfig& config, const std::set<ModuleTag>& targets) {
  const auto tags = config.tags();
  for (auto t : targets) {
    if (!tags.count(t)) {
      std::string valid;
      for (auto v : tags) valid += (valid.empty() ? "" : ", ") + tag_name(v);
      throw ConfigError("module tag '" + tag_name(t) + "' is not in model '" + config.name + "'; valid tags: " + valid);
    }
  }
}

template <typename PerLayer>
CostReport count(const ModelConfig& config, const std::set<ModuleTag>& targets, PerLayer per_module) {
  config.validate();
  check_targets(config, targets);
  CostReport r;
  std::uint64_t per_layer = 0;
  for (const auto& m : config.modules) {
    if (!targets.count(m.tag)) continue;
    per_layer += per_module(m);
    ++r.targeted_modules;
  }
  r.trainable_params = per_layer * config.layers;
  r.total_params = config.total_params();
  r.fraction = r.total_params == 0 ? 0.0 : static_cast<double>(r.trainable_params) / static_cast<double>(r.total_params);
  // The adapter path is one multiply-add per trainable weight per token.
  r.forward_macs_per_token = r.trainable_params;
  r.forward_flops_per_token = 2 * r.trainable_params;
  r.forward_flops_base = base_flops_per_token(config);
  return r;
}

}  // namespace

std::string group_digits(std::uint64_t v) {
  std::string digits = std::to_string(v), out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

CostReport count_diablo(const ModelConfig& config, std::size_t num_blocks, const std::set<ModuleTag>& targets) {
  if (num_blocks == 0) throw ConfigError("count_diablo: N must be >= 1");
  auto r = count(config, targets, [&](const ModuleShape& m) {
    return num_blocks * ceil_div(m.in_features, num_blocks) * ceil_div(m.out_features, num_blocks);
  });
  r.adapter = "diablo N=" + std::to_string(num_blocks);
  return r;
}

CostReport count_lora(const ModelConfig& config, std::size_t rank, const std::set<ModuleTag>& targets) {
  if (rank == 0) throw ConfigError("count_lora: r must be >= 1");
  auto r = count(config, targets, [&](const ModuleShape& m) {
    return static_cast<std::uint64_t>(rank) * (m.in_features + m.out_features);
  });
  r.adapter = "lora r=" + std::to_string(rank);
  return r;
}

ParityReport parity_check(std::size_t width, std::size_t num_blocks, std::size_t rank) {
  if (width == 0 || num_blocks == 0 || rank == 0) throw std::invalid_argument("parity_check: arguments must be >= 1");
  if (width % num_blocks != 0) throw std::invalid_argument("parity_check: N must divide m");
  ParityReport p;
  p.width = width;
  p.num_blocks = num_blocks;
  p.block = width / num_blocks;
  p.rank = rank;
  p.diablo_params = static_cast<std::uint64_t>(num_blocks) * p.block * p.block;
  p.lora_params = 2ULL * width * rank;
  p.parity = p.diablo_params == p.lora_params;

  const auto layer = linear_config(width, width);
  const std::set<ModuleTag> targets = {ModuleTag::generic};
  p.diablo_flops = count_diablo(layer, num_blocks, targets).forward_flops_per_token;
  p.lora_flops = count_lora(layer, rank, targets).forward_flops_per_token;
  if (p.parity && p.diablo_flops != p.lora_flops) {
    throw std::logic_error(fmt::format("parity violated: m={} N={} r={} gives {} vs {} FLOPs", width, num_blocks, rank,
                                       p.diablo_flops, p.lora_flops));
  }
  return p;
}

std::string format_report(const CostReport& r) {
  std::string out = "# FLOPs count one multiply-add as 2\n";
  auto row = [&](std::string_view key, const std::string& value) { out += fmt::format("{:<26}{}\n", key, value); };
  row("adapter", r.adapter);
  row("targeted modules/layer", std::to_string(r.targeted_modules));
  row("trainable params", group_digits(r.trainable_params));
  row("total params", group_digits(r.total_params));
  row("trainable fraction", fmt::format("{:.2f}%", r.percent()));
  row("adapter FLOPs/token", group_digits(r.forward_flops_per_token));
  row("adapter MACs/token", group_digits(r.forward_macs_per_token));
  row("base FLOPs/token", group_digits(r.forward_flops_base));
  return out;
}

std::string report_json(const CostReport& r) {
  nlohmann::json j = {{"adapter", r.adapter},
                      {"trainable_params", r.trainable_params},
                      {"total_params", r.total_params},
                      {"fraction", r.fraction},
                      {"percent", r.percent()},
                      {"forward_flops_per_token", r.forward_flops_per_token},
                      {"forward_macs_per_token", r.forward_macs_per_token},
                      {"forward_flops_base", r.forward_flops_base},
                      {"flop_convention", "multiply-add = 2 FLOPs"}};
  return j.dump(2);
}

}  // namespace diablo
