#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>

#include "diablo/model.hpp"

namespace diablo {

/// Trainable-parameter and adapter-FLOP totals for one adapter configuration.
///
/// FLOPs count one multiply-add as 2; the `*_macs` fields carry the same counts in
/// multiply-adds. `forward_flops_base` is the frozen cost of every linear module in the
/// model per token, targeted or not.
struct CostReport {
  std::string adapter;  // "diablo N=64", "lora r=64"
  std::uint64_t trainable_params = 0;
  std::uint64_t total_params = 0;
  double fraction = 0.0;  // trainable / total
  std::uint64_t forward_flops_per_token = 0;
  std::uint64_t forward_macs_per_token = 0;
  std::uint64_t forward_flops_base = 0;
  std::size_t targeted_modules = 0;  // per layer

  double percent() const noexcept { return 100.0 * fraction; }
};

/// Σ over targeted layers of N·⌈m₁/N⌉·⌈m₂/N⌉.
CostReport count_diablo(const ModelConfig& config, std::size_t num_blocks, const std::set<ModuleTag>& targets);

/// Σ over targeted layers of r·(m₁+m₂).
CostReport count_lora(const ModelConfig& config, std::size_t rank, const std::set<ModuleTag>& targets);

struct ParityReport {
  std::size_t width = 0;       // m
  std::size_t num_blocks = 0;  // N
  std::size_t block = 0;       // d = m/N
  std::size_t rank = 0;        // r
  std::uint64_t diablo_params = 0;  // N·d²
  std::uint64_t lora_params = 0;    // 2·m·r
  std::uint64_t diablo_flops = 0;   // per token
  std::uint64_t lora_flops = 0;
  bool parity = false;  // N·d² == 2·m·r
};

/// Square m×m layer. When N·d² = 2mr the two adapter FLOP counts are checked to be equal and a
/// std::logic_error is thrown otherwise.
ParityReport parity_check(std::size_t width, std::size_t num_blocks, std::size_t rank);

/// 112197632 → "112,197,632".
std::string group_digits(std::uint64_t value);

/// Aligned text table, one row per field.
std::string format_report(const CostReport& report);
std::string report_json(const CostReport& report);

}  // namespace diablo
