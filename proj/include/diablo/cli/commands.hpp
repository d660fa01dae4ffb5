#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "diablo/cli/config.hpp"

namespace diablo::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // divergence, failed check, --expect mismatch
inline constexpr int kExitConfig = 2;   // invalid config or arguments

/// Command-line overrides shared by the subcommands.
struct CommandOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::vector<std::string> expect;  // "key=value" tokens
  std::optional<std::size_t> repeats;
  bool timing = true;  // false writes wall_ms as 0
  bool json = false;
  bool pin = false;
  bool corrupt_backward = false;  // gradcheck negative control
};

/// 0 quiet, 1 normal (default), 2 per-step progress. Read from DIABLO_VERBOSITY.
int verbosity();

/// Applies --seed / --out to a loaded config.
ExperimentConfig with_overrides(ExperimentConfig config, const CommandOptions& options);

int cmd_train(const ExperimentConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const ExperimentConfig& config, const CommandOptions& options, std::ostream& out,
                  std::ostream& err);
int cmd_params(const ExperimentConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err);

struct BenchResult {
  std::vector<double> ms_per_step_a;  // one entry per timed repeat
  std::vector<double> ms_per_step_b;
  double median_a = 0.0;
  double median_b = 0.0;
  double ratio = 0.0;  // median_a / median_b
  bool low_confidence = false;
};

/// Alternates A and B runs: `warmup` untimed rounds, then `repeats` timed rounds of
/// `config_a.bench.steps` optimizer steps each.
BenchResult run_bench(const ExperimentConfig& config_a, const ExperimentConfig& config_b, std::size_t repeats,
                      bool pin);
int cmd_bench(const ExperimentConfig& config_a, const ExperimentConfig& config_b, const CommandOptions& options,
              std::ostream& out, std::ostream& err);

/// Full command line (args[0] is the subcommand, no program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace diablo::cli
