#include "diablo/cli/commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fmt/format.h>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sched.h>

#include "diablo/accounting.hpp"
#include "diablo/gradcheck.hpp"
#include "diablo/io.hpp"
#include "diablo/ops.hpp"

namespace diablo::cli {

namespace {

AdapterSpec adapter_spec(const ExperimentConfig& c) {
  return {c.adapter.kind, c.adapter.blocks, c.adapter.rank, c.adapter.scaling};
}

TrainOptions train_options(const ExperimentConfig& c) {
  TrainOptions o;
  o.steps = c.steps;
  o.batch_size = c.batch_size;
  o.seed = c.seed;
  o.schedule = c.schedule;
  o.adamw = c.adamw;
  return o;
}

void require_linear(const ExperimentConfig& c, const char* command) {
  if (!c.model.preset.empty() || c.model.kind != ModelKind::linear) {
    throw ConfigError(fmt::format("config field 'model': {} runs on model.kind \"linear\" only", command));
  }
}

// Frozen base from the task teacher (quantized when configured) plus the configured adapter.
template <typename T>
std::unique_ptr<LinearModel<T>> build_student(const ExperimentConfig& c, const SyntheticTask<T>& task) {
  BaseWeight<T> base = task.base;
  if (c.quantization.bits != 0) base = quantize(task.base, c.quantization.bits, c.quantization.group_size);
  auto model = std::make_unique<LinearModel<T>>(std::move(base));
  if (c.adapter.kind != AdapterKind::none) {
    Rng rng = Rng(c.seed).fork(7);
    attach_adapters<T>(*model, adapter_spec(c), c.resolved_targets(), rng);
  }
  return model;
}

template <typename T>
int train_typed(const ExperimentConfig& c, const CommandOptions& options, std::ostream& out, std::ostream& err) {
  const auto task = make_task<T>(c.task);
  auto model = build_student(c, task);

  Trainer<T> trainer(*model, task, train_options(c));
  const double initial = trainer.evaluate();
  const std::size_t every = std::max<std::size_t>(1, c.steps / 10);
  for (std::size_t s = 0; s < c.steps; ++s) {
    if (!trainer.step()) break;
    if (verbosity() >= 2 && (trainer.steps_done() % every == 0)) {
      const auto& m = trainer.trace().back();
      err << fmt::format("step {:>6}  loss {:.6e}  lr {:.3e}\n", m.step, m.loss, m.lr);
    }
  }
  const double final_loss = trainer.evaluate();
  bool diverged = trainer.diverged();
  std::string reason = trainer.divergence_reason();
  if (!diverged && !std::isfinite(final_loss)) {
    diverged = true;
    reason = "non-finite final loss";
  }
  double best = final_loss;
  for (const auto& m : trainer.trace()) best = std::min(best, m.loss);

  const std::string dir = c.output_dir;
  std::filesystem::create_directories(dir);
  io::write_file_atomic(dir + "/metrics.csv", metrics_csv(trainer.trace(), options.timing));
  save_adapter_checkpoint(dir + "/adapters", collect_adapters(*model));
  nlohmann::ordered_json summary = {{"adapter", adapter_kind_name(c.adapter.kind)},
                                    {"task", task_kind_name(c.task.kind)},
                                    {"seed", c.seed},
                                    {"steps_completed", trainer.steps_done()},
                                    {"trainable_params", model->trainable_parameters()},
                                    {"quantization_bits", c.quantization.bits},
                                    {"initial_loss", initial},
                                    {"final_loss", final_loss},
                                    {"best_loss", best},
                                    {"diverged", diverged},
                                    {"divergence_reason", reason}};
  io::write_file_atomic(dir + "/summary.json", summary.dump(2) + "\n");

  if (verbosity() >= 1) {
    out << fmt::format("train: {} steps, final_loss {:.6e} (initial {:.6e}), outputs in {}\n", trainer.steps_done(),
                       final_loss, initial, dir);
  }
  if (diverged) {
    err << "train: diverged: " << reason << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Prepared model + trainer whose setup cost stays outside the timed region.
template <typename T>
double time_steps(const ExperimentConfig& c) {
  const auto task = make_task<T>(c.task);
  auto model = build_student(c, task);
  auto opts = train_options(c);
  opts.steps = c.bench.steps;
  Trainer<T> trainer(*model, task, opts);
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t s = 0; s < c.bench.steps; ++s) {
    if (!trainer.step()) throw std::runtime_error("bench: training diverged: " + trainer.divergence_reason());
  }
  const auto end = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(end - start).count() / static_cast<double>(c.bench.steps);
}

double time_config(const ExperimentConfig& c) {
  return c.dtype == DType::f64 ? time_steps<double>(c) : time_steps<float>(c);
}

void pin_to_current_cpu() {
  const int cpu = sched_getcpu();
  if (cpu < 0) return;
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(cpu, &set);
  sched_setaffinity(0, sizeof(set), &set);
}

template <typename T>
Tensor<T> linear_base(Rng& rng, std::size_t m1, std::size_t m2) {
  return rand_normal<T>(rng, {m1, m2}, 1.0 / std::sqrt(static_cast<double>(m1)));
}

std::unique_ptr<Model<double>> gradcheck_model(const ExperimentConfig& c, Rng& rng) {
  const auto& m = c.model;
  if (!m.preset.empty()) throw ConfigError("config field 'model.preset': presets carry shapes only, not weights");
  switch (m.kind) {
    case ModelKind::linear:
      return std::make_unique<LinearModel<double>>(linear_base<double>(rng, m.in_features, m.out_features));
    case ModelKind::mlp:
      return std::make_unique<Mlp<double>>(Mlp<double>::random(m.widths, rng));
    case ModelKind::transformer:
      return std::make_unique<TinyTransformerBlock<double>>(
          TinyTransformerBlock<double>::random(m.hidden, m.intermediate, rng));
  }
  throw ConfigError("unreachable model kind");
}

std::string describe(const oracle::GradCheckReport& r) {
  std::string s = fmt::format("{} max_rel_error={:.3e} tolerance={:.1e} checked={}", r.passed() ? "PASS" : "FAIL",
                              r.max_relative_error, r.tolerance, r.checked);
  if (r.failing_parameter) {
    s += " failing_parameter=" + *r.failing_parameter;
    if (r.failing_index) s += fmt::format("[{}]", *r.failing_index);
  }
  return s;
}

}  // namespace

int verbosity() {
  const char* v = std::getenv("DIABLO_VERBOSITY");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0') return 1;
  return static_cast<int>(std::clamp(n, 0L, 2L));
}

ExperimentConfig with_overrides(ExperimentConfig config, const CommandOptions& options) {
  if (options.seed) {
    config.seed = *options.seed;
    config.task.seed = *options.seed;
  }
  if (options.output_dir) config.output_dir = *options.output_dir;
  if (options.repeats) {
    if (*options.repeats == 0) throw ConfigError("--repeats must be >= 1");
    config.bench.repeats = *options.repeats;
  }
  return config;
}

int cmd_train(const ExperimentConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err) {
  require_linear(config, "train");
  return config.dtype == DType::f64 ? train_typed<double>(config, options, out, err)
                                    : train_typed<float>(config, options, out, err);
}

BenchResult run_bench(const ExperimentConfig& a, const ExperimentConfig& b, std::size_t repeats, bool pin) {
  require_linear(a, "bench");
  require_linear(b, "bench");
  if (pin) pin_to_current_cpu();
  for (std::size_t w = 0; w < a.bench.warmup; ++w) {
    time_config(a);
    time_config(b);
  }
  BenchResult r;
  for (std::size_t i = 0; i < repeats; ++i) {
    r.ms_per_step_a.push_back(time_config(a));
    r.ms_per_step_b.push_back(time_config(b));
  }
  r.median_a = median(r.ms_per_step_a);
  r.median_b = median(r.ms_per_step_b);
  r.ratio = r.median_a / r.median_b;
  r.low_confidence = repeats < 2;
  return r;
}

int cmd_bench(const ExperimentConfig& a, const ExperimentConfig& b, const CommandOptions& options, std::ostream& out,
              std::ostream&) {
  const std::size_t repeats = options.repeats.value_or(a.bench.repeats);
  const auto r = run_bench(a, b, repeats, options.pin);
  auto label = [](const ExperimentConfig& c) {
    switch (c.adapter.kind) {
      case AdapterKind::diablo: return fmt::format("diablo N={}", c.adapter.blocks);
      case AdapterKind::lora: return fmt::format("lora r={}", c.adapter.rank);
      case AdapterKind::none: break;
    }
    return std::string("none");
  };
  if (options.json) {
    nlohmann::ordered_json j = {{"a", label(a)},         {"b", label(b)},
                                {"median_ms_a", r.median_a}, {"median_ms_b", r.median_b},
                                {"ratio", r.ratio},       {"repeats", repeats},
                                {"steps_per_run", a.bench.steps}, {"pinned", options.pin},
                                {"low_confidence", r.low_confidence}};
    out << j.dump(2) << "\n";
    return kExitOk;
  }
  out << fmt::format("# median wall time per optimizer step over {} timed runs of {} steps ({} warmup){}\n",
                     repeats, a.bench.steps, a.bench.warmup, options.pin ? ", pinned" : "");
  out << fmt::format("{:<4}{:<20}{:>14}\n", "", "adapter", "ms/step");
  out << fmt::format("{:<4}{:<20}{:>14.4f}\n", "A", label(a), r.median_a);
  out << fmt::format("{:<4}{:<20}{:>14.4f}\n", "B", label(b), r.median_b);
  out << fmt::format("ratio A/B: {:.3f}{}\n", r.ratio, r.low_confidence ? "  (low confidence: repeats=1)" : "");
  return kExitOk;
}

int cmd_gradcheck(const ExperimentConfig& config, const CommandOptions& options, std::ostream& out,
                  std::ostream& err) {
  if (config.dtype != DType::f64) {
    err << "gradcheck: config field 'dtype': gradient checking requires f64 (tolerances are undefined for f32)\n";
    return kExitConfig;
  }
  const auto targets = config.resolved_targets();
  if (config.adapter.kind == AdapterKind::none || targets.empty()) {
    err << "gradcheck: warning: no adapted modules; nothing to check\n";
    out << "gradient: PASS (vacuous) checked=0\n";
    return kExitOk;
  }

  oracle::GradcheckOptions go;
  go.tolerance = config.gradcheck.tolerance;
  go.corrupt_backward = options.corrupt_backward;
  Rng root(config.seed);
  Rng build_rng = root.fork(1);
  auto model = gradcheck_model(config, build_rng);
  attach_adapters<double>(*model, adapter_spec(config), targets, build_rng);

  oracle::GradCheckReport grads, dense;
  grads.tolerance = go.tolerance;
  dense.tolerance = go.reconstruction_tolerance;
  for (std::size_t t = 0; t < config.gradcheck.trials; ++t) {
    Rng rng = root.fork(100 + t);
    oracle::randomize_adapters(*model, rng);
    const std::size_t b = config.gradcheck.batch;
    Shape in_shape = config.model.kind == ModelKind::transformer
                         ? Shape{b, config.model.seq_len, config.model.hidden}
                         : Shape{b, model->linears().front()->in_features()};
    const auto x = rand_normal<double>(rng, in_shape);
    grads.merge(oracle::check_model_gradients(*model, x, go));
    dense.merge(oracle::check_dense_reconstruction(*model, rng, b, go));
  }
  out << "gradient:       " << describe(grads) << "\n";
  out << "reconstruction: " << describe(dense) << "\n";
  return grads.passed() && dense.passed() ? kExitOk : kExitFailure;
}

int cmd_params(const ExperimentConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err) {
  const auto shapes = accounting_config(config);
  const auto targets = config.resolved_targets();
  CostReport report;
  switch (config.adapter.kind) {
    case AdapterKind::diablo: report = count_diablo(shapes, config.adapter.blocks, targets); break;
    case AdapterKind::lora: report = count_lora(shapes, config.adapter.rank, targets); break;
    case AdapterKind::none: throw ConfigError("config field 'adapter.kind': params needs diablo or lora");
  }
  out << (options.json ? report_json(report) + "\n" : format_report(report));

  std::map<std::string, std::string> expect;
  for (const auto& token : options.expect) {
    const auto eq = token.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--expect: expected key=value, got '" + token + "'");
    const auto key = token.substr(0, eq);
    if (key != "fraction" && key != "tol" && key != "trainable" && key != "total") {
      throw ConfigError("--expect: unknown key '" + key + "' (expected fraction, tol, trainable or total)");
    }
    expect[key] = token.substr(eq + 1);
  }
  auto number = [](const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("--expect: value of '" + key + "' is not a number: '" + v + "'");
    }
  };
  auto integer = [](const std::string& key, std::string v) {
    v.erase(std::remove(v.begin(), v.end(), ','), v.end());
    try {
      std::size_t pos = 0;
      const auto n = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return static_cast<std::uint64_t>(n);
    } catch (const std::exception&) {
      throw ConfigError("--expect: value of '" + key + "' is not an integer: '" + v + "'");
    }
  };

  bool ok = true;
  if (expect.count("fraction")) {
    const double want = number("fraction", expect["fraction"]);
    const double tol = expect.count("tol") ? number("tol", expect["tol"]) : 0.005;
    if (std::abs(report.percent() - want) > tol) {
      err << fmt::format("expect: fraction {:.4f}% differs from {}% by more than {} points\n", report.percent(), want,
                         tol);
      ok = false;
    }
  }
  if (expect.count("trainable") && integer("trainable", expect["trainable"]) != report.trainable_params) {
    err << fmt::format("expect: trainable {} != {}\n", report.trainable_params, expect["trainable"]);
    ok = false;
  }
  if (expect.count("total") && integer("total", expect["total"]) != report.total_params) {
    err << fmt::format("expect: total {} != {}\n", report.total_params, expect["total"]);
    ok = false;
  }
  return ok ? kExitOk : kExitFailure;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Block-diagonal and low-rank adapter experiments"};
  app.name("diablo");
  app.require_subcommand(1);
  CommandOptions options;
  std::vector<std::string> configs;
  bool no_timing = false;

  auto add_common = [&](CLI::App* sub, bool multiple_configs) {
    if (multiple_configs) {
      sub->add_option("--config", configs, "Config file for A, then for B (repeat the flag)")->required();
    } else {
      sub->add_option("--config", configs, "Experiment config file")->required()->expected(1);
    }
    sub->add_option("--seed", options.seed, "Override the config seed");
    sub->add_option("--out", options.output_dir, "Override the output directory");
  };
  auto* train = app.add_subcommand("train", "Train an adapter on a synthetic task");
  add_common(train, false);
  train->add_flag("--no-timing", no_timing, "Write wall_ms as 0 so reruns are byte-identical");

  auto* bench = app.add_subcommand("bench", "Compare per-step time of two configs");
  add_common(bench, true);
  bench->add_option("--repeats", options.repeats, "Timed runs per config");
  bench->add_flag("--pin", options.pin, "Pin the process to one CPU");
  bench->add_flag("--json", options.json, "Structured output");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference and dense-reconstruction checks");
  add_common(gradcheck, false);
  gradcheck->add_flag("--corrupt-backward", options.corrupt_backward, "Negative control: perturb one gradient")
      ->group("");

  auto* params = app.add_subcommand("params", "Parameter and FLOP accounting");
  add_common(params, false);
  params->add_option("--expect", options.expect, "key=value checks: fraction (percent), tol, trainable, total");
  params->add_flag("--json", options.json, "Structured output");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  auto* active = app.get_subcommands().front();
  options.timing = !no_timing;

  try {
    if (active == bench) {
      if (configs.size() != 2) throw ConfigError("bench needs exactly two --config files");
      return cmd_bench(with_overrides(load_experiment_config(configs[0]), options),
                       with_overrides(load_experiment_config(configs[1]), options), options, out, err);
    }
    const auto config = with_overrides(load_experiment_config(configs.at(0)), options);
    if (active == train) return cmd_train(config, options, out, err);
    if (active == gradcheck) return cmd_gradcheck(config, options, out, err);
    return cmd_params(config, options, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace diablo::cli
