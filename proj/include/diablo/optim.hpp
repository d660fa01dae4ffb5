#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diablo/model.hpp"
#include "diablo/tensor.hpp"

namespace diablo {

enum class ScheduleKind { linear, constant };

std::string schedule_name(ScheduleKind kind);
ScheduleKind parse_schedule(const std::string& name);

/// Learning rate for 1-based step t: ramps base·t/warmup over the first `warmup_steps`
/// steps, then either holds (constant) or falls linearly to exactly 0 at `total_steps`.
struct LrSchedule {
  double base_lr = 1e-2;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 1000;
  ScheduleKind kind = ScheduleKind::linear;

  double at(std::size_t step) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class NonFiniteGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// AdamW with bias correction and decoupled weight decay:
///   m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
///   p ← p − lr·λ·p − lr·m̂/(√v̂ + ε)
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// Applies one update. If any gradient is NaN/Inf nothing is modified and
  /// NonFiniteGradientError names the offending parameter.
  void step(std::span<const Parameter<T>> params, double lr);

  std::size_t step_count() const noexcept { return step_; }
  const AdamWConfig& config() const noexcept { return config_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

 private:
  AdamWConfig config_;
  std::size_t step_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

}  // namespace diablo
