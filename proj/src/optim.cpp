#include "diablo/optim.hpp"

#include <cmath>

namespace diablo {

std::string schedule_name(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "constant"; }

ScheduleKind parse_schedule(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "constant") return ScheduleKind::constant;
  throw ConfigError("unknown lr schedule '" + name + "' (expected linear or constant)");
}

double LrSchedule::at(std::size_t step) const {
  if (step == 0) return 0.0;
  if (step <= warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (kind == ScheduleKind::constant) return base_lr;
  if (step >= total_steps) return 0.0;
  return base_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup_steps);
}

template <typename T>
void AdamW<T>::step(std::span<const Parameter<T>> params, double lr) {
  for (const auto& p : params) {
    if (p.value->shape() != p.grad->shape()) {
      throw DimensionError("AdamW: gradient of '" + p.name + "' has shape " + shape_to_string(p.grad->shape()) +
                           ", parameter has " + shape_to_string(p.value->shape()));
    }
    if (!p.grad->all_finite()) throw NonFiniteGradientError("non-finite gradient in '" + p.name + "'");
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value->shape());
      v_.emplace_back(p.value->shape());
    }
  } else if (m_.size() != params.size()) {
    throw DimensionError("AdamW: parameter list changed between steps");
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double decay = 1.0 - lr * config_.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].value->data();
    auto grad = params[k].grad->data();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + config_.eps);
      value[i] = static_cast<T>(decay * value[i] - lr * update);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace diablo
