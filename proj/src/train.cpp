#include "diablo/train.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <numeric>

#include "diablo/adapters.hpp"
#include "diablo/ops.hpp"

namespace diablo {

std::string task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::blockdiag_teacher: return "blockdiag_teacher";
    case TaskKind::lowrank_teacher: return "lowrank_teacher";
    case TaskKind::classification: return "classification";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  for (auto k : {TaskKind::blockdiag_teacher, TaskKind::lowrank_teacher, TaskKind::classification})
    if (task_kind_name(k) == name) return k;
  throw ConfigError("unknown task kind '" + name + "' (expected blockdiag_teacher, lowrank_teacher or classification)");
}

template <typename T>
SyntheticTask<T> make_task(const TaskSpec& spec) {
  const std::size_t m1 = spec.in_features, m2 = spec.out_features;
  if (m1 == 0 || m2 == 0 || spec.samples == 0) throw ConfigError("task dimensions and sample count must be >= 1");
  Rng root(spec.seed);
  Rng base_rng = root.fork(1), delta_rng = root.fork(2), input_rng = root.fork(3), noise_rng = root.fork(4);

  SyntheticTask<T> task;
  task.spec = spec;
  task.base = rand_normal<T>(base_rng, {m1, m2}, 1.0 / std::sqrt(static_cast<double>(m1)));

  if (spec.kind == TaskKind::lowrank_teacher) {
    if (spec.rank == 0 || spec.rank > std::min(m1, m2)) throw ConfigError("lowrank teacher needs 1 <= rank <= min(m1, m2)");
    auto p = rand_normal<T>(delta_rng, {m1, spec.rank}, 1.0 / std::sqrt(static_cast<double>(m1)));
    auto q = rand_normal<T>(delta_rng, {spec.rank, m2}, 1.0);
    task.delta = matmul(p, q, {.accumulate_f64 = true});
  } else {
    if (spec.num_blocks == 0) throw ConfigError("block-diagonal teacher needs blocks >= 1");
    auto ad = init_diablo<T>(m1, m2, spec.num_blocks);
    const double sd = 1.0 / std::sqrt(static_cast<double>(ad.block_rows));
    for (auto& v : ad.blocks.data()) v = static_cast<T>(sd * delta_rng.normal());
    task.delta = dense_form(ad);
  }
  if (spec.delta_scale != 1.0) scale_inplace(task.delta, static_cast<T>(spec.delta_scale));

  task.inputs = rand_normal<T>(input_rng, {spec.samples, m1}, 1.0);
  task.targets = matmul(task.inputs, add(task.base, task.delta));
  if (spec.noise != 0.0) axpy_inplace(task.targets, T(1), rand_normal<T>(noise_rng, {spec.samples, m2}, spec.noise));

  if (spec.kind == TaskKind::classification) {
    task.labels.resize(spec.samples);
    for (std::size_t i = 0; i < spec.samples; ++i) {
      const T* row = task.targets.raw() + i * m2;
      task.labels[i] = static_cast<std::size_t>(std::max_element(row, row + m2) - row);
    }
  }
  return task;
}

template <typename T>
double mse_loss(const Tensor<T>& y, const Tensor<T>& target, Tensor<T>* grad) {
  require_same_shape(y.shape(), target.shape(), "mse_loss");
  const double n = static_cast<double>(y.size());
  double sum = 0.0;
  if (grad) *grad = Tensor<T>(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = static_cast<double>(y[i]) - static_cast<double>(target[i]);
    sum += r * r;
    if (grad) (*grad)[i] = static_cast<T>(2.0 * r / n);
  }
  return sum / n;
}

template <typename T>
double cross_entropy_loss(const Tensor<T>& y, const std::vector<std::size_t>& labels, Tensor<T>* grad) {
  if (y.rank() != 2 || y.dim(0) != labels.size()) throw DimensionError("cross_entropy_loss: label count mismatch");
  const std::size_t b = y.dim(0), c = y.dim(1);
  if (grad) *grad = Tensor<T>(y.shape());
  double total = 0.0;
  std::vector<double> p(c);
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(y(i, j)));
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += (p[j] = std::exp(static_cast<double>(y(i, j)) - mx));
    total += -(static_cast<double>(y(i, labels[i])) - mx - std::log(denom));
    if (grad) {
      for (std::size_t j = 0; j < c; ++j) {
        (*grad)(i, j) = static_cast<T>((p[j] / denom - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(b));
      }
    }
  }
  return total / static_cast<double>(b);
}

template <typename T>
Trainer<T>::Trainer(Model<T>& model, const SyntheticTask<T>& task, TrainOptions options)
    : model_(model),
      task_(task),
      options_(options),
      loss_kind_(task.spec.kind == TaskKind::classification ? LossKind::cross_entropy : LossKind::mse),
      optimizer_(options.adamw),
      batch_rng_(Rng(options.seed).fork(0xba7c4)) {
  options_.schedule.total_steps = options_.steps;
}

template <typename T>
Tensor<T> Trainer<T>::gather_rows(const Tensor<T>& src, const std::vector<std::size_t>& rows) const {
  const std::size_t w = src.dim(1);
  Tensor<T> out({rows.size(), w});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(src.raw() + rows[i] * w, w, out.raw() + i * w);
  return out;
}

template <typename T>
bool Trainer<T>::step() {
  if (diverged_) return false;
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = task_.inputs.dim(0);
  std::vector<std::size_t> rows;
  if (options_.batch_size == 0 || options_.batch_size >= n) {
    rows.resize(n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  } else {
    rows.resize(options_.batch_size);
    for (auto& r : rows) r = static_cast<std::size_t>(batch_rng_.below(n));
  }
  const auto xb = gather_rows(task_.inputs, rows);
  const auto y = model_.forward(xb);
  Tensor<T> g_y;
  double loss = 0.0;
  if (loss_kind_ == LossKind::mse) {
    loss = mse_loss(y, gather_rows(task_.targets, rows), &g_y);
  } else {
    std::vector<std::size_t> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = task_.labels[rows[i]];
    loss = cross_entropy_loss(y, labels, &g_y);
  }
  if (!std::isfinite(loss)) {
    diverged_ = true;
    reason_ = "non-finite loss at step " + std::to_string(steps_done_ + 1);
    return false;
  }
  model_.zero_grad();
  model_.backward(g_y);
  auto params = model_.parameters();
  double sq = 0.0;
  for (const auto& p : params) sq += sum_squares(*p.grad);
  const std::size_t step_index = steps_done_ + 1;
  const double lr = options_.schedule.at(step_index);
  try {
    optimizer_.step(params, lr);
  } catch (const NonFiniteGradientError& e) {
    diverged_ = true;
    reason_ = std::string(e.what()) + " at step " + std::to_string(step_index);
    return false;
  }
  steps_done_ = step_index;
  const auto end = std::chrono::steady_clock::now();
  trace_.push_back({step_index, loss, std::sqrt(sq), lr,
                    std::chrono::duration<double, std::milli>(end - start).count()});
  return true;
}

template <typename T>
double Trainer<T>::evaluate() {
  const auto y = model_.forward(task_.inputs);
  return loss_kind_ == LossKind::mse ? mse_loss<T>(y, task_.targets, nullptr)
                                     : cross_entropy_loss<T>(y, task_.labels, nullptr);
}

template <typename T>
TrainResult train(Model<T>& model, const SyntheticTask<T>& task, const TrainOptions& options) {
  Trainer<T> trainer(model, task, options);
  TrainResult result;
  result.initial_loss = trainer.evaluate();
  for (std::size_t s = 0; s < options.steps; ++s) {
    if (!trainer.step()) break;
  }
  result.trace = trainer.trace();
  result.final_loss = trainer.evaluate();
  result.diverged = trainer.diverged();
  result.divergence_reason = trainer.divergence_reason();
  if (!result.diverged && !std::isfinite(result.final_loss)) {
    result.diverged = true;
    result.divergence_reason = "non-finite final loss";
  }
  result.best_loss = result.final_loss;
  for (const auto& m : result.trace) result.best_loss = std::min(result.best_loss, m.loss);
  return result;
}

std::string metrics_csv(const std::vector<StepMetrics>& trace, bool include_wall_time) {
  std::string out = "step,loss,grad_norm,lr,wall_ms\n";
  for (const auto& m : trace) {
    out += fmt::format("{},{:.9e},{:.9e},{:.9e},{:.3f}\n", m.step, m.loss, m.grad_norm, m.lr,
                       include_wall_time ? m.wall_ms : 0.0);
  }
  return out;
}

template SyntheticTask<float> make_task<float>(const TaskSpec&);
template SyntheticTask<double> make_task<double>(const TaskSpec&);
template double mse_loss(const Tensor<float>&, const Tensor<float>&, Tensor<float>*);
template double mse_loss(const Tensor<double>&, const Tensor<double>&, Tensor<double>*);
template double cross_entropy_loss(const Tensor<float>&, const std::vector<std::size_t>&, Tensor<float>*);
template double cross_entropy_loss(const Tensor<double>&, const std::vector<std::size_t>&, Tensor<double>*);
template class Trainer<float>;
template class Trainer<double>;
template TrainResult train(Model<float>&, const SyntheticTask<float>&, const TrainOptions&);
template TrainResult train(Model<double>&, const SyntheticTask<double>&, const TrainOptions&);

}  // namespace diablo
