#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "diablo/model.hpp"
#include "diablo/optim.hpp"
#include "diablo/rng.hpp"
#include "diablo/tensor.hpp"

namespace diablo {

enum class TaskKind { blockdiag_teacher, lowrank_teacher, classification };

std::string task_kind_name(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::blockdiag_teacher;
  std::size_t in_features = 16;
  std::size_t out_features = 16;
  std::size_t num_blocks = 4;  // block count of the teacher delta (blockdiag, classification)
  std::size_t rank = 4;        // rank of the teacher delta (lowrank)
  double noise = 0.0;
  std::size_t samples = 256;
  double delta_scale = 1.0;  // 0 gives a teacher equal to the frozen base
  std::uint64_t seed = 0;
};

/// Teacher y = x·(W + Δ) + noise·ε with x ~ N(0, I). The student is W (frozen) plus an adapter.
/// For classification the label is the argmax of the noisy teacher logits.
template <typename T>
struct SyntheticTask {
  TaskSpec spec;
  Tensor<T> base;     // W, m₁×m₂
  Tensor<T> delta;    // Δ, m₁×m₂
  Tensor<T> inputs;   // samples×m₁
  Tensor<T> targets;  // samples×m₂ (teacher outputs; logits for classification)
  std::vector<std::size_t> labels;  // classification only
};

/// Block-diagonal Δ has entries N(0, 1/d₁) inside the blocks; low-rank Δ = P·Q with
/// P ~ N(0, 1/m₁) and Q ~ N(0, 1). Both give E‖xΔ‖²/m₂ ≈ 1.
template <typename T>
SyntheticTask<T> make_task(const TaskSpec& spec);

enum class LossKind { mse, cross_entropy };

/// Mean over all b·m₂ entries of (y − t)². Writes dL/dy into `grad` when non-null.
template <typename T>
double mse_loss(const Tensor<T>& y, const Tensor<T>& target, Tensor<T>* grad);

/// Mean over rows of −log softmax(y)[label]. Writes dL/dy into `grad` when non-null.
template <typename T>
double cross_entropy_loss(const Tensor<T>& y, const std::vector<std::size_t>& labels, Tensor<T>* grad);

struct TrainOptions {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;  // >= samples means full-batch
  std::uint64_t seed = 0;
  LrSchedule schedule;          // total_steps is overwritten with `steps`
  AdamWConfig adamw;
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;  // batch loss before the update
  double grad_norm = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  std::vector<StepMetrics> trace;
  bool diverged = false;
  std::string divergence_reason;
  double initial_loss = 0.0;  // full-dataset loss before training
  double final_loss = 0.0;    // full-dataset loss after training
  double best_loss = 0.0;
};

/// Step-at-a-time driver over a model and a task; `train` loops it, `bench` times it.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, const SyntheticTask<T>& task, TrainOptions options);

  /// One optimizer step. Returns false (and records the reason) on divergence.
  bool step();
  /// Loss of the current model over the whole dataset.
  double evaluate();

  const std::vector<StepMetrics>& trace() const noexcept { return trace_; }
  bool diverged() const noexcept { return diverged_; }
  const std::string& divergence_reason() const noexcept { return reason_; }
  std::size_t steps_done() const noexcept { return steps_done_; }

 private:
  Tensor<T> gather_rows(const Tensor<T>& src, const std::vector<std::size_t>& rows) const;

  Model<T>& model_;
  const SyntheticTask<T>& task_;
  TrainOptions options_;
  LossKind loss_kind_;
  AdamW<T> optimizer_;
  Rng batch_rng_;
  std::vector<StepMetrics> trace_;
  std::size_t steps_done_ = 0;
  bool diverged_ = false;
  std::string reason_;
};

template <typename T>
TrainResult train(Model<T>& model, const SyntheticTask<T>& task, const TrainOptions& options);

/// Header `step,loss,grad_norm,lr,wall_ms`. With `include_wall_time == false` the wall_ms column
/// is written as 0 so that repeated runs are byte-identical.
std::string metrics_csv(const std::vector<StepMetrics>& trace, bool include_wall_time = true);

}  // namespace diablo
