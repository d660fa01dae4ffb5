#include <doctest.h>

#include "diablo/optim.hpp"
#include "diablo/oracle.hpp"
#include "diablo/train.hpp"
#include "test_util.hpp"

using namespace diablo;

TEST_CASE("learning-rate schedule") {
  LrSchedule s{.base_lr = 1.0, .warmup_steps = 4, .total_steps = 12};
  CHECK(s.at(1) == 0.25);
  CHECK(s.at(4) == 1.0);
  CHECK(s.at(8) == 0.5);
  CHECK(s.at(12) == 0.0);
  for (std::size_t t = 5; t <= 12; ++t) CHECK(s.at(t) <= s.at(t - 1));
  s.kind = ScheduleKind::constant;
  CHECK(s.at(2) == 0.5);
  CHECK(s.at(12) == 1.0);
  LrSchedule no_warmup{.base_lr = 2.0, .warmup_steps = 0, .total_steps = 4};
  CHECK(no_warmup.at(1) == 1.5);
  CHECK(parse_schedule("constant") == ScheduleKind::constant);
  CHECK_THROWS_AS(parse_schedule("cosine"), ConfigError);
}

TEST_CASE("AdamW matches a scalar reference") {
  Tensor<double> p = Tensor<double>::full({1}, 1.0), g({1});
  std::vector<Parameter<double>> params{{"p", &p, &g}};
  AdamW<double> opt({.beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01});
  // Reference trajectory from a direct transcription of the update rule.
  const double grads[] = {0.5, -0.25, 1.0};
  const double expected[] = {0.899000002, 0.8714672987058463, 0.804784672376384};
  for (int t = 0; t < 3; ++t) {
    g[0] = grads[t];
    opt.step(params, 0.1);
    CHECK(p[0] == doctest::Approx(expected[t]).epsilon(1e-14));
  }
  CHECK(opt.step_count() == 3);
}

TEST_CASE("AdamW refuses non-finite gradients without touching anything") {
  Tensor<float> a = Tensor<float>::full({2}, 1.0f), ga = Tensor<float>::full({2}, 0.5f);
  Tensor<float> b = Tensor<float>::full({2}, 2.0f), gb({2});
  gb[1] = std::numeric_limits<float>::quiet_NaN();
  std::vector<Parameter<float>> params{{"a", &a, &ga}, {"b", &b, &gb}};
  AdamW<float> opt;
  try {
    opt.step(params, 0.1);
    FAIL("expected NonFiniteGradientError");
  } catch (const NonFiniteGradientError& e) {
    CHECK(std::string(e.what()).find("'b'") != std::string::npos);
  }
  CHECK(a[0] == 1.0f);
  CHECK(opt.step_count() == 0);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(1);
  auto y = test_util::randn<double>(rng, {3, 4});
  const auto t = test_util::randn<double>(rng, {3, 4});
  const std::vector<std::size_t> labels{0, 3, 1};
  Tensor<double> g_mse, g_ce;
  mse_loss(y, t, &g_mse);
  cross_entropy_loss(y, labels, &g_ce);
  const auto n_mse = oracle::finite_diff_grad([&] { return mse_loss<double>(y, t, nullptr); }, y.data());
  const auto n_ce = oracle::finite_diff_grad([&] { return cross_entropy_loss<double>(y, labels, nullptr); }, y.data());
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(oracle::relative_error(g_mse[i], n_mse[i]) < 1e-7);
    CHECK(oracle::relative_error(g_ce[i], n_ce[i]) < 1e-7);
  }
  CHECK(mse_loss<double>(t, t, nullptr) == 0.0);
}

TEST_CASE("synthetic tasks") {
  TaskSpec spec{.kind = TaskKind::blockdiag_teacher, .in_features = 12, .out_features = 8, .num_blocks = 4};
  const auto a = make_task<double>(spec);
  const auto b = make_task<double>(spec);
  CHECK(a.targets == b.targets);
  CHECK(oracle::best_subspace_error(a.delta, oracle::Subspace::blockdiag(4)) == 0.0);
  CHECK(oracle::best_subspace_error(a.delta, oracle::Subspace::blockdiag(3)) > 0.0);  // 2 would nest the teacher's blocks

  spec.kind = TaskKind::lowrank_teacher;
  spec.rank = 3;
  const auto lr = make_task<double>(spec);
  CHECK(oracle::best_subspace_error(lr.delta, oracle::Subspace::rank_r(3)) < 1e-12);
  CHECK(oracle::best_subspace_error(lr.delta, oracle::Subspace::rank_r(2)) > 0.1);

  spec.kind = TaskKind::classification;
  const auto cls = make_task<float>(spec);
  REQUIRE(cls.labels.size() == spec.samples);
  for (auto l : cls.labels) CHECK(l < 8);

  spec.seed = 1;
  CHECK_FALSE(make_task<double>(spec).inputs == cls.inputs.cast<double>());
  spec.delta_scale = 0.0;
  const auto flat = make_task<double>(spec);
  for (double v : flat.delta.data()) CHECK(v == 0.0);
}

TEST_CASE("training is deterministic and reduces the loss") {
  TaskSpec spec{.kind = TaskKind::blockdiag_teacher, .in_features = 8, .out_features = 8, .num_blocks = 2,
                .samples = 64};
  const auto task = make_task<float>(spec);
  TrainOptions opts;
  opts.steps = 300;
  opts.batch_size = 16;
  opts.seed = 3;
  auto run = [&] {
    LinearModel<float> model(task.base);
    Rng rng(5);
    attach_adapters<float>(model, {AdapterKind::diablo, 2, 0, 1.0}, {ModuleTag::generic}, rng);
    return train(model, task, opts);
  };
  const auto r1 = run(), r2 = run();
  CHECK(metrics_csv(r1.trace, false) == metrics_csv(r2.trace, false));
  CHECK(r1.trace.size() == 300);
  CHECK(r1.final_loss < 0.1 * r1.initial_loss);
  CHECK_FALSE(r1.diverged);
}

TEST_CASE("classification training") {
  TaskSpec spec{.kind = TaskKind::classification, .in_features = 8, .out_features = 4, .num_blocks = 2,
                .samples = 128, .delta_scale = 3.0};
  const auto task = make_task<double>(spec);
  LinearModel<double> model(task.base);
  Rng rng(6);
  attach_adapters<double>(model, {AdapterKind::lora, 0, 2, 1.0}, {ModuleTag::generic}, rng);
  TrainOptions opts;
  opts.steps = 400;
  opts.batch_size = 0;
  const auto r = train(model, task, opts);
  CHECK(r.final_loss < r.initial_loss);
}

TEST_CASE("divergence is detected and reported") {
  TaskSpec spec{.in_features = 4, .out_features = 4, .num_blocks = 2, .samples = 16};
  auto task = make_task<float>(spec);
  task.targets[0] = std::numeric_limits<float>::infinity();
  LinearModel<float> model(task.base);
  Rng rng(7);
  attach_adapters<float>(model, {AdapterKind::diablo, 2, 0, 1.0}, {ModuleTag::generic}, rng);
  TrainOptions opts;
  opts.steps = 10;
  opts.batch_size = 0;
  const auto r = train(model, task, opts);
  CHECK(r.diverged);
  CHECK(r.divergence_reason.find("step 1") != std::string::npos);
  CHECK(r.trace.empty());
}

TEST_CASE("metrics csv") {
  CHECK(metrics_csv({}) == "step,loss,grad_norm,lr,wall_ms\n");
  const std::vector<StepMetrics> trace{{1, 0.5, 2.0, 1e-3, 12.3456}};
  CHECK(metrics_csv(trace) == "step,loss,grad_norm,lr,wall_ms\n1,5.000000000e-01,2.000000000e+00,1.000000000e-03,12.346\n");
  CHECK(metrics_csv(trace, false).ends_with(",0.000\n"));
}
