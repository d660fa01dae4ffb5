#include <doctest.h>

#include "diablo/ops.hpp"
#include "diablo/oracle.hpp"
#include "test_util.hpp"

using namespace diablo;

TEST_CASE("matmul small literal") {
  auto a = Tensor<double>::matrix({{1, 2}, {3, 4}, {5, 6}});
  auto b = Tensor<double>::matrix({{1, 0, -1}, {2, 1, 0}});
  auto c = matmul(a, b);
  CHECK(c == Tensor<double>::matrix({{5, 2, -1}, {11, 4, -3}, {17, 6, -5}}));
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
  CHECK_THROWS_AS(matmul(Tensor<double>({2}), b), RankError);
}

TEST_CASE("matmul variants agree with the reference") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = test_util::uniform_int(rng, 1, 9), q = test_util::uniform_int(rng, 1, 9),
               s = test_util::uniform_int(rng, 1, 9);
    auto a = test_util::randn<double>(rng, {p, q});
    auto b = test_util::randn<double>(rng, {q, s});
    const auto ref = oracle::reference_matmul(a, b);
    CHECK(oracle::normwise_relative_error(matmul(a, b), ref) < 1e-14);
    CHECK(oracle::normwise_relative_error(matmul_tn(transpose(a), b), ref) < 1e-14);
    CHECK(oracle::normwise_relative_error(matmul_nt(a, transpose(b)), ref) < 1e-14);
    auto af = a.cast<float>(), bf = b.cast<float>();
    CHECK(oracle::normwise_relative_error(matmul(af, bf, {.accumulate_f64 = true}), oracle::reference_matmul(af, bf)) <
          1e-6);
  }
}

TEST_CASE("batched matmul is an independent product per block") {
  Rng rng(12);
  const std::size_t b = 3, n = 4, d1 = 2, d2 = 5;
  auto x = test_util::randn<double>(rng, {b, n, d1});
  auto d = test_util::randn<double>(rng, {n, d1, d2});
  auto y = batched_matmul(x, d);
  REQUIRE(y.shape() == Shape{b, n, d2});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t c = 0; c < d2; ++c) {
        double acc = 0;
        for (std::size_t r = 0; r < d1; ++r) acc += x(i, k, r) * d(k, r, c);
        CHECK(y(i, k, c) == doctest::Approx(acc).epsilon(1e-14));
      }

  auto g = test_util::randn<double>(rng, {b, n, d2});
  auto gw = batched_matmul_weight_grad(x, g);
  auto gx = batched_matmul_input_grad(g, d);
  REQUIRE(gw.shape() == d.shape());
  REQUIRE(gx.shape() == x.shape());
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t r = 0; r < d1; ++r) {
      for (std::size_t c = 0; c < d2; ++c) {
        double acc = 0;
        for (std::size_t i = 0; i < b; ++i) acc += x(i, k, r) * g(i, k, c);
        CHECK(gw(k, r, c) == doctest::Approx(acc).epsilon(1e-14));
      }
      for (std::size_t i = 0; i < b; ++i) {
        double acc = 0;
        for (std::size_t c = 0; c < d2; ++c) acc += g(i, k, c) * d(k, r, c);
        CHECK(gx(i, k, r) == doctest::Approx(acc).epsilon(1e-14));
      }
    }
  CHECK_THROWS_AS(batched_matmul(x, test_util::randn<double>(rng, {n + 1, d1, d2})), DimensionError);
}

TEST_CASE("elementwise helpers") {
  auto a = Tensor<float>::matrix({{1, 2}, {3, 4}});
  auto b = Tensor<float>::matrix({{1, 1}, {1, 1}});
  CHECK(add(a, b) == Tensor<float>::matrix({{2, 3}, {4, 5}}));
  CHECK(sub(a, b) == Tensor<float>::matrix({{0, 1}, {2, 3}}));
  axpy_inplace(a, 2.0f, b);
  CHECK(a == Tensor<float>::matrix({{3, 4}, {5, 6}}));
  scale_inplace(a, 0.5f);
  CHECK(sum_squares(a) == doctest::Approx(0.25 * (9 + 16 + 25 + 36)));
  CHECK_THROWS_AS(add_inplace(a, Tensor<float>({3, 2})), DimensionError);
  CHECK(transpose(Tensor<float>::matrix({{1, 2, 3}})) == Tensor<float>::matrix({{1}, {2}, {3}}));
}

TEST_CASE("random initializers") {
  Rng rng(5);
  auto k = rand_kaiming_uniform<double>(rng, 24, 7);
  const double bound = std::sqrt(6.0 / 24.0);
  for (double v : k.data()) CHECK(std::abs(v) <= bound);
  auto n = rand_normal<double>(rng, {200, 50}, 2.0);
  double mean = 0, sq = 0;
  for (double v : n.data()) {
    mean += v / n.size();
    sq += v * v / n.size();
  }
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::sqrt(sq) == doctest::Approx(2.0).epsilon(0.03));
}
