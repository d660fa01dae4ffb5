#include <doctest.h>

#include "diablo/ops.hpp"
#include "diablo/oracle.hpp"
#include "diablo/quant.hpp"
#include "test_util.hpp"

using namespace diablo;

TEST_CASE("frozen 4-bit example") {
  const auto w = Tensor<float>::matrix({{0.7f, -0.12f}, {-0.33f, 0.2f}, {0.05f, -0.9f}, {0.3f, 0.5f}});
  const auto qw = quantize(w, 4, 2);
  CHECK(qw.groups_per_column() == 2);
  CHECK(qw.packed_codes == std::vector<std::uint8_t>{0x4f, 0xf5, 0x19, 0xcf});
  CHECK(qw.code(1, 0) == 5);
  CHECK(qw.code(3, 1) == 12);
  CHECK(qw.scales[0] == 0.1f);
  CHECK(qw.scales[1] == doctest::Approx(0.2 / 7).epsilon(1e-7));
  CHECK(qw.scales[2] == doctest::Approx(0.3 / 7).epsilon(1e-7));
  CHECK(qw.scales[3] == doctest::Approx(0.9 / 7).epsilon(1e-7));
  const auto deq = dequantize<double>(qw);
  CHECK(deq(1, 0) == doctest::Approx(-0.3).epsilon(1e-7));
  CHECK(deq(3, 1) == doctest::Approx(0.514285683631897).epsilon(1e-7));
}

TEST_CASE("closed-form single group") {
  const auto w = Tensor<double>::matrix({{-1.0}, {1.0}, {0.5}});
  const auto qw = quantize(w, 4, 64);
  CHECK(qw.scales[0] == doctest::Approx(1.0 / 7));
  const auto deq = dequantize<double>(qw);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(deq[i] - w[i]) <= 1.0 / 14 + 1e-9);
}

TEST_CASE("zero weights round-trip exactly") {
  const auto qw = quantize(Tensor<float>({5, 3}), 2, 2);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(qw.code(r, c) == qw.zero_point());
  const auto deq = dequantize<float>(qw);
  for (float v : deq.data()) CHECK(v == 0.0f);
  Rng rng(1);
  const auto y = dequant_matmul(test_util::randn<float>(rng, {2, 5}), qw);
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("round-trip error is at most half a step in every group") {
  Rng rng(2);
  for (int bits : {2, 4}) {
    for (std::size_t gs : {std::size_t{64}, std::size_t{7}, std::size_t{1}}) {
      const auto w = test_util::randn<float>(rng, {130, 9});
      const auto qw = quantize(w, bits, gs);
      const auto deq = dequantize<float>(qw);
      for (std::size_t r = 0; r < 130; ++r)
        for (std::size_t c = 0; c < 9; ++c) {
          CHECK(qw.code(r, c) < (1u << bits));
          const double err = std::abs(static_cast<double>(deq(r, c)) - static_cast<double>(w(r, c)));
          CHECK(err <= 0.5 * qw.scale(r, c) * (1 + 1e-6));
        }
    }
  }
}

TEST_CASE("2-bit error dominates 4-bit error") {
  Rng rng(3);
  const auto w = test_util::randn<double>(rng, {64, 16});
  const double e4 = sum_squares(sub(dequantize<double>(quantize(w, 4)), w));
  const double e2 = sum_squares(sub(dequantize<double>(quantize(w, 2)), w));
  CHECK(e2 > e4);
}

TEST_CASE("dequant matmul equals dequantize-then-matmul bit-for-bit") {
  Rng rng(4);
  for (int bits : {2, 4}) {
    const auto w = test_util::randn<float>(rng, {100, 13});
    const auto qw = quantize(w, bits, 16);
    const auto x = test_util::randn<float>(rng, {6, 100});
    const auto deq = dequantize<float>(qw);
    CHECK(dequant_matmul(x, qw) == matmul(x, deq));
    const auto g = test_util::randn<float>(rng, {6, 13});
    CHECK(oracle::normwise_relative_error(dequant_matmul_nt(g, qw), oracle::reference_matmul(g, transpose(deq))) <
          1e-6);
    CHECK_THROWS_AS(dequant_matmul(test_util::randn<float>(rng, {6, 99}), qw), DimensionError);
  }
}

TEST_CASE("quantized identity stays within the propagated bound") {
  Rng rng(5);
  const auto qw = quantize(Tensor<double>::identity(8), 4, 4);
  const auto x = test_util::randn<double>(rng, {3, 8});
  const auto y = dequant_matmul(x, qw);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      double bound = 0;
      for (std::size_t k = 0; k < 8; ++k) bound += std::abs(x(i, k)) * 0.5 * qw.scale(k, j);
      CHECK(std::abs(y(i, j) - x(i, j)) <= bound + 1e-12);
    }
}

TEST_CASE("argument checks") {
  CHECK_THROWS_AS(quantize(Tensor<float>({4, 4}), 3), std::invalid_argument);
  CHECK_THROWS_AS(quantize(Tensor<float>({4, 4}), 4, 0), std::invalid_argument);
  CHECK_THROWS_AS(quantize(Tensor<float>({4}), 4), RankError);
}

TEST_CASE("checkpoint round trip") {
  test_util::TempDir dir;
  Rng rng(6);
  const auto qw = quantize(test_util::randn<float>(rng, {33, 5}), 2, 8);
  save_quantized(dir.str(), qw);
  const auto back = load_quantized(dir.str());
  CHECK(back.packed_codes == qw.packed_codes);
  CHECK(back.scales == qw.scales);
  CHECK(back.bits == 2);
  CHECK(back.group_size == 8);
  CHECK(dequantize<float>(back) == dequantize<float>(qw));
}
