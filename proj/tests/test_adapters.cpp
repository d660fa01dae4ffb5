#include <doctest.h>

#include "diablo/adapters.hpp"
#include "diablo/ops.hpp"
#include "diablo/oracle.hpp"
#include "test_util.hpp"

using namespace diablo;

namespace {

template <typename T>
BlockDiagonalAdapter<T> random_diablo(Rng& rng, std::size_t m1, std::size_t m2, std::size_t n) {
  auto ad = init_diablo<T>(m1, m2, n);
  for (auto& v : ad.blocks.data()) v = static_cast<T>(rng.normal());
  return ad;
}

}  // namespace

TEST_CASE("block geometry uses ceilings and records padding") {
  auto ad = init_diablo<float>(10, 7, 4);
  CHECK(ad.block_rows == 3);
  CHECK(ad.block_cols == 2);
  CHECK(ad.pad_in == 2);
  CHECK(ad.pad_out == 1);
  CHECK(ad.blocks.shape() == Shape{4, 3, 2});
  CHECK(ad.parameter_count() == 24);
  for (float v : ad.blocks.data()) CHECK(v == 0.0f);
  CHECK_THROWS(init_diablo<float>(4, 4, 0));

  auto sq = init_diablo<float>(10, 6, 4);
  CHECK(sq.block_rows == 3);
  CHECK(sq.block_cols == 2);
  CHECK(sq.pad_in == 2);
  CHECK(sq.pad_out == 2);
  auto down = init_diablo<float>(11008, 4096, 128);
  CHECK(down.block_rows == 86);
  CHECK(down.block_cols == 32);
  CHECK(down.pad_in + down.pad_out == 0);
  // More blocks than features is legal: the surplus blocks are entirely virtual.
  auto wide = init_diablo<float>(4, 4, 5);
  CHECK(wide.block_rows == 1);
  CHECK(wide.pad_in == 1);
}

TEST_CASE("hand-expanded forward and backward") {
  auto ad = init_diablo<double>(4, 4, 2);
  ad.blocks(0, 0, 0) = 1;
  ad.blocks(0, 1, 1) = 1;
  ad.blocks(1, 0, 0) = 2;
  ad.blocks(1, 1, 1) = 2;
  const auto x = Tensor<double>::matrix({{1, 2, 3, 4}});
  CHECK(diablo_forward(x, Tensor<double>({1, 4}), ad) == Tensor<double>::matrix({{1, 2, 6, 8}}));

  const auto bw = diablo_backward(x, Tensor<double>::matrix({{1, 0, 0, 1}}), ad);
  CHECK(bw.grads.blocks == Tensor<double>({2, 2, 2}, {1, 0, 2, 0, 0, 3, 0, 4}));
  const auto zero = diablo_backward(x, Tensor<double>({1, 4}), ad);
  for (double v : zero.grads.blocks.data()) CHECK(v == 0.0);
}

TEST_CASE("zero adapters leave the base output bit-identical") {
  Rng rng(1);
  auto x = test_util::randn<float>(rng, {5, 10});
  auto w = test_util::randn<float>(rng, {10, 7});
  const auto base = matmul(x, w);
  CHECK(diablo_forward(x, base, init_diablo<float>(10, 7, 4)) == base);
  CHECK(lora_forward(x, base, init_lora<float>(10, 7, 3, rng)) == base);
}

TEST_CASE("diablo forward matches the dense reconstruction") {
  Rng rng(2);
  for (auto [m1, m2, n] : {std::tuple{8, 8, 2}, {10, 6, 4}, {5, 9, 3}, {7, 7, 7}, {4, 4, 1}}) {
    auto ad = random_diablo<double>(rng, m1, m2, n);
    auto x = test_util::randn<double>(rng, {3, static_cast<std::size_t>(m1)});
    const auto ref = oracle::reference_matmul(x, oracle::dense_blockdiag(ad));
    CHECK(oracle::normwise_relative_error(diablo_delta(x, ad), ref) < 1e-14);
    CHECK(oracle::normwise_relative_error(dense_form(ad), oracle::dense_blockdiag(ad)) == 0.0);
  }
}

TEST_CASE("diablo block gradients are the diagonal blocks of the full gradient") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const auto b = test_util::uniform_int(rng, 1, 6), m1 = test_util::uniform_int(rng, 1, 12),
               m2 = test_util::uniform_int(rng, 1, 12);
    const auto n = test_util::uniform_int(rng, 1, std::min(m1, m2));
    auto ad = random_diablo<double>(rng, m1, m2, n);
    auto x = test_util::randn<double>(rng, {b, m1});
    auto gy = test_util::randn<double>(rng, {b, m2});
    const auto bw = diablo_backward(x, gy, ad);
    const auto full = oracle::full_gradient(x, gy);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t r = 0; r < ad.block_rows; ++r)
        for (std::size_t c = 0; c < ad.block_cols; ++c) {
          const std::size_t row = k * ad.block_rows + r, col = k * ad.block_cols + c;
          const double expected = (row < m1 && col < m2) ? full(row, col) : 0.0;
          CHECK(bw.grads.blocks(k, r, c) == doctest::Approx(expected).epsilon(1e-12));
        }
    // g_x = g_y Dᵀ
    const auto gx_ref = oracle::reference_matmul(gy, transpose(oracle::dense_blockdiag(ad)));
    CHECK(oracle::normwise_relative_error(bw.g_x, gx_ref) < 1e-13);
  }
}

TEST_CASE("lora forward and backward") {
  Rng rng(4);
  auto ad = init_lora<double>(6, 5, 2, rng, 0.5);
  CHECK(ad.parameter_count() == 2 * (6 + 5));
  for (double v : ad.b.data()) CHECK(v == 0.0);
  const double bound = std::sqrt(6.0 / 6.0);
  for (double v : ad.a.data()) CHECK(std::abs(v) <= bound);
  {
    auto x0 = test_util::randn<double>(rng, {4, 6});
    const auto at_init = lora_backward(x0, test_util::randn<double>(rng, {4, 5}), ad);
    for (double v : at_init.grads.a.data()) CHECK(v == 0.0);
    CHECK(sum_squares(at_init.grads.b) > 0.0);
  }
  {
    LoRAAdapter<double> id{Tensor<double>::identity(3), Tensor<double>::identity(3), 3, 1.0};
    auto x0 = test_util::randn<double>(rng, {2, 3});
    auto w0 = test_util::randn<double>(rng, {2, 3});
    CHECK(lora_forward(x0, w0, id) == add(w0, x0));
  }
  for (auto& v : ad.b.data()) v = rng.normal();

  auto x = test_util::randn<double>(rng, {4, 6});
  auto gy = test_util::randn<double>(rng, {4, 5});
  auto dense = oracle::reference_matmul(ad.a, ad.b);
  for (auto& v : dense.data()) v *= 0.5;
  CHECK(oracle::normwise_relative_error(lora_delta(x, ad), oracle::reference_matmul(x, dense)) < 1e-14);
  CHECK(oracle::normwise_relative_error(dense_form(ad), dense) < 1e-14);

  const auto bw = lora_backward(x, gy, ad);
  // g_A = s Xᵀ g_Y Bᵀ, g_B = s (XA)ᵀ g_Y
  auto ga = oracle::reference_matmul(oracle::full_gradient(x, gy), transpose(ad.b));
  for (auto& v : ga.data()) v *= 0.5;
  auto gb = oracle::full_gradient(oracle::reference_matmul(x, ad.a), gy);
  for (auto& v : gb.data()) v *= 0.5;
  CHECK(oracle::normwise_relative_error(bw.grads.a, ga) < 1e-13);
  CHECK(oracle::normwise_relative_error(bw.grads.b, gb) < 1e-13);
  CHECK(oracle::normwise_relative_error(bw.g_x, oracle::reference_matmul(gy, transpose(dense))) < 1e-13);
}

TEST_CASE("merging equals the adapted forward") {
  Rng rng(5);
  auto w = test_util::randn<double>(rng, {10, 6});
  auto x = test_util::randn<double>(rng, {3, 10});
  auto bd = random_diablo<double>(rng, 10, 6, 4);
  CHECK(oracle::normwise_relative_error(matmul(x, merge_adapter(w, bd)),
                                        oracle::to_f64(diablo_forward(x, matmul(x, w), bd))) < 1e-14);
  auto lo = init_lora<double>(10, 6, 3, rng);
  for (auto& v : lo.b.data()) v = rng.normal();
  CHECK(oracle::normwise_relative_error(matmul(x, merge_adapter(w, lo)),
                                        oracle::to_f64(lora_forward(x, matmul(x, w), lo))) < 1e-14);
  CHECK_THROWS_AS(merge_adapter(test_util::randn<double>(rng, {9, 6}), bd), DimensionError);
}

TEST_CASE("adapter shape errors") {
  Rng rng(6);
  auto bd = init_diablo<float>(8, 8, 2);
  CHECK_THROWS_AS(diablo_delta(Tensor<float>({2, 7}), bd), DimensionError);
  CHECK_THROWS_AS(diablo_backward(Tensor<float>({2, 8}), Tensor<float>({3, 8}), bd), DimensionError);
  auto lo = init_lora<float>(8, 8, 2, rng);
  CHECK_THROWS_AS(lora_delta(Tensor<float>({2, 7}), lo), DimensionError);
}

TEST_CASE("checkpoint round trip") {
  test_util::TempDir dir;
  Rng rng(7);
  std::vector<NamedAdapter<float>> saved = {
      {"layer.q", random_diablo<float>(rng, 10, 6, 4)},
      {"layer.k", [&] {
         auto lo = init_lora<float>(6, 4, 2, rng, 0.25f);
         for (auto& v : lo.b.data()) v = static_cast<float>(rng.normal());
         return Adapter<float>(lo);
       }()},
      {"layer.v", std::monostate{}},
  };
  save_adapter_checkpoint(dir.str(), saved);
  const auto loaded = load_adapter_checkpoint<float>(dir.str());
  REQUIRE(loaded.size() == 2);
  const auto& bd0 = std::get<BlockDiagonalAdapter<float>>(saved[0].adapter);
  const auto& bd1 = std::get<BlockDiagonalAdapter<float>>(loaded[0].adapter);
  CHECK(loaded[0].name == "layer.q");
  CHECK(bd1.blocks == bd0.blocks);
  CHECK(bd1.in_features == 10);
  CHECK(bd1.pad_in == 2);
  const auto& lo0 = std::get<LoRAAdapter<float>>(saved[1].adapter);
  const auto& lo1 = std::get<LoRAAdapter<float>>(loaded[1].adapter);
  CHECK(lo1.a == lo0.a);
  CHECK(lo1.b == lo0.b);
  CHECK(lo1.scaling == 0.25f);
  CHECK_THROWS(load_adapter_checkpoint<double>(dir.str()));
}
