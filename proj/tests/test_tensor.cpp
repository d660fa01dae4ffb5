#include <doctest.h>

#include <filesystem>

#include "diablo/io.hpp"
#include "diablo/rng.hpp"
#include "diablo/tensor.hpp"
#include "test_util.hpp"

using namespace diablo;

TEST_CASE("shape validation") {
  CHECK_THROWS_AS(Tensor<float>({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), DimensionError);
  CHECK_THROWS_AS(Tensor<float>::matrix({{1, 2}, {3}}), DimensionError);
  Tensor<double> t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.strides() == std::vector<std::size_t>{12, 4, 1});
  t(1, 2, 3) = 5.0;
  CHECK(t[23] == 5.0);
}

TEST_CASE("reshape keeps data and rejects element-count changes") {
  auto m = Tensor<float>::matrix({{1, 2, 3}, {4, 5, 6}});
  auto r = m.reshaped({3, 2});
  CHECK(r(2, 1) == 6.0f);
  CHECK_THROWS_AS(m.reshaped({4, 2}), DimensionError);
}

TEST_CASE("cast and finiteness") {
  auto m = Tensor<double>::matrix({{0.1, -2.5}});
  auto f = m.cast<float>();
  CHECK(f(0, 0) == 0.1f);
  CHECK(f.all_finite());
  f[1] = std::numeric_limits<float>::infinity();
  CHECK_FALSE(f.all_finite());
}

TEST_CASE("DBT1 layout") {
  auto t = Tensor<float>::matrix({{1.0f, -2.0f}});
  const auto bytes = serialize(t);
  // magic, dtype, rank, two u64 dims, two f32 values
  REQUIRE(bytes.size() == 4 + 1 + 1 + 16 + 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DBT1");
  CHECK(bytes[4] == 0);
  CHECK(bytes[5] == 2);
  CHECK(bytes[6] == 1);   // dim 0, little endian
  CHECK(bytes[14] == 2);  // dim 1
  // 1.0f = 0x3F800000
  CHECK(bytes[22] == 0x00);
  CHECK(bytes[25] == 0x3F);
  CHECK(peek_dtype(bytes) == DType::f32);
}

TEST_CASE("serialization round trip and corruption") {
  Rng rng(3);
  auto t = test_util::randn<double>(rng, {3, 4, 5});
  const auto bytes = serialize(t);
  CHECK(deserialize<double>(bytes) == t);
  CHECK_THROWS_AS(deserialize<float>(bytes), FormatError);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(deserialize<double>(truncated), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize<double>(bad_magic), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize<double>(trailing), FormatError);
}

TEST_CASE("tensor files are written atomically") {
  test_util::TempDir dir;
  Rng rng(4);
  auto t = test_util::randn<float>(rng, {7, 3});
  const auto path = dir / "nested/t.dbt";
  save_tensor(path, t);
  CHECK(load_tensor<float>(path) == t);
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
  CHECK_THROWS(load_tensor<float>(dir / "missing.dbt"));
}

TEST_CASE("rng draws are frozen") {
  // Reference values from an independent SplitMix64 implementation.
  Rng r(42);
  CHECK(r.next_u64() == 0xbdd732262feb6e95ULL);
  CHECK(r.next_u64() == 0x28efe333b266f103ULL);
  CHECK(r.next_u64() == 0x47526757130f9f52ULL);
  CHECK(r.counter() == 3);
  CHECK(Rng(42).fork(1).seed() == 0xa9cb101be2f6824fULL);

  Rng n(0);
  CHECK(n.normal() == doctest::Approx(-1.8839083333524405).epsilon(1e-15));
  CHECK(n.normal() == doctest::Approx(0.22760793546360525).epsilon(1e-15));
  CHECK(n.counter() == 4);
}

TEST_CASE("rng streams") {
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng parent(9);
  auto c1 = parent.fork(1), c2 = parent.fork(2);
  CHECK(parent.counter() == 0);
  CHECK(c1.next_u64() != c2.next_u64());

  Rng u(1);
  double lo = 1, hi = 0, mean = 0;
  for (int i = 0; i < 20000; ++i) {
    const double x = u.uniform();
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    mean += x / 20000;
  }
  CHECK(lo >= 0.0);
  CHECK(hi < 1.0);
  CHECK(mean == doctest::Approx(0.5).epsilon(0.02));
  for (int i = 0; i < 1000; ++i) CHECK(u.below(7) < 7);
}

TEST_CASE("io helpers") {
  test_util::TempDir dir;
  io::write_file_atomic(dir / "a/b.txt", std::string_view("hello\n"));
  CHECK(io::read_file_text(dir / "a/b.txt") == "hello\n");
  std::vector<std::uint8_t> buf;
  io::append_u64_le(buf, 0x0102030405060708ULL);
  CHECK(buf[0] == 0x08);
  CHECK(io::read_u64_le(buf, 0) == 0x0102030405060708ULL);
  CHECK_THROWS(io::read_u64_le(buf, 1));
}
