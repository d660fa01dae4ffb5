#include "diablo/ops.hpp"

#include <cmath>
#include <vector>

namespace diablo {

namespace {

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* operand) {
  if (s.size() != rank) {
    throw RankError(std::string(op) + ": " + operand + " must have rank " + std::to_string(rank) +
                    ", got shape " + shape_to_string(s));
  }
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                       shape_to_string(b));
}

template <typename T>
void check_finite_result([[maybe_unused]] const char* op, [[maybe_unused]] const Tensor<T>& out,
                         [[maybe_unused]] const Tensor<T>& a, [[maybe_unused]] const Tensor<T>& b) {
#ifndef NDEBUG
  if (!out.all_finite() && a.all_finite() && b.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value from finite inputs");
  }
#endif
}

// out[rows×s] (+)= lhs[rows×q] · rhs[q×s]; rows of lhs have stride q, acc is a scratch row of length s.
template <typename T, typename Acc>
void gemm_nn(const T* lhs, const T* rhs, T* out, std::size_t rows, std::size_t q, std::size_t s,
             std::size_t lhs_stride, std::size_t out_stride) {
  std::vector<Acc> acc(s);
  for (std::size_t i = 0; i < rows; ++i) {
    std::fill(acc.begin(), acc.end(), Acc(0));
    const T* lrow = lhs + i * lhs_stride;
    for (std::size_t k = 0; k < q; ++k) {
      const Acc aik = lrow[k];
      const T* rrow = rhs + k * s;
      for (std::size_t j = 0; j < s; ++j) acc[j] += aik * static_cast<Acc>(rrow[j]);
    }
    T* orow = out + i * out_stride;
    for (std::size_t j = 0; j < s; ++j) orow[j] = static_cast<T>(acc[j]);
  }
}

// out[i,j] = Σ_k lhs[i,k] rhs[j,k]; both operands are read along contiguous rows.
template <typename T, typename Acc>
void gemm_nt(const T* lhs, const T* rhs, T* out, std::size_t rows, std::size_t q, std::size_t s,
             std::size_t lhs_stride, std::size_t rhs_stride, std::size_t out_stride) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* lrow = lhs + i * lhs_stride;
    T* orow = out + i * out_stride;
    for (std::size_t j = 0; j < s; ++j) {
      const T* rrow = rhs + j * rhs_stride;
      Acc acc(0);
      for (std::size_t k = 0; k < q; ++k) acc += static_cast<Acc>(lrow[k]) * static_cast<Acc>(rrow[k]);
      orow[j] = static_cast<T>(acc);
    }
  }
}

template <typename T>
bool wide(MatmulOptions opts) {
  return std::is_same_v<T, float> && opts.accumulate_f64;
}

}  // namespace

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) mismatch(op, a, b);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, MatmulOptions opts) {
  require_rank(a.shape(), 2, "matmul", "lhs");
  require_rank(b.shape(), 2, "matmul", "rhs");
  const std::size_t p = a.dim(0), q = a.dim(1), s = b.dim(1);
  if (b.dim(0) != q) mismatch("matmul", a.shape(), b.shape());
  Tensor<T> out({p, s});
  if (wide<T>(opts)) {
    gemm_nn<T, double>(a.raw(), b.raw(), out.raw(), p, q, s, q, s);
  } else {
    gemm_nn<T, T>(a.raw(), b.raw(), out.raw(), p, q, s, q, s);
  }
  check_finite_result("matmul", out, a, b);
  return out;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b, MatmulOptions opts) {
  require_rank(a.shape(), 2, "matmul_tn", "lhs");
  require_rank(b.shape(), 2, "matmul_tn", "rhs");
  const std::size_t q = a.dim(0), p = a.dim(1), s = b.dim(1);
  if (b.dim(0) != q) mismatch("matmul_tn", a.shape(), b.shape());
  Tensor<T> out({p, s});
  auto run = [&]<typename Acc>() {
    std::vector<Acc> acc(p * s, Acc(0));
    for (std::size_t k = 0; k < q; ++k) {
      const T* arow = a.raw() + k * p;
      const T* brow = b.raw() + k * s;
      for (std::size_t i = 0; i < p; ++i) {
        const Acc aki = arow[i];
        Acc* crow = acc.data() + i * s;
        for (std::size_t j = 0; j < s; ++j) crow[j] += aki * static_cast<Acc>(brow[j]);
      }
    }
    for (std::size_t i = 0; i < p * s; ++i) out[i] = static_cast<T>(acc[i]);
  };
  if (wide<T>(opts)) {
    run.template operator()<double>();
  } else {
    run.template operator()<T>();
  }
  check_finite_result("matmul_tn", out, a, b);
  return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b, MatmulOptions opts) {
  require_rank(a.shape(), 2, "matmul_nt", "lhs");
  require_rank(b.shape(), 2, "matmul_nt", "rhs");
  const std::size_t p = a.dim(0), q = a.dim(1), s = b.dim(0);
  if (b.dim(1) != q) mismatch("matmul_nt", a.shape(), b.shape());
  Tensor<T> out({p, s});
  if (wide<T>(opts)) {
    gemm_nt<T, double>(a.raw(), b.raw(), out.raw(), p, q, s, q, q, s);
  } else {
    gemm_nt<T, T>(a.raw(), b.raw(), out.raw(), p, q, s, q, q, s);
  }
  check_finite_result("matmul_nt", out, a, b);
  return out;
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& x, const Tensor<T>& d, MatmulOptions opts) {
  require_rank(x.shape(), 3, "batched_matmul", "input");
  require_rank(d.shape(), 3, "batched_matmul", "blocks");
  const std::size_t b = x.dim(0), n = x.dim(1), d1 = x.dim(2), d2 = d.dim(2);
  if (d.dim(0) != n || d.dim(1) != d1) mismatch("batched_matmul", x.shape(), d.shape());
  Tensor<T> out({b, n, d2});
  // Rows x[:, blk, :] are strided by n*d1; each block is one small gemm.
  for (std::size_t blk = 0; blk < n; ++blk) {
    const T* lhs = x.raw() + blk * d1;
    const T* rhs = d.raw() + blk * d1 * d2;
    T* dst = out.raw() + blk * d2;
    if (wide<T>(opts)) {
      gemm_nn<T, double>(lhs, rhs, dst, b, d1, d2, n * d1, n * d2);
    } else {
      gemm_nn<T, T>(lhs, rhs, dst, b, d1, d2, n * d1, n * d2);
    }
  }
  check_finite_result("batched_matmul", out, x, d);
  return out;
}

template <typename T>
Tensor<T> batched_matmul_weight_grad(const Tensor<T>& x, const Tensor<T>& g, MatmulOptions opts) {
  require_rank(x.shape(), 3, "batched_matmul_weight_grad", "input");
  require_rank(g.shape(), 3, "batched_matmul_weight_grad", "cotangent");
  const std::size_t b = x.dim(0), n = x.dim(1), d1 = x.dim(2), d2 = g.dim(2);
  if (g.dim(0) != b || g.dim(1) != n) mismatch("batched_matmul_weight_grad", x.shape(), g.shape());
  Tensor<T> out({n, d1, d2});
  auto run = [&]<typename Acc>() {
    std::vector<Acc> acc(d1 * d2);
    for (std::size_t blk = 0; blk < n; ++blk) {
      std::fill(acc.begin(), acc.end(), Acc(0));
      for (std::size_t i = 0; i < b; ++i) {
        const T* xrow = x.raw() + (i * n + blk) * d1;
        const T* grow = g.raw() + (i * n + blk) * d2;
        for (std::size_t k = 0; k < d1; ++k) {
          const Acc xk = xrow[k];
          Acc* arow = acc.data() + k * d2;
          for (std::size_t j = 0; j < d2; ++j) arow[j] += xk * static_cast<Acc>(grow[j]);
        }
      }
      T* dst = out.raw() + blk * d1 * d2;
      for (std::size_t e = 0; e < d1 * d2; ++e) dst[e] = static_cast<T>(acc[e]);
    }
  };
  if (wide<T>(opts)) {
    run.template operator()<double>();
  } else {
    run.template operator()<T>();
  }
  check_finite_result("batched_matmul_weight_grad", out, x, g);
  return out;
}

template <typename T>
Tensor<T> batched_matmul_input_grad(const Tensor<T>& g, const Tensor<T>& d, MatmulOptions opts) {
  require_rank(g.shape(), 3, "batched_matmul_input_grad", "cotangent");
  require_rank(d.shape(), 3, "batched_matmul_input_grad", "blocks");
  const std::size_t b = g.dim(0), n = g.dim(1), d2 = g.dim(2), d1 = d.dim(1);
  if (d.dim(0) != n || d.dim(2) != d2) mismatch("batched_matmul_input_grad", g.shape(), d.shape());
  Tensor<T> out({b, n, d1});
  for (std::size_t blk = 0; blk < n; ++blk) {
    const T* lhs = g.raw() + blk * d2;
    const T* rhs = d.raw() + blk * d1 * d2;
    T* dst = out.raw() + blk * d1;
    if (wide<T>(opts)) {
      gemm_nt<T, double>(lhs, rhs, dst, b, d2, d1, n * d2, d2, n * d1);
    } else {
      gemm_nt<T, T>(lhs, rhs, dst, b, d2, d1, n * d2, d2, n * d1);
    }
  }
  check_finite_result("batched_matmul_input_grad", out, g, d);
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a.shape(), 2, "transpose", "input");
  const std::size_t p = a.dim(0), q = a.dim(1);
  Tensor<T> out({q, p});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
Tensor<T> rand_kaiming_uniform(Rng& rng, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw DimensionError("rand_kaiming_uniform: rows and cols must be >= 1");
  const double bound = std::sqrt(6.0 / static_cast<double>(rows));
  Tensor<T> out({rows, cols});
  for (auto& v : out.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

template <typename T>
Tensor<T> rand_normal(Rng& rng, Shape shape, double stddev) {
  Tensor<T> out(std::move(shape));
  for (auto& v : out.data()) v = static_cast<T>(stddev * rng.normal());
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  require_same_shape(dst.shape(), src.shape(), "add");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void axpy_inplace(Tensor<T>& dst, T alpha, const Tensor<T>& src) {
  require_same_shape(dst.shape(), src.shape(), "axpy");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

template <typename T>
void scale_inplace(Tensor<T>& dst, T alpha) {
  for (auto& v : dst.data()) v *= alpha;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  add_inplace(out, b);
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  axpy_inplace(out, T(-1), b);
  return out;
}

template <typename T>
double sum_squares(const Tensor<T>& a) {
  double s = 0.0;
  for (T v : a.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return s;
}

#define DIABLO_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, MatmulOptions);                \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&, MatmulOptions);             \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&, MatmulOptions);             \
  template Tensor<T> batched_matmul(const Tensor<T>&, const Tensor<T>&, MatmulOptions);        \
  template Tensor<T> batched_matmul_weight_grad(const Tensor<T>&, const Tensor<T>&,            \
                                                MatmulOptions);                                \
  template Tensor<T> batched_matmul_input_grad(const Tensor<T>&, const Tensor<T>&,             \
                                               MatmulOptions);                                 \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> rand_kaiming_uniform<T>(Rng&, std::size_t, std::size_t);                  \
  template Tensor<T> rand_normal<T>(Rng&, Shape, double);                                      \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                     \
  template void axpy_inplace(Tensor<T>&, T, const Tensor<T>&);                                 \
  template void scale_inplace(Tensor<T>&, T);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template double sum_squares(const Tensor<T>&);

DIABLO_INSTANTIATE_OPS(float)
DIABLO_INSTANTIATE_OPS(double)

#undef DIABLO_INSTANTIATE_OPS

}  // namespace diablo
