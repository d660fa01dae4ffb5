#pragma once

#include <cstddef>

#include "diablo/rng.hpp"
#include "diablo/tensor.hpp"

namespace diablo {

struct MatmulOptions {
  /// Accumulate f32 products in f64 and round once per output element.
  bool accumulate_f64 = false;
};

/// a[p×q] · b[q×s]. Each output element sums over q in ascending order.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, MatmulOptions opts = {});

/// aᵀ · b for a[q×p], b[q×s], without forming the transpose.
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b, MatmulOptions opts = {});

/// a · bᵀ for a[p×q], b[s×q], without forming the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b, MatmulOptions opts = {});

/// out[i,n,:] = x[i,n,:] · d[n,:,:] for x[b×N×d₁], d[N×d₁×d₂].
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& x, const Tensor<T>& d, MatmulOptions opts = {});

/// Weight cotangent of batched_matmul: out[n] = Σ_i x[i,n,:]ᵀ g[i,n,:], shape N×d₁×d₂.
template <typename T>
Tensor<T> batched_matmul_weight_grad(const Tensor<T>& x, const Tensor<T>& g, MatmulOptions opts = {});

/// Input cotangent of batched_matmul: out[i,n,:] = g[i,n,:] · d[n]ᵀ, shape b×N×d₁.
template <typename T>
Tensor<T> batched_matmul_input_grad(const Tensor<T>& g, const Tensor<T>& d, MatmulOptions opts = {});

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// i.i.d. U(−√(6/rows), +√(6/rows)), filled in row-major order.
template <typename T>
Tensor<T> rand_kaiming_uniform(Rng& rng, std::size_t rows, std::size_t cols);

template <typename T>
Tensor<T> rand_normal(Rng& rng, Shape shape, double stddev = 1.0);

// Element-wise helpers. Shapes must match exactly.
template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src);

template <typename T>
void axpy_inplace(Tensor<T>& dst, T alpha, const Tensor<T>& src);

template <typename T>
void scale_inplace(Tensor<T>& dst, T alpha);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
double sum_squares(const Tensor<T>& a);

void require_same_shape(const Shape& a, const Shape& b, const char* op);

}  // namespace diablo
