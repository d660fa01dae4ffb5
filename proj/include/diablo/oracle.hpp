#pragma once

// Brute-force references for testing the production kernels. Everything here works in f64 with
// plain loops and shares no code with ops.cpp.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diablo/adapters.hpp"
#include "diablo/tensor.hpp"

namespace diablo::oracle {

template <typename T>
Tensor<double> to_f64(const Tensor<T>& t) {
  return t.template cast<double>();
}

/// Triple-loop product in f64.
template <typename T>
Tensor<double> reference_matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Dense m₁×m₂ matrix with Dᵢ on the diagonal and exact zeros elsewhere; padding removed.
template <typename T>
Tensor<double> dense_blockdiag(const BlockDiagonalAdapter<T>& adapter);

/// Xᵀ g_Y in f64.
template <typename T>
Tensor<double> full_gradient(const Tensor<T>& x, const Tensor<T>& g_y);

/// Central differences (L(θ+h·eᵢ) − L(θ−h·eᵢ)) / 2h, perturbing `params` in place and
/// restoring every coordinate afterwards.
std::vector<double> finite_diff_grad(const std::function<double()>& loss, std::span<double> params,
                                     double h = 1e-5);

/// |a − b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

/// max|actual − expected| / max|expected| (0 when both are identically zero).
template <typename T>
double normwise_relative_error(const Tensor<T>& actual, const Tensor<double>& expected);

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::optional<std::string> failing_parameter;
  std::optional<std::size_t> failing_index;
  double tolerance = 1e-4;
  std::size_t checked = 0;

  bool passed() const noexcept { return max_relative_error <= tolerance; }
  /// Folds another report in, keeping the worst entry.
  void merge(const GradCheckReport& other);
};

/// Element-wise comparison; records the first element whose error exceeds the tolerance.
GradCheckReport compare_gradients(const std::string& name, std::span<const double> analytic,
                                  std::span<const double> numeric, double tolerance);

/// Singular values in descending order, by one-sided Jacobi rotations.
std::vector<double> singular_values(const Tensor<double>& a);

struct Subspace {
  enum class Kind { rank, blockdiag } kind;
  std::size_t value;

  static Subspace rank_r(std::size_t r) { return {Kind::rank, r}; }
  static Subspace blockdiag(std::size_t n) { return {Kind::blockdiag, n}; }
};

/// Frobenius distance from `delta` to the closest matrix in the subspace: SVD truncation for
/// rank r, the off-diagonal-block residual for N blocks (same ceil/pad geometry as the adapter).
double best_subspace_error(const Tensor<double>& delta, Subspace subspace);

/// Orthogonal projection onto the block-diagonal support with N blocks.
Tensor<double> blockdiag_projection(const Tensor<double>& delta, std::size_t num_blocks);

}  // namespace diablo::oracle
