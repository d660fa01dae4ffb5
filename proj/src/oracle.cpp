#include "diablo/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace diablo::oracle {

template <typename T>
Tensor<double> reference_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("reference_matmul: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  const std::size_t p = a.dim(0), q = a.dim(1), s = b.dim(1);
  Tensor<double> out({p, s});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < q; ++k) acc += static_cast<double>(a(i, k)) * static_cast<double>(b(k, j));
      out(i, j) = acc;
    }
  return out;
}

template <typename T>
Tensor<double> dense_blockdiag(const BlockDiagonalAdapter<T>& ad) {
  Tensor<double> out({ad.in_features, ad.out_features});
  for (std::size_t row = 0; row < ad.in_features; ++row) {
    const std::size_t n = row / ad.block_rows;
    for (std::size_t col = n * ad.block_cols; col < std::min(ad.out_features, (n + 1) * ad.block_cols); ++col) {
      out(row, col) = static_cast<double>(ad.blocks(n, row - n * ad.block_rows, col - n * ad.block_cols));
    }
  }
  return out;
}

template <typename T>
Tensor<double> full_gradient(const Tensor<T>& x, const Tensor<T>& g_y) {
  if (x.rank() != 2 || g_y.rank() != 2 || x.dim(0) != g_y.dim(0)) {
    throw DimensionError("full_gradient: batch mismatch " + shape_to_string(x.shape()) + " vs " +
                         shape_to_string(g_y.shape()));
  }
  const std::size_t b = x.dim(0), m1 = x.dim(1), m2 = g_y.dim(1);
  Tensor<double> out({m1, m2});
  for (std::size_t i = 0; i < m1; ++i)
    for (std::size_t j = 0; j < m2; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < b; ++k) acc += static_cast<double>(x(k, i)) * static_cast<double>(g_y(k, j));
      out(i, j) = acc;
    }
  return out;
}

std::vector<double> finite_diff_grad(const std::function<double()>& loss, std::span<double> params, double h) {
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss();
    params[i] = saved - h;
    const double down = loss();
    params[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

template <typename T>
double normwise_relative_error(const Tensor<T>& actual, const Tensor<double>& expected) {
  if (actual.shape() != expected.shape()) {
    throw DimensionError("normwise_relative_error: " + shape_to_string(actual.shape()) + " vs " +
                         shape_to_string(expected.shape()));
  }
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(actual[i]) - expected[i]));
    scale = std::max(scale, std::abs(expected[i]));
  }
  if (scale == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / scale;
}

void GradCheckReport::merge(const GradCheckReport& other) {
  checked += other.checked;
  if (!failing_parameter && other.failing_parameter) {
    failing_parameter = other.failing_parameter;
    failing_index = other.failing_index;
  }
  max_relative_error = std::max(max_relative_error, other.max_relative_error);
}

GradCheckReport compare_gradients(const std::string& name, std::span<const double> analytic,
                                  std::span<const double> numeric, double tolerance) {
  if (analytic.size() != numeric.size()) throw DimensionError("compare_gradients: length mismatch for " + name);
  GradCheckReport r;
  r.tolerance = tolerance;
  r.checked = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i]);
    if (!(e <= tolerance) && !r.failing_parameter) {
      r.failing_parameter = name;
      r.failing_index = i;
    }
    if (std::isnan(e)) {
      r.max_relative_error = std::numeric_limits<double>::infinity();
    } else {
      r.max_relative_error = std::max(r.max_relative_error, e);
    }
  }
  return r;
}

std::vector<double> singular_values(const Tensor<double>& a) {
  if (a.rank() != 2) throw RankError("singular_values: rank-2 input required");
  // Work on the orientation with at least as many rows as columns.
  const bool flip = a.dim(0) < a.dim(1);
  const std::size_t m = flip ? a.dim(1) : a.dim(0), n = flip ? a.dim(0) : a.dim(1);
  std::vector<double> u(m * n);  // column-major: column j at u[j*m .. j*m+m)
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) u[j * m + i] = flip ? a(j, i) : a(i, j);

  constexpr double eps = 1e-15;
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        double* cp = u.data() + p * m;
        double* cq = u.data() + q * m;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = cp[i], y = cq[i];
          cp[i] = c * x - s * y;
          cq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += u[j * m + i] * u[j * m + i];
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

Tensor<double> blockdiag_projection(const Tensor<double>& delta, std::size_t num_blocks) {
  if (delta.rank() != 2 || num_blocks == 0) throw DimensionError("blockdiag_projection: bad arguments");
  const std::size_t m1 = delta.dim(0), m2 = delta.dim(1);
  const std::size_t d1 = (m1 + num_blocks - 1) / num_blocks, d2 = (m2 + num_blocks - 1) / num_blocks;
  Tensor<double> out({m1, m2});
  for (std::size_t i = 0; i < m1; ++i)
    for (std::size_t j = 0; j < m2; ++j)
      if (i / d1 == j / d2) out(i, j) = delta(i, j);
  return out;
}

double best_subspace_error(const Tensor<double>& delta, Subspace subspace) {
  if (subspace.kind == Subspace::Kind::rank) {
    const auto sv = singular_values(delta);
    double tail = 0.0;
    for (std::size_t k = subspace.value; k < sv.size(); ++k) tail += sv[k] * sv[k];
    return std::sqrt(tail);
  }
  const auto proj = blockdiag_projection(delta, subspace.value);
  double off = 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const double r = delta[i] - proj[i];
    off += r * r;
  }
  return std::sqrt(off);
}

template Tensor<double> reference_matmul(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> reference_matmul(const Tensor<double>&, const Tensor<double>&);
template Tensor<double> dense_blockdiag(const BlockDiagonalAdapter<float>&);
template Tensor<double> dense_blockdiag(const BlockDiagonalAdapter<double>&);
template Tensor<double> full_gradient(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> full_gradient(const Tensor<double>&, const Tensor<double>&);
template double normwise_relative_error(const Tensor<float>&, const Tensor<double>&);
template double normwise_relative_error(const Tensor<double>&, const Tensor<double>&);

}  // namespace diablo::oracle
