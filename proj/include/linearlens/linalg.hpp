#pragma once

#include <optional>
#include <vector>

#include "linearlens/matrix.hpp"

namespace linearlens {

/// Least-squares map from rows of X to rows of Y: y ≈ x·weight + bias.
struct LinearMap {
  Matrix weight;                      // d_in × d_out
  std::optional<std::vector<double>> bias;  // d_out, present iff affine

  std::size_t d_in() const noexcept { return weight.rows(); }
  std::size_t d_out() const noexcept { return weight.cols(); }
  bool affine() const noexcept { return bias.has_value(); }

  /// Applies the map to every row of x.
  Matrix apply(const Matrix& x) const;
};

struct Centered {
  Matrix values;
  std::vector<double> mean;
};

/// Subtracts the per-column mean. Throws kDimension on an empty matrix.
Centered center_columns(const Matrix& m);

double frobenius_norm(const Matrix& m);

/// Thin SVD: m = u · diag(singular) · vt, singular values descending.
struct Svd {
  Matrix u;                      // rows × r
  std::vector<double> singular;  // r = min(rows, cols)
  Matrix vt;                     // r × cols

  std::size_t rows() const noexcept { return u.rows(); }
  std::size_t cols() const noexcept { return vt.cols(); }
  /// Singular values below eps · σ_max · max(rows, cols) count as zero.
  double cutoff() const noexcept;
  std::size_t rank() const noexcept;
};

Svd svd(const Matrix& m);

/// Moore-Penrose pseudoinverse (cols × rows).
Matrix pseudoinverse(const Svd& decomposition);

/// Minimum-norm minimizer of ‖X·A − Y‖_F. Throws kDimension on a row-count mismatch.
LinearMap lstsq(const Matrix& x, const Matrix& y);
LinearMap lstsq(const Svd& x_decomposition, const Matrix& y);

/// Affine least squares: fits weight and bias by augmenting X with a ones column.
LinearMap lstsq_affine(const Matrix& x, const Matrix& y);

struct AffineFit {
  LinearMap map;
  std::size_t rank = 0;  // numerical rank of [X 1]
  std::size_t columns = 0;  // d_in + 1
  bool rank_deficient() const noexcept { return rank < columns; }
};
AffineFit lstsq_affine_fit(const Matrix& x, const Matrix& y);

/// ‖X·A (+ b) − Y‖_F².
double squared_residual(const Matrix& x, const LinearMap& map, const Matrix& y);

}  // namespace linearlens
