#include "linearlens/linalg.hpp"

#include <Eigen/SVD>
#include <cmath>
#include <limits>
#include <sstream>

#include "linearlens/error.hpp"
#include "linearlens/kernels.hpp"

namespace linearlens {

namespace {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Above this size the divide-and-conquer solver is much faster than
// Jacobi and still accurate to a few ulps of σ_max.
constexpr Eigen::Index kJacobiMaxDim = 96;

template <typename Solver>
Svd unpack(const Solver& solver, const Matrix& m) {
  if (solver.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "SVD did not converge on a " << m.rows() << "x" << m.cols() << " matrix";
    const auto& s = solver.singularValues();
    if (s.size() > 0 && s(s.size() - 1) > 0.0) msg << " (condition " << s(0) / s(s.size() - 1) << ")";
    fail(ErrorCode::kNumeric, msg.str());
  }
  const Eigen::Index r = solver.singularValues().size();
  Svd out;
  out.u = Matrix(m.rows(), static_cast<std::size_t>(r));
  out.vt = Matrix(static_cast<std::size_t>(r), m.cols());
  out.singular.resize(static_cast<std::size_t>(r));
  const auto& U = solver.matrixU();
  const auto& V = solver.matrixV();
  for (Eigen::Index j = 0; j < r; ++j) {
    out.singular[j] = solver.singularValues()(j);
    for (Eigen::Index i = 0; i < U.rows(); ++i) out.u(i, j) = U(i, j);
    for (Eigen::Index i = 0; i < V.rows(); ++i) out.vt(j, i) = V(i, j);
  }
  return out;
}

}  // namespace

Matrix LinearMap::apply(const Matrix& x) const {
  require(x.cols() == d_in(), ErrorCode::kDimension, "LinearMap input width mismatch");
  Matrix y = matmul(x, weight);
  if (bias) {
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += (*bias)[c];
  }
  return y;
}

Centered center_columns(const Matrix& m) {
  require(!m.empty(), ErrorCode::kDimension, "cannot center an empty matrix");
  Centered out{m, std::vector<double>(m.cols(), 0.0)};
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out.mean[c] += m(r, c);
  for (double& v : out.mean) v /= static_cast<double>(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out.values(r, c) -= out.mean[c];
  return out;
}

double frobenius_norm(const Matrix& m) {
  // Scaled accumulation avoids overflow for very large entries.
  double scale = 0.0;
  for (double v : m.values()) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return 0.0;
  double sum = 0.0;
  for (double v : m.values()) {
    const double s = v / scale;
    sum += s * s;
  }
  return scale * std::sqrt(sum);
}

double Svd::cutoff() const noexcept {
  if (singular.empty()) return 0.0;
  return std::numeric_limits<double>::epsilon() * singular.front() *
         static_cast<double>(std::max(rows(), cols()));
}

std::size_t Svd::rank() const noexcept {
  const double tol = cutoff();
  std::size_t r = 0;
  for (double s : singular)
    if (s > tol && s > 0.0) ++r;
  return r;
}

Svd svd(const Matrix& m) {
  require(!m.empty(), ErrorCode::kDimension, "SVD of an empty matrix");
  require(m.all_finite(), ErrorCode::kNumeric, "SVD input has non-finite entries");
  Eigen::Map<const EigenRowMajor> view(m.data(), static_cast<Eigen::Index>(m.rows()),
                                       static_cast<Eigen::Index>(m.cols()));
  const Eigen::MatrixXd dense = view;
  if (std::min(dense.rows(), dense.cols()) <= kJacobiMaxDim) {
    Eigen::JacobiSVD<Eigen::MatrixXd> solver(dense, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return unpack(solver, m);
  }
  Eigen::BDCSVD<Eigen::MatrixXd> solver(dense, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return unpack(solver, m);
}

Matrix pseudoinverse(const Svd& d) {
  const std::size_t r = d.rank();
  Matrix scaled_ut(r, d.rows());
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t i = 0; i < d.rows(); ++i) scaled_ut(k, i) = d.u(i, k) / d.singular[k];
  Matrix vt_r(r, d.cols());
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t j = 0; j < d.cols(); ++j) vt_r(k, j) = d.vt(k, j);
  return matmul_tn(vt_r, scaled_ut);
}

LinearMap lstsq(const Svd& d, const Matrix& y) {
  require(d.rows() == y.rows(), ErrorCode::kDimension, "lstsq: X and Y row counts differ");
  const std::size_t r = d.rank();
  Matrix u_r(d.rows(), r);
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t k = 0; k < r; ++k) u_r(i, k) = d.u(i, k);
  Matrix coeff = matmul_tn(u_r, y);  // r × d_out
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t j = 0; j < coeff.cols(); ++j) coeff(k, j) /= d.singular[k];
  Matrix vt_r(r, d.cols());
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t j = 0; j < d.cols(); ++j) vt_r(k, j) = d.vt(k, j);
  return LinearMap{matmul_tn(vt_r, coeff), std::nullopt};
}

LinearMap lstsq(const Matrix& x, const Matrix& y) {
  require(x.rows() == y.rows(), ErrorCode::kDimension, "lstsq: X and Y row counts differ");
  require(x.rows() >= 1, ErrorCode::kDimension, "lstsq needs at least one row");
  return lstsq(svd(x), y);
}

LinearMap lstsq_affine(const Matrix& x, const Matrix& y) { return lstsq_affine_fit(x, y).map; }

AffineFit lstsq_affine_fit(const Matrix& x, const Matrix& y) {
  require(x.rows() == y.rows(), ErrorCode::kDimension, "lstsq: X and Y row counts differ");
  Matrix aug(x.rows(), x.cols() + 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) aug(r, c) = x(r, c);
    aug(r, x.cols()) = 1.0;
  }
  const Svd dec = svd(aug);
  const LinearMap full = lstsq(dec, y);
  AffineFit out{{Matrix(x.cols(), y.cols()), std::vector<double>(y.cols())}, dec.rank(), aug.cols()};
  for (std::size_t c = 0; c < x.cols(); ++c)
    for (std::size_t j = 0; j < y.cols(); ++j) out.map.weight(c, j) = full.weight(c, j);
  for (std::size_t j = 0; j < y.cols(); ++j) (*out.map.bias)[j] = full.weight(x.cols(), j);
  return out;
}

double squared_residual(const Matrix& x, const LinearMap& map, const Matrix& y) {
  require(x.rows() == y.rows() && map.d_out() == y.cols(), ErrorCode::kDimension,
          "residual: shape mismatch");
  Matrix diff = map.apply(x) - y;
  double sum = 0.0;
  for (double v : diff.values()) sum += v * v;
  return sum;
}

}  // namespace linearlens
