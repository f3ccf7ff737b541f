#pragma once

#include <Eigen/SVD>

#include <cmath>
#include <limits>
#include <vector>

#include "ivit/matrix.hpp"

namespace ivit {

inline constexpr double kDefaultRankTolerance = 1e-8;

/// Row-wise softmax of scale * logits, computed with max subtraction.
inline Matrix softmax_rows(const Matrix& logits, double scale) {
  require(std::isfinite(scale) && scale > 0.0, "invalid scale");
  require(logits.all_finite(), "non-finite logits");
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto o = out.row(r);
    double peak = -std::numeric_limits<double>::infinity();
    for (double v : in) peak = std::max(peak, scale * v);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = scale * in[c] - peak;
    Eigen::Map<Eigen::ArrayXd> row(o.data(), static_cast<Eigen::Index>(o.size()));
    row = row.exp();
    row /= row.sum();
  }
  return out;
}

/// Singular values in non-increasing order.
inline std::vector<double> singular_values(const Matrix& m) {
  require(!m.empty(), "singular_values: empty matrix");
  Eigen::JacobiSVD<detail::RowMajor> svd(detail::view(m));
  const auto& s = svd.singularValues();
  return {s.data(), s.data() + s.size()};
}

/// Count of singular values above rel_tol times the largest one.
inline std::size_t numerical_rank(const Matrix& m, double rel_tol = kDefaultRankTolerance) {
  require(!m.empty(), "numerical_rank: empty matrix");
  require(rel_tol > 0.0 && rel_tol < 1.0, "numerical_rank: rel_tol must lie in (0,1)");
  const auto s = singular_values(m);
  if (s.front() == 0.0) return 0;
  const double cutoff = rel_tol * s.front();
  std::size_t k = 0;
  for (double v : s)
    if (v > cutoff) ++k;
  return k;
}

struct LowRankFactors {
  Matrix z;  ///< N x k, orthonormal columns
  Matrix a;  ///< k x D
  std::size_t rank() const { return z.cols(); }
};

/// x ~= z * a with k = numerical_rank(x, rel_tol), from a truncated SVD.
inline LowRankFactors low_rank_factorize(const Matrix& x, double rel_tol = kDefaultRankTolerance) {
  const std::size_t k = numerical_rank(x, rel_tol);
  require(k > 0, "low_rank_factorize: matrix has rank zero");
  Eigen::JacobiSVD<detail::RowMajor> svd(detail::view(x), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& u = svd.matrixU();
  const auto& v = svd.matrixV();
  const auto& s = svd.singularValues();
  LowRankFactors f{Matrix(x.rows(), k), Matrix(k, x.cols())};
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < k; ++j) f.z(r, j) = u(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < x.cols(); ++c)
      f.a(j, c) = s(static_cast<Eigen::Index>(j)) * v(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j));
  return f;
}

struct LeastSquaresResult {
  std::vector<double> w;
  double residual = 0.0;
};

/// Minimum-norm solution of min ||b w - t||_2 via the SVD pseudo-inverse.
inline LeastSquaresResult least_squares_solve(const Matrix& b, std::span<const double> t) {
  require(!b.empty(), "least_squares_solve: empty system");
  require(b.rows() == t.size(), "least_squares_solve: dimension mismatch");
  Eigen::JacobiSVD<detail::RowMajor> svd(detail::view(b), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double cutoff = s.size() == 0 ? 0.0
                                      : s(0) * static_cast<double>(std::max(b.rows(), b.cols())) *
                                            std::numeric_limits<double>::epsilon();
  Eigen::Map<const Eigen::VectorXd> rhs(t.data(), static_cast<Eigen::Index>(t.size()));
  Eigen::VectorXd ut = svd.matrixU().transpose() * rhs;
  for (Eigen::Index i = 0; i < ut.size(); ++i) ut(i) = s(i) > cutoff ? ut(i) / s(i) : 0.0;
  Eigen::VectorXd w = svd.matrixV() * ut;

  LeastSquaresResult out;
  out.w.assign(w.data(), w.data() + w.size());
  Eigen::VectorXd resid = detail::view(b) * w - rhs;
  out.residual = resid.norm();
  return out;
}

}  // namespace ivit
