#pragma once

// Dense linear algebra used by every editing stage: SVD, energy-rank selection,
// projectors and SPD solves. Storage and factorizations are backed by Eigen.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "subedit/error.hpp"

namespace subedit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace linalg {

inline bool all_finite(const Matrix& a) { return a.allFinite(); }

inline void require_finite(const Matrix& a, const char* what) {
  if (!a.allFinite()) throw Error(Errc::invalid_input, std::string(what) + ": non-finite entry");
}

struct SvdResult {
  Matrix u;  // m x r, orthonormal columns
  Vector s;  // r, nonincreasing
  Matrix v;  // n x r, orthonormal columns
};

/// Thin SVD, r = min(rows, cols). Singular values come back nonincreasing.
inline SvdResult svd(const Matrix& a) {
  require_finite(a, "svd");
  if (a.size() == 0) return {Matrix(a.rows(), 0), Vector(0), Matrix(a.cols(), 0)};
  Eigen::BDCSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (dec.info() != Eigen::Success) throw Error(Errc::factorization, "svd: decomposition did not converge");
  return {dec.matrixU(), dec.singularValues(), dec.matrixV()};
}

struct EnergySpectrum {
  std::vector<double> singular_values;
  double total_energy = 0.0;
  std::size_t selected_rank = 0;
};

namespace detail {
inline void check_spectrum(std::span<const double> s) {
  if (s.empty()) throw Error(Errc::degenerate_spectrum, "energy_rank: empty spectrum");
  const double scale = s.front();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!std::isfinite(s[i]) || s[i] < 0.0)
      throw Error(Errc::invalid_input, "energy_rank: singular values must be finite and nonnegative");
    if (i > 0 && s[i] > s[i - 1] + 1e-12 * scale)
      throw Error(Errc::invalid_input, "energy_rank: singular values must be nonincreasing");
  }
  if (scale <= 0.0) throw Error(Errc::degenerate_spectrum, "energy_rank: all-zero spectrum");
}
}  // namespace detail

/// Smallest m with sum_{i<m} s_i^2 >= tau * sum_i s_i^2. tau == 0 gives m == 0.
inline std::size_t energy_rank(std::span<const double> singular_values, double tau_energy) {
  if (!(tau_energy >= 0.0 && tau_energy < 1.0))
    throw Error(Errc::invalid_input, "energy_rank: tau_energy must lie in [0, 1)");
  detail::check_spectrum(singular_values);
  if (tau_energy == 0.0) return 0;
  double total = 0.0;
  for (double s : singular_values) total += s * s;
  const double threshold = tau_energy * total;
  double cumulative = 0.0;
  for (std::size_t m = 0; m < singular_values.size(); ++m) {
    cumulative += singular_values[m] * singular_values[m];
    if (cumulative >= threshold) return m + 1;
  }
  return singular_values.size();
}

inline EnergySpectrum make_spectrum(const Vector& singular_values, double tau_energy) {
  EnergySpectrum spec;
  spec.singular_values.assign(singular_values.data(), singular_values.data() + singular_values.size());
  for (double s : spec.singular_values) spec.total_energy += s * s;
  spec.selected_rank = energy_rank(spec.singular_values, tau_energy);
  return spec;
}

inline bool has_orthonormal_columns(const Matrix& columns, double tol = 1e-8) {
  if (columns.cols() == 0) return true;
  const Matrix gram = columns.transpose() * columns;
  return (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() <= tol;
}

/// Orthogonal projector C C^T onto the span of orthonormal columns C.
inline Matrix projector_from_basis(const Matrix& columns) {
  require_finite(columns, "projector_from_basis");
  if (!has_orthonormal_columns(columns))
    throw Error(Errc::invalid_basis, "projector_from_basis: columns are not orthonormal");
  if (columns.cols() == 0) return Matrix::Zero(columns.rows(), columns.rows());
  return columns * columns.transpose();
}

/// x solving a x = b for symmetric positive definite a (Cholesky).
inline Matrix solve_spd(const Matrix& a, const Matrix& b) {
  require_finite(a, "solve_spd");
  require_finite(b, "solve_spd");
  if (a.rows() != a.cols() || a.rows() != b.rows())
    throw Error(Errc::dimension_mismatch, "solve_spd: shape mismatch");
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
    throw Error(Errc::invalid_input, "solve_spd: matrix is not symmetric");
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success)
    throw Error(Errc::factorization, "solve_spd: matrix is not positive definite");
  return llt.solve(b);
}

/// P_W = W (W^T W)^{-1} W^T for a matrix of linearly independent columns.
inline Matrix oblique_projector(const Matrix& w) {
  require_finite(w, "oblique_projector");
  if (w.cols() == 0) return Matrix::Zero(w.rows(), w.rows());
  const Matrix gram = w.transpose() * w;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > 1e8)
    throw Error(Errc::ill_conditioned, "oblique_projector: columns are (nearly) collinear");
  return w * solve_spd(gram, w.transpose());
}

inline double relative_frobenius(const Matrix& approx, const Matrix& exact) {
  const double denom = exact.norm();
  const double diff = (approx - exact).norm();
  return denom > 0.0 ? diff / denom : diff;
}

}  // namespace linalg
}  // namespace subedit
