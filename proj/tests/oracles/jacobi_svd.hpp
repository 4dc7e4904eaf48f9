#pragma once

// One-sided (Hestenes) Jacobi SVD. Slow and simple; used only to check linalg::svd.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

struct JacobiSvd {
  Eigen::MatrixXd u;  // m x n
  Eigen::VectorXd s;  // n, nonincreasing
  Eigen::MatrixXd v;  // n x n
};

/// Requires rows >= cols; orthogonalizes the columns of A by plane rotations.
inline JacobiSvd jacobi_svd(const Eigen::MatrixXd& a, int max_sweeps = 100) {
  const Eigen::Index m = a.rows(), n = a.cols();
  Eigen::MatrixXd w = a;
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p + 1 < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (Eigen::Index i = 0; i < m; ++i) {
          alpha += w(i, p) * w(i, p);
          beta += w(i, q) * w(i, q);
          gamma += w(i, p) * w(i, q);
        }
        if (gamma == 0.0) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (Eigen::Index i = 0; i < m; ++i) {
          const double x = w(i, p), y = w(i, q);
          w(i, p) = c * x - s * y;
          w(i, q) = s * x + c * y;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const double x = v(i, p), y = v(i, q);
          v(i, p) = c * x - s * y;
          v(i, q) = s * x + c * y;
        }
      }
    if (off < 1e-15) break;
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Eigen::VectorXd norms(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double sq = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) sq += w(i, j) * w(i, j);
    norms(j) = std::sqrt(sq);
  }
  std::sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return norms(x) > norms(y); });
  JacobiSvd out{Eigen::MatrixXd::Zero(m, n), Eigen::VectorXd(n), Eigen::MatrixXd(n, n)};
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index src = order[static_cast<std::size_t>(j)];
    out.s(j) = norms(src);
    out.v.col(j) = v.col(src);
    if (norms(src) > 0.0) out.u.col(j) = w.col(src) / norms(src);
  }
  return out;
}

}  // namespace oracle
