#pragma once

#include <gtest/gtest.h>

#include <random>

#include "subedit/error.hpp"
#include "subedit/linalg.hpp"

#define EXPECT_ERRC(stmt, errc)                                       \
  do {                                                                \
    try {                                                             \
      stmt;                                                           \
      ADD_FAILURE() << "expected " #errc " from " #stmt;              \
    } catch (const ::subedit::Error& e) {                             \
      EXPECT_EQ(e.code(), errc) << e.what();                          \
    }                                                                 \
  } while (0)

namespace testutil {

inline subedit::Matrix randn(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  subedit::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline subedit::Matrix orthonormal(std::mt19937_64& rng, Eigen::Index d, Eigen::Index k) {
  Eigen::HouseholderQR<subedit::Matrix> qr(randn(rng, d, k));
  return qr.householderQ() * subedit::Matrix::Identity(d, k);
}

}  // namespace testutil
