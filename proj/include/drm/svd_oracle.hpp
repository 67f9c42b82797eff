// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Reference singular values for test-scale matrices. Deliberately shares no
// code with thin_svd: the Gram matrix of the smaller side is formed with
// plain loops and diagonalised by cyclic Jacobi rotations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "drm/error.hpp"
#include "drm/linalg.hpp"

namespace drm {

inline constexpr std::size_t kOracleMaxSide = 32;

/// Eigenvalues of a symmetric n x n matrix stored row-major.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> g, std::size_t n) {
  auto at = [&](std::size_t i, std::size_t j) -> double& { return g[i * n + j]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += at(i, j) * at(i, j);
        if (i != j) off += at(i, j) * at(i, j);
      }
    if (off <= 1e-32 * total || off == 0.0) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = at(i, i);
  return eig;
}

/// sqrt(eigenvalues of A A^T or A^T A, whichever is smaller), sorted
/// non-increasing.
inline std::vector<double> svd_oracle(const Matrix& a) {
  const auto m = static_cast<std::size_t>(a.rows());
  const auto n = static_cast<std::size_t>(a.cols());
  const std::size_t side = std::min(m, n);
  if (side > kOracleMaxSide)
    throw Error(ErrorKind::SizeTooLarge,
                fmt::format("svd_oracle is limited to min(m, n) <= {}", kOracleMaxSide));

  const bool rows_side = m <= n;
  const std::size_t inner = rows_side ? n : m;
  std::vector<double> gram(side * side, 0.0);
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < inner; ++k) {
        const double x = rows_side ? a(static_cast<Index>(i), static_cast<Index>(k))
                                   : a(static_cast<Index>(k), static_cast<Index>(i));
        const double y = rows_side ? a(static_cast<Index>(j), static_cast<Index>(k))
                                   : a(static_cast<Index>(k), static_cast<Index>(j));
        acc += x * y;
      }
      gram[i * side + j] = acc;
      gram[j * side + i] = acc;
    }
  }

  auto eig = jacobi_eigenvalues(std::move(gram), side);
  for (auto& e : eig) e = std::sqrt(std::max(e, 0.0));
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

}  // namespace drm
