// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <fmt/format.h>

#include "drm/error.hpp"

namespace drm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Relative cutoff below which a singular value counts as an exact zero.
inline constexpr double kRankTolerance = 1e-12;

/// Economy SVD A = U * diag(sigma) * Vt with r = min(m, n) components.
///
/// sigma is non-increasing and non-negative. Entries below
/// kRankTolerance * sigma_max are stored as exact zeros so that rank() is
/// well defined. Each column of U has its largest-magnitude entry positive;
/// the matching row of Vt is flipped with it.
struct ThinSVD {
  Matrix U;
  Vector sigma;
  Matrix Vt;

  Index size() const noexcept { return sigma.size(); }
  Index rank() const noexcept { return (sigma.array() > 0.0).count(); }
  Matrix reconstruct() const { return U * sigma.asDiagonal() * Vt; }
};

inline bool all_finite(const Matrix& a) noexcept { return a.allFinite(); }

/// Column-blocks appear in input order.
inline Matrix hconcat(std::span<const Matrix> mats) {
  if (mats.empty()) throw Error(ErrorKind::InvalidArgument, "hconcat of an empty list");
  const Index rows = mats.front().rows();
  Index cols = 0;
  for (const auto& m : mats) {
    if (m.rows() != rows)
      throw Error(ErrorKind::ShapeMismatch,
                  fmt::format("hconcat row counts differ ({} vs {})", rows, m.rows()));
    cols += m.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& m : mats) {
    out.middleCols(at, m.cols()) = m;
    at += m.cols();
  }
  return out;
}

/// Row-blocks appear in input order.
inline Matrix vconcat(std::span<const Matrix> mats) {
  if (mats.empty()) throw Error(ErrorKind::InvalidArgument, "vconcat of an empty list");
  const Index cols = mats.front().cols();
  Index rows = 0;
  for (const auto& m : mats) {
    if (m.cols() != cols)
      throw Error(ErrorKind::ShapeMismatch,
                  fmt::format("vconcat column counts differ ({} vs {})", cols, m.cols()));
    rows += m.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& m : mats) {
    out.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  return out;
}

inline ThinSVD thin_svd(const Matrix& a) {
  if (!a.allFinite()) throw Error(ErrorKind::InvalidArgument, "thin_svd input is not finite");
  const Index r = std::min(a.rows(), a.cols());
  ThinSVD out;
  if (r == 0) {
    out.U.resize(a.rows(), 0);
    out.sigma.resize(0);
    out.Vt.resize(0, a.cols());
    return out;
  }

  Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success)
    throw Error(ErrorKind::ConvergenceFailure, "SVD backend did not converge");

  out.U = svd.matrixU();
  out.sigma = svd.singularValues();
  out.Vt = svd.matrixV().transpose();

  const double cutoff = kRankTolerance * (out.sigma.size() ? out.sigma(0) : 0.0);
  for (Index i = 0; i < r; ++i) {
    if (!(out.sigma(i) > cutoff)) out.sigma(i) = 0.0;
  }

  for (Index j = 0; j < r; ++j) {
    Index pivot = 0;
    double best = -1.0;
    for (Index i = 0; i < out.U.rows(); ++i) {
      const double mag = std::abs(out.U(i, j));
      if (mag > best) {
        best = mag;
        pivot = i;
      }
    }
    if (out.U(pivot, j) < 0.0) {
      out.U.col(j) *= -1.0;
      out.Vt.row(j) *= -1.0;
    }
  }
  return out;
}

/// Largest singular value.
inline double spectral_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  const auto s = thin_svd(a);
  return s.sigma.size() ? s.sigma(0) : 0.0;
}

/// Relative Frobenius distance ||a - b||_F / max(1, ||b||_F).
inline double relative_frobenius(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

}  // namespace drm
