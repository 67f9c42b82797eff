// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Decom-Renorm-Merge over a single layer.
//
// The N task deltas are concatenated (side by side for the horizontal
// variant, stacked for the vertical one) and decomposed once. The shared
// factor becomes a common basis; the other factor is cut into one block per
// task. Each block row is rescaled to unit length with its norm moved into a
// per-task singular value, and the TIES operations (magnitude pruning, sign
// election, disjoint averaging) then run on those blocks before the merged
// block is mapped back through the shared basis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "drm/bundle_io.hpp"
#include "drm/error.hpp"
#include "drm/linalg.hpp"

namespace drm {

enum class Orientation { horizontal, vertical };
enum class Method { drm_h, drm_v, simple_avg, task_arithmetic, ties, dare_ties };
enum class PruneMode { joint, individual };

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

constexpr std::string_view to_string(Orientation o) noexcept {
  return o == Orientation::horizontal ? "horizontal" : "vertical";
}

constexpr std::string_view to_string(PruneMode m) noexcept {
  return m == PruneMode::joint ? "joint" : "individual";
}

constexpr std::string_view to_string(Method m) noexcept {
  switch (m) {
    case Method::drm_h: return "drm-h";
    case Method::drm_v: return "drm-v";
    case Method::simple_avg: return "avg";
    case Method::task_arithmetic: return "ta";
    case Method::ties: return "ties";
    case Method::dare_ties: return "dare-ties";
  }
  return "unknown";
}

inline std::optional<Method> parse_method(std::string_view s) noexcept {
  for (Method m : {Method::drm_h, Method::drm_v, Method::simple_avg, Method::task_arithmetic,
                   Method::ties, Method::dare_ties})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

inline std::optional<PruneMode> parse_prune_mode(std::string_view s) noexcept {
  if (s == "joint") return PruneMode::joint;
  if (s == "individual") return PruneMode::individual;
  return std::nullopt;
}

constexpr bool is_drm(Method m) noexcept { return m == Method::drm_h || m == Method::drm_v; }

/// Number of items kept when retaining `fraction` of `total`, i.e.
/// ceil(fraction * total), with products that land within 1e-9 above an
/// integer (0.3 * 10 = 3.0000000000000004) treated as that integer.
inline std::size_t retained_count(double fraction, std::size_t total) noexcept {
  const double exact = fraction * static_cast<double>(total);
  double kept = std::ceil(exact);
  if (kept - exact > 1.0 - 1e-9) kept -= 1.0;
  return static_cast<std::size_t>(std::clamp(kept, 0.0, static_cast<double>(total)));
}

struct MergeConfig {
  Method method = Method::drm_h;
  double retain = 0.20;
  std::vector<double> lambdas{1.0};
  double dare_drop = 0.80;
  double rank_drop = 0.0;
  PruneMode prune_mode = PruneMode::joint;
  bool enable_prune = true;
  bool enable_sign_elect = true;
  bool enable_disjoint = true;
  std::uint64_t seed = 0;

  /// Defaults: keep the top 20% and lambda = 1 for the DRM and TIES
  /// families, lambda = 0.4 for task arithmetic, DARE drop rate 0.8.
  static MergeConfig defaults(Method method) {
    MergeConfig cfg;
    cfg.method = method;
    if (method == Method::task_arithmetic) cfg.lambdas = {0.4};
    return cfg;
  }

  void validate() const {
    if (!(retain > 0.0 && retain <= 1.0))
      throw Error(ErrorKind::InvalidArgument, fmt::format("retain must lie in (0, 1], got {}", retain));
    if (!(dare_drop >= 0.0 && dare_drop < 1.0))
      throw Error(ErrorKind::InvalidArgument,
                  fmt::format("dare drop rate must lie in [0, 1), got {}", dare_drop));
    if (!(rank_drop >= 0.0 && rank_drop < 1.0))
      throw Error(ErrorKind::InvalidArgument,
                  fmt::format("rank drop rate must lie in [0, 1), got {}", rank_drop));
    if (lambdas.empty()) throw Error(ErrorKind::InvalidArgument, "no merging coefficient given");
    for (double l : lambdas)
      if (!std::isfinite(l)) throw Error(ErrorKind::InvalidArgument, "merging coefficient is not finite");
  }

  /// One coefficient per task: a single shared value is broadcast.
  std::vector<double> lambdas_for(std::size_t num_tasks) const {
    if (lambdas.size() == 1) return std::vector<double>(num_tasks, lambdas.front());
    if (lambdas.size() != num_tasks)
      throw Error(ErrorKind::InvalidArgument,
                  fmt::format("{} coefficients given for {} tasks", lambdas.size(), num_tasks));
    return lambdas;
  }

  nlohmann::json to_json() const {
    return {{"method", std::string(to_string(method))},
            {"retain", retain},
            {"lambdas", lambdas},
            {"dare_drop", dare_drop},
            {"rank_drop", rank_drop},
            {"prune_mode", std::string(to_string(prune_mode))},
            {"enable_prune", enable_prune},
            {"enable_sign_elect", enable_sign_elect},
            {"enable_disjoint", enable_disjoint},
            {"seed", seed}};
  }
};

/// Joint decomposition of one layer's task deltas.
///
/// `basis` is the shared factor: U (m x r) for the horizontal variant, V
/// (n x r) for the vertical one. Every orientation stores its task blocks as
/// r x dim matrices (V_t^T, or U_t^T for vertical), so the pruning and
/// averaging code is orientation-agnostic. Components with a zero singular
/// value carry zero block rows.
struct JointDecomposition {
  Orientation orientation = Orientation::horizontal;
  Matrix basis;
  Vector sigma;
  std::vector<Matrix> blocks;
  Matrix row_norms;                   // N x r
  std::vector<Matrix> renorm_blocks;  // unit or zero rows
  Matrix task_sigmas;                 // N x r, sigma[i] * row_norms(t, i)

  std::size_t num_tasks() const noexcept { return blocks.size(); }
  Index components() const noexcept { return sigma.size(); }
  Index rank() const noexcept { return (sigma.array() > 0.0).count(); }

  /// Map an r x dim block back to an m x n parameter-space matrix.
  Matrix to_parameter_space(const Matrix& block) const {
    Matrix out = basis * block;
    if (orientation == Orientation::vertical) out.transposeInPlace();
    return out;
  }

  /// basis * diag(sigma) * blocks[t], i.e. the task's delta.
  Matrix reconstruct(std::size_t t) const {
    return to_parameter_space(sigma.asDiagonal() * blocks[t]);
  }

  /// diag(task_sigmas[t]) * renorm_blocks[t].
  Matrix scaled_block(std::size_t t) const {
    return task_sigmas.row(static_cast<Index>(t)).transpose().asDiagonal() * renorm_blocks[t];
  }
};

/// (v / ||v||, ||v||), or (0, 0) for a numerically zero row.
inline std::pair<Vector, double> renormalize_row(const Vector& v) {
  const double norm = v.norm();
  if (!(norm > 1e-300)) return {Vector::Zero(v.size()), 0.0};
  return {v / norm, norm};
}

inline void fill_renormalization(JointDecomposition& jd) {
  const auto n = static_cast<Index>(jd.blocks.size());
  const Index r = jd.components();
  jd.row_norms = Matrix::Zero(n, r);
  jd.task_sigmas = Matrix::Zero(n, r);
  jd.renorm_blocks.assign(jd.blocks.size(), Matrix());
  for (Index t = 0; t < n; ++t) {
    const Matrix& block = jd.blocks[static_cast<std::size_t>(t)];
    Matrix& renorm = jd.renorm_blocks[static_cast<std::size_t>(t)];
    renorm.resize(block.rows(), block.cols());
    for (Index i = 0; i < r; ++i) {
      auto [unit, norm] = renormalize_row(block.row(i).transpose());
      renorm.row(i) = unit.transpose();
      jd.row_norms(t, i) = norm;
      jd.task_sigmas(t, i) = jd.sigma(i) * norm;
    }
  }
}

inline JointDecomposition decompose_joint(const DeltaSet& ds, Orientation orientation) {
  ds.validate();
  for (const auto& d : ds.deltas)
    if (!d.allFinite()) throw Error(ErrorKind::InvalidArgument, "delta is not finite", ds.layer_name);

  JointDecomposition jd;
  jd.orientation = orientation;
  const std::size_t n_tasks = ds.num_tasks();

  if (orientation == Orientation::horizontal) {
    ThinSVD svd = thin_svd(hconcat(ds.deltas));
    jd.basis = std::move(svd.U);
    jd.sigma = std::move(svd.sigma);
    for (std::size_t t = 0; t < n_tasks; ++t)
      jd.blocks.push_back(svd.Vt.middleCols(static_cast<Index>(t) * ds.cols, ds.cols));
  } else {
    ThinSVD svd = thin_svd(vconcat(ds.deltas));
    jd.basis = svd.Vt.transpose();
    jd.sigma = std::move(svd.sigma);
    for (std::size_t t = 0; t < n_tasks; ++t)
      jd.blocks.push_back(svd.U.middleRows(static_cast<Index>(t) * ds.rows, ds.rows).transpose());
  }

  for (Index i = 0; i < jd.components(); ++i)
    if (jd.sigma(i) == 0.0)
      for (auto& b : jd.blocks) b.row(i).setZero();

  fill_renormalization(jd);
  return jd;
}

/// Keep the leading ceil((1 - rank_drop) * rank) components by shared
/// singular value and zero the rest in every field.
inline JointDecomposition truncate_rank(JointDecomposition jd, double rank_drop) {
  if (!(rank_drop >= 0.0 && rank_drop < 1.0))
    throw Error(ErrorKind::InvalidArgument, "rank drop rate must lie in [0, 1)");
  const auto nonzero = static_cast<std::size_t>(jd.rank());
  const auto keep = static_cast<Index>(retained_count(1.0 - rank_drop, nonzero));
  for (Index i = keep; i < jd.components(); ++i) {
    jd.basis.col(i).setZero();
    jd.sigma(i) = 0.0;
    for (auto& b : jd.blocks) b.row(i).setZero();
    for (auto& b : jd.renorm_blocks) b.row(i).setZero();
    jd.row_norms.col(i).setZero();
    jd.task_sigmas.col(i).setZero();
  }
  return jd;
}

namespace detail {

struct Ranked {
  double magnitude;
  std::size_t flat;
};

// Descending magnitude, then ascending flat (task, row, col) index.
inline bool ranks_before(const Ranked& a, const Ranked& b) noexcept {
  if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
  return a.flat < b.flat;
}

inline void keep_top(std::span<const Matrix> blocks, std::span<Mask> masks, double retain) {
  std::vector<Ranked> entries;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& b : blocks) {
    offsets.push_back(total);
    total += static_cast<std::size_t>(b.size());
  }
  entries.reserve(total);
  for (std::size_t t = 0; t < blocks.size(); ++t) {
    const Matrix& b = blocks[t];
    for (Index i = 0; i < b.rows(); ++i)
      for (Index j = 0; j < b.cols(); ++j)
        entries.push_back({std::abs(b(i, j)),
                           offsets[t] + static_cast<std::size_t>(i * b.cols() + j)});
  }
  const std::size_t keep = retained_count(retain, total);
  if (keep < total)
    std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep),
                     entries.end(), ranks_before);
  for (auto& m : masks) m.setConstant(false);
  for (std::size_t k = 0; k < keep; ++k) {
    const std::size_t flat = entries[k].flat;
    const auto t = static_cast<std::size_t>(
        std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    const std::size_t local = flat - offsets[t];
    const Index cols = blocks[t].cols();
    masks[t](static_cast<Index>(local) / cols, static_cast<Index>(local) % cols) = true;
  }
}

}  // namespace detail

/// Top-k magnitude masks. Joint mode ranks the pooled entries of all blocks;
/// individual mode ranks each block on its own. Exactly ceil(retain * total)
/// entries are kept; ties at the threshold go to the smaller
/// (task, row, col) index.
inline std::vector<Mask> prune_topk(std::span<const Matrix> blocks, double retain, PruneMode mode) {
  if (!(retain > 0.0 && retain <= 1.0))
    throw Error(ErrorKind::InvalidArgument, "retain must lie in (0, 1]");
  std::vector<Mask> masks;
  masks.reserve(blocks.size());
  for (const auto& b : blocks) masks.emplace_back(b.rows(), b.cols());
  if (mode == PruneMode::joint) {
    detail::keep_top(blocks, masks, retain);
  } else {
    for (std::size_t t = 0; t < blocks.size(); ++t)
      detail::keep_top(blocks.subspan(t, 1), std::span<Mask>(masks).subspan(t, 1), retain);
  }
  return masks;
}

inline std::vector<Mask> full_masks(std::span<const Matrix> blocks) {
  std::vector<Mask> masks;
  for (const auto& b : blocks) masks.push_back(Mask::Constant(b.rows(), b.cols(), true));
  return masks;
}

inline std::vector<Matrix> apply_masks(std::span<const Matrix> blocks, std::span<const Mask> masks) {
  std::vector<Matrix> out;
  out.reserve(blocks.size());
  for (std::size_t t = 0; t < blocks.size(); ++t)
    out.push_back(masks[t].select(blocks[t], Matrix::Zero(blocks[t].rows(), blocks[t].cols())));
  return out;
}

/// Sign of the element-wise sum; a zero sum elects +1.
inline Matrix elect_signs(std::span<const Matrix> scaled_blocks) {
  if (scaled_blocks.empty()) throw Error(ErrorKind::InvalidArgument, "no blocks to elect signs from");
  Matrix sum = Matrix::Zero(scaled_blocks.front().rows(), scaled_blocks.front().cols());
  for (const auto& b : scaled_blocks) {
    if (b.rows() != sum.rows() || b.cols() != sum.cols())
      throw Error(ErrorKind::ShapeMismatch, "sign election blocks differ in shape");
    sum += b;
  }
  return sum.unaryExpr([](double x) { return x < 0.0 ? -1.0 : 1.0; });
}

/// Entries that survive their mask and, when `signs` is given, agree with
/// the elected sign. Everything else becomes zero.
inline std::vector<Matrix> filter_entries(std::span<const Matrix> scaled_blocks,
                                          std::span<const Mask> masks, const Matrix* signs) {
  std::vector<Matrix> out;
  out.reserve(scaled_blocks.size());
  for (std::size_t t = 0; t < scaled_blocks.size(); ++t) {
    const Matrix& b = scaled_blocks[t];
    if (masks[t].rows() != b.rows() || masks[t].cols() != b.cols() ||
        (signs && (signs->rows() != b.rows() || signs->cols() != b.cols())))
      throw Error(ErrorKind::ShapeMismatch, "mask or sign shape differs from block");
    Matrix f = Matrix::Zero(b.rows(), b.cols());
    for (Index i = 0; i < b.rows(); ++i)
      for (Index j = 0; j < b.cols(); ++j) {
        const double v = b(i, j);
        if (!masks[t](i, j) || v == 0.0) continue;
        if (signs && (v > 0.0) != ((*signs)(i, j) > 0.0)) continue;
        f(i, j) = v;
      }
    out.push_back(std::move(f));
  }
  return out;
}

/// Gamma (.) sum_t lambda_t * filtered_t, where Gamma is the reciprocal count
/// of tasks whose filtered entry is nonzero (0 where none is), or 1/N when
/// disjoint averaging is off.
inline Matrix combine_filtered(std::span<const Matrix> filtered, std::span<const double> lambdas,
                               bool enable_disjoint) {
  if (filtered.empty()) throw Error(ErrorKind::InvalidArgument, "nothing to average");
  if (lambdas.size() != filtered.size())
    throw Error(ErrorKind::InvalidArgument, "coefficient count differs from task count");
  const Index rows = filtered.front().rows(), cols = filtered.front().cols();
  Matrix sum = Matrix::Zero(rows, cols);
  Matrix count = Matrix::Zero(rows, cols);
  for (std::size_t t = 0; t < filtered.size(); ++t) {
    sum += lambdas[t] * filtered[t];
    count += (filtered[t].array() != 0.0).cast<double>().matrix();
  }
  if (!enable_disjoint) return sum / static_cast<double>(filtered.size());
  const Matrix gamma = count.unaryExpr([](double c) { return c > 0.0 ? 1.0 / c : 0.0; });
  return gamma.cwiseProduct(sum);
}

inline Matrix disjoint_average(std::span<const Matrix> scaled_blocks, std::span<const Mask> masks,
                               const Matrix* signs, std::span<const double> lambdas,
                               bool enable_disjoint) {
  const auto filtered = filter_entries(scaled_blocks, masks, signs);
  return combine_filtered(filtered, lambdas, enable_disjoint);
}

inline std::size_t count_nonzero(std::span<const Matrix> mats) {
  std::size_t n = 0;
  for (const auto& m : mats) n += static_cast<std::size_t>((m.array() != 0.0).count());
  return n;
}

/// One layer's merged delta plus the numbers the CLI summary reports.
struct LayerMerge {
  Matrix delta;
  Index rank_used = 0;        // components entering the merge (0 for baselines)
  std::size_t kept = 0;       // nonzero entries surviving prune and sign filtering
  std::size_t total = 0;      // entries considered across tasks
};

inline LayerMerge merge_drm_detailed(const DeltaSet& ds, const MergeConfig& cfg) {
  if (!is_drm(cfg.method))
    throw Error(ErrorKind::InvalidArgument, "merge_drm needs method drm-h or drm-v", ds.layer_name);
  cfg.validate();
  const auto orientation =
      cfg.method == Method::drm_h ? Orientation::horizontal : Orientation::vertical;
  const auto lambdas = cfg.lambdas_for(ds.num_tasks());

  JointDecomposition jd = truncate_rank(decompose_joint(ds, orientation), cfg.rank_drop);

  const auto masks = cfg.enable_prune ? prune_topk(jd.renorm_blocks, cfg.retain, cfg.prune_mode)
                                      : full_masks(jd.renorm_blocks);
  std::vector<Matrix> scaled;
  for (std::size_t t = 0; t < jd.num_tasks(); ++t) scaled.push_back(jd.scaled_block(t));

  std::optional<Matrix> signs;
  if (cfg.enable_sign_elect) signs = elect_signs(apply_masks(scaled, masks));

  const auto filtered = filter_entries(scaled, masks, signs ? &*signs : nullptr);
  const Matrix merged_block = combine_filtered(filtered, lambdas, cfg.enable_disjoint);

  LayerMerge out;
  out.delta = jd.to_parameter_space(merged_block);
  out.rank_used = jd.rank();
  out.kept = count_nonzero(filtered);
  for (const auto& b : jd.renorm_blocks) out.total += static_cast<std::size_t>(b.size());
  return out;
}

inline Matrix merge_drm(const DeltaSet& ds, const MergeConfig& cfg) {
  return merge_drm_detailed(ds, cfg).delta;
}

/// base + (1/N) * sum_t lambda_t * (task_t - base).
inline Vector merge_biases(const Vector& base, std::span<const Vector> tasks,
                           std::span<const double> lambdas) {
  if (tasks.empty()) throw Error(ErrorKind::InvalidArgument, "no task vectors");
  if (lambdas.size() != tasks.size())
    throw Error(ErrorKind::InvalidArgument, "coefficient count differs from task count");
  Vector acc = Vector::Zero(base.size());
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (tasks[t].size() != base.size())
      throw Error(ErrorKind::ShapeMismatch,
                  fmt::format("vector length {} differs from base {}", tasks[t].size(), base.size()));
    acc += lambdas[t] * (tasks[t] - base);
  }
  return base + acc / static_cast<double>(tasks.size());
}

}  // namespace drm
