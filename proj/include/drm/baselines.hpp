// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Comparison methods that merge directly in parameter space.

#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "drm/engine.hpp"
#include "drm/random.hpp"

namespace drm {

/// Element-wise mean of full weights.
inline Matrix simple_average(std::span<const Matrix> weights) {
  if (weights.empty()) throw Error(ErrorKind::InvalidArgument, "nothing to average");
  Matrix sum = Matrix::Zero(weights.front().rows(), weights.front().cols());
  for (const auto& w : weights) {
    if (w.rows() != sum.rows() || w.cols() != sum.cols())
      throw Error(ErrorKind::ShapeMismatch, "averaged weights differ in shape");
    sum += w;
  }
  return sum / static_cast<double>(weights.size());
}

/// sum_t lambda_t * delta_t (the base is added back by the caller).
inline Matrix task_arithmetic(const DeltaSet& ds, std::span<const double> lambdas) {
  ds.validate();
  if (lambdas.size() != ds.num_tasks())
    throw Error(ErrorKind::InvalidArgument, "coefficient count differs from task count", ds.layer_name);
  Matrix sum = Matrix::Zero(ds.rows, ds.cols);
  for (std::size_t t = 0; t < ds.num_tasks(); ++t) sum += lambdas[t] * ds.deltas[t];
  return sum;
}

namespace detail {

inline LayerMerge elect_and_average(std::span<const Matrix> values, std::span<const Mask> masks,
                                    const MergeConfig& cfg, std::span<const double> lambdas) {
  std::optional<Matrix> signs;
  if (cfg.enable_sign_elect) signs = elect_signs(apply_masks(values, masks));
  const auto filtered = filter_entries(values, masks, signs ? &*signs : nullptr);
  LayerMerge out;
  out.delta = combine_filtered(filtered, lambdas, cfg.enable_disjoint);
  out.kept = count_nonzero(filtered);
  for (const auto& v : values) out.total += static_cast<std::size_t>(v.size());
  return out;
}

}  // namespace detail

/// TIES: per-task top-k magnitude pruning, sign election on the pruned sum,
/// disjoint averaging. Same operations as the DRM pipeline, applied to the
/// raw deltas.
inline LayerMerge ties_merge_detailed(const DeltaSet& ds, const MergeConfig& cfg) {
  ds.validate();
  cfg.validate();
  const auto lambdas = cfg.lambdas_for(ds.num_tasks());
  const auto masks = cfg.enable_prune ? prune_topk(ds.deltas, cfg.retain, PruneMode::individual)
                                      : full_masks(ds.deltas);
  return detail::elect_and_average(ds.deltas, masks, cfg, lambdas);
}

inline Matrix ties_merge(const DeltaSet& ds, const MergeConfig& cfg) {
  return ties_merge_detailed(ds, cfg).delta;
}

/// Zero each entry with probability p and scale survivors by 1/(1-p).
inline Matrix dare_drop_rescale(const Matrix& delta, double p, CounterRng& rng) {
  const double scale = 1.0 / (1.0 - p);
  Matrix out(delta.rows(), delta.cols());
  for (Index i = 0; i < delta.rows(); ++i)
    for (Index j = 0; j < delta.cols(); ++j) out(i, j) = rng.uniform() < p ? 0.0 : delta(i, j) * scale;
  return out;
}

/// Stream for task `t` of a layer; independent of evaluation order.
inline CounterRng dare_stream(std::uint64_t seed, std::string_view layer, std::size_t task) {
  return CounterRng(derive_key(seed, layer, task));
}

/// DARE-TIES: random drop-and-rescale per task, then TIES sign election and
/// disjoint averaging.
inline LayerMerge dare_ties_merge_detailed(const DeltaSet& ds, const MergeConfig& cfg) {
  ds.validate();
  cfg.validate();
  const auto lambdas = cfg.lambdas_for(ds.num_tasks());
  std::vector<Matrix> sparse;
  sparse.reserve(ds.num_tasks());
  for (std::size_t t = 0; t < ds.num_tasks(); ++t) {
    auto rng = dare_stream(cfg.seed, ds.layer_name, t);
    sparse.push_back(dare_drop_rescale(ds.deltas[t], cfg.dare_drop, rng));
  }
  return detail::elect_and_average(sparse, full_masks(sparse), cfg, lambdas);
}

inline Matrix dare_ties_merge(const DeltaSet& ds, const MergeConfig& cfg) {
  return dare_ties_merge_detailed(ds, cfg).delta;
}

}  // namespace drm
