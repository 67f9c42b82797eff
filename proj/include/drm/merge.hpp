// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "drm/baselines.hpp"
#include "drm/bundle_io.hpp"
#include "drm/engine.hpp"

namespace drm {

/// Merged delta of one layer under any method.
inline LayerMerge merge_layer(const DeltaSet& ds, const MergeConfig& cfg) {
  switch (cfg.method) {
    case Method::drm_h:
    case Method::drm_v:
      return merge_drm_detailed(ds, cfg);
    case Method::ties:
      return ties_merge_detailed(ds, cfg);
    case Method::dare_ties:
      return dare_ties_merge_detailed(ds, cfg);
    case Method::task_arithmetic: {
      cfg.validate();
      LayerMerge out;
      out.delta = task_arithmetic(ds, cfg.lambdas_for(ds.num_tasks()));
      out.kept = count_nonzero(ds.deltas);
      out.total = ds.num_tasks() * static_cast<std::size_t>(ds.rows * ds.cols);
      return out;
    }
    case Method::simple_avg: {
      // mean of the weights minus the base is the mean of the deltas
      LayerMerge out;
      out.delta = simple_average(ds.deltas);
      out.kept = count_nonzero(ds.deltas);
      out.total = ds.num_tasks() * static_cast<std::size_t>(ds.rows * ds.cols);
      return out;
    }
  }
  throw Error(ErrorKind::InvalidArgument, "unknown method", ds.layer_name);
}

struct LayerSummary {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  Index rank_used = 0;
  std::size_t kept = 0;
  std::size_t total = 0;
};

struct BundleMerge {
  TensorBundle bundle;
  std::vector<LayerSummary> layers;
};

/// Metadata key holding the serialised MergeConfig in merged bundles.
inline constexpr const char* kConfigMetadataKey = "drm.merge_config";

/// Merge aligned bundles: rank-2 tensors through the configured method,
/// rank-1 tensors through weighted averaging. Layers run on up to `threads`
/// workers (0 picks the hardware concurrency); the result does not depend
/// on the thread count.
inline BundleMerge merge_bundle_detailed(const TensorBundle& base, std::span<const TensorBundle> tasks,
                                         const MergeConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  const DeltaExtraction ex = extract_deltas(base, tasks);
  const auto lambdas = cfg.lambdas_for(tasks.size());

  std::vector<Matrix> merged(ex.layers.size());
  std::vector<LayerSummary> summaries(ex.layers.size());
  std::vector<std::exception_ptr> failures(ex.layers.size());

  auto run_layer = [&](std::size_t k) {
    const DeltaSet& ds = ex.layers[k];
    try {
      LayerMerge lm;
      if (cfg.method == Method::simple_avg) {
        std::vector<Matrix> weights;
        for (const auto& t : tasks) weights.push_back(t.at(ds.layer_name).to_matrix());
        lm.delta = simple_average(weights);  // full weights, not a delta
        lm.total = tasks.size() * static_cast<std::size_t>(ds.rows * ds.cols);
        lm.kept = lm.total;
      } else {
        lm = merge_layer(ds, cfg);
      }
      merged[k] = std::move(lm.delta);
      summaries[k] = {ds.layer_name, ds.rows, ds.cols, lm.rank_used, lm.kept, lm.total};
    } catch (const Error& e) {
      failures[k] = e.subject().empty()
                        ? std::make_exception_ptr(Error(e.kind(), e.what(), ds.layer_name))
                        : std::current_exception();
    } catch (...) {
      failures[k] = std::current_exception();
    }
  };

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, ex.layers.size())));
  if (threads <= 1) {
    for (std::size_t k = 0; k < ex.layers.size(); ++k) run_layer(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < ex.layers.size(); k = next++) run_layer(k);
      });
  }
  for (const auto& f : failures)
    if (f) std::rethrow_exception(f);

  BundleMerge out;
  std::size_t layer_k = 0, bias_k = 0;
  for (const auto& [name, tensor] : base) {
    if (tensor.rank() == 2) {
      const Matrix& m = merged[layer_k++];
      const Matrix w = cfg.method == Method::simple_avg ? m : tensor.to_matrix() + m;
      out.bundle.add(name, Tensor::from_matrix(w, tensor.dtype()));
    } else {
      const BiasEntry& b = ex.biases[bias_k++];
      Vector v;
      if (cfg.method == Method::simple_avg) {
        const std::vector<double> ones(b.tasks.size(), 1.0);
        v = merge_biases(b.base, b.tasks, ones);
      } else {
        v = merge_biases(b.base, b.tasks, lambdas);
      }
      out.bundle.add(name, Tensor::from_vector(v, tensor.dtype()));
    }
  }
  out.bundle.metadata = base.metadata;
  out.bundle.metadata[kConfigMetadataKey] = cfg.to_json().dump();
  out.layers = std::move(summaries);
  return out;
}

inline TensorBundle merge_bundle(const TensorBundle& base, std::span<const TensorBundle> tasks,
                                 const MergeConfig& cfg, unsigned threads = 1) {
  return merge_bundle_detailed(base, tasks, cfg, threads).bundle;
}

}  // namespace drm
