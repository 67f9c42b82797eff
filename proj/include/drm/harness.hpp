// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Desk-scale evaluation: linear multitask problems with closed-form
// finetuning, negative-MSE scoring, method comparison and grid search.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "drm/bundle_io.hpp"
#include "drm/merge.hpp"
#include "drm/random.hpp"

namespace drm {

/// Linear regression task Y ~ X W^T. Optional held-out test data; when
/// absent, scoring falls back to the training data.
struct SynthTask {
  std::string name;
  Matrix X;  // s x n
  Matrix Y;  // s x m
  double ridge = 0.0;
  Matrix test_X;
  Matrix test_Y;

  bool has_test() const noexcept { return test_X.size() > 0; }
};

/// argmin_W ||X W^T - Y||_F^2 + ridge * ||W - base||_F^2 via the normal
/// equations (X^T X + ridge I) W^T = X^T Y + ridge base^T.
inline Matrix closed_form_finetune(const Matrix& base, const SynthTask& task) {
  if (task.X.rows() != task.Y.rows() || task.X.cols() != base.cols() || task.Y.cols() != base.rows())
    throw Error(ErrorKind::ShapeMismatch, "task data does not match the base layer", task.name);
  if (task.ridge < 0.0) throw Error(ErrorKind::InvalidArgument, "ridge must be non-negative", task.name);
  const Index n = base.cols();
  const Matrix gram = task.X.transpose() * task.X + task.ridge * Matrix::Identity(n, n);
  const Matrix rhs = task.X.transpose() * task.Y + task.ridge * base.transpose();
  Eigen::LDLT<Matrix> ldlt(gram);
  // rcond() misses exact zero pivots, so look at D as well
  const Vector d = ldlt.vectorD();
  const double dmax = d.size() ? d.cwiseAbs().maxCoeff() : 0.0;
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(d.minCoeff() > 1e-13 * dmax) ||
      !(ldlt.rcond() > 1e-13))
    throw Error(ErrorKind::SingularSystem, "normal equations are singular", task.name);
  return ldlt.solve(rhs).transpose();
}

/// Negative mean squared error of X W^T against Y.
inline double task_score(const Matrix& model, const Matrix& X, const Matrix& Y) {
  if (X.cols() != model.cols() || Y.cols() != model.rows() || X.rows() != Y.rows())
    throw Error(ErrorKind::ShapeMismatch, "model does not match task data");
  if (Y.size() == 0) return 0.0;
  return -(X * model.transpose() - Y).squaredNorm() / static_cast<double>(Y.size());
}

struct Evaluation {
  std::vector<double> scores;
  double mean = 0.0;
};

/// Per-task scores on test data (or training data when a task has none).
inline Evaluation evaluate(const Matrix& model, std::span<const SynthTask> tasks) {
  Evaluation ev;
  for (const auto& t : tasks)
    ev.scores.push_back(t.has_test() ? task_score(model, t.test_X, t.test_Y) : task_score(model, t.X, t.Y));
  if (!ev.scores.empty())
    ev.mean = std::accumulate(ev.scores.begin(), ev.scores.end(), 0.0) / static_cast<double>(ev.scores.size());
  return ev;
}

/// Scores a single-layer bundle: its only rank-2 tensor is the model.
inline Evaluation evaluate(const TensorBundle& model, std::span<const SynthTask> tasks) {
  const Tensor* layer = nullptr;
  for (const auto& [name, t] : model)
    if (t.rank() == 2) {
      if (layer) throw Error(ErrorKind::ShapeMismatch, "bundle has more than one rank-2 tensor");
      layer = &t;
    }
  if (!layer) throw Error(ErrorKind::ShapeMismatch, "bundle has no rank-2 tensor");
  return evaluate(layer->to_matrix(), tasks);
}

/// Fraction of the finetuned score a merged model recovers, as the ratio of
/// mean squared errors (1 means no loss).
inline double score_recovery(double finetuned_score, double merged_score) noexcept {
  if (merged_score == 0.0) return 1.0;
  return finetuned_score / merged_score;
}

// ---------------------------------------------------------------------------
// Synthetic suites

struct SynthSuite {
  Matrix base;
  std::vector<SynthTask> tasks;
};

struct SuiteOptions {
  std::size_t num_tasks = 3;
  Index rows = 16;       // m, outputs
  Index cols = 12;       // n, inputs
  Index samples = 120;   // training samples per task
  Index test_samples = 60;
  double noise = 0.05;
  double task_scale = 0.5;
  double ridge = 0.0;
  bool identical = false;  // every task is a copy of task 0
};

inline Matrix gaussian_matrix(CounterRng& rng, Index rows, Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline SynthSuite make_synth_suite(std::uint64_t seed, const SuiteOptions& opt) {
  if (opt.num_tasks == 0) throw Error(ErrorKind::InvalidArgument, "need at least one task");
  SynthSuite suite;
  CounterRng base_rng(derive_key(seed, "suite/base"));
  suite.base = gaussian_matrix(base_rng, opt.rows, opt.cols, 1.0 / std::sqrt(static_cast<double>(opt.cols)));
  for (std::size_t t = 0; t < opt.num_tasks; ++t) {
    CounterRng rng(derive_key(seed, "suite/task", opt.identical ? 0 : t));
    const Matrix truth =
        suite.base + gaussian_matrix(rng, opt.rows, opt.cols, opt.task_scale / std::sqrt(static_cast<double>(opt.cols)));
    SynthTask task;
    task.name = fmt::format("task{}", t);
    task.ridge = opt.ridge;
    task.X = gaussian_matrix(rng, opt.samples, opt.cols);
    task.Y = task.X * truth.transpose() + gaussian_matrix(rng, opt.samples, opt.rows, opt.noise);
    task.test_X = gaussian_matrix(rng, opt.test_samples, opt.cols);
    task.test_Y = task.test_X * truth.transpose() + gaussian_matrix(rng, opt.test_samples, opt.rows, opt.noise);
    suite.tasks.push_back(std::move(task));
  }
  return suite;
}

/// Finetune every task from the base and collect the deltas.
inline DeltaSet finetune_deltas(const Matrix& base, std::span<const SynthTask> tasks,
                                std::vector<Matrix>* finetuned = nullptr) {
  std::vector<Matrix> deltas;
  std::vector<std::string> names;
  for (const auto& t : tasks) {
    Matrix w = closed_form_finetune(base, t);
    deltas.push_back(w - base);
    names.push_back(t.name);
    if (finetuned) finetuned->push_back(std::move(w));
  }
  return DeltaSet::from("synthetic", std::move(deltas), std::move(names));
}

/// Applies a (retain, lambda) grid point to a method's config. DARE reads
/// the retention rate as 1 - drop rate.
inline MergeConfig config_at(MergeConfig cfg, double retain, double lambda) {
  cfg.retain = retain;
  cfg.lambdas = {lambda};
  if (cfg.method == Method::dare_ties) cfg.dare_drop = 1.0 - retain;
  return cfg;
}

/// Merged model (base + merged delta) for one config.
inline Matrix merged_model(const Matrix& base, const DeltaSet& ds, const MergeConfig& cfg) {
  return base + merge_layer(ds, cfg).delta;
}

// ---------------------------------------------------------------------------
// Method comparison

struct BenchRow {
  Method method{};
  double retain = 0.0;
  double lambda = 0.0;
  double mean_score = 0.0;
  double recovery = 0.0;
};

/// JSON: {"kind": "bench", "seed": int, "tasks": int, "finetuned_mean": num,
///        "rows": [{"method", "retain", "lambda", "mean_score", "recovery"}]}
struct BenchReport {
  std::uint64_t seed = 0;
  std::size_t num_tasks = 0;
  bool identical = false;
  double finetuned_mean = 0.0;
  std::vector<BenchRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& row : rows)
      r.push_back({{"method", std::string(to_string(row.method))},
                   {"retain", row.retain},
                   {"lambda", row.lambda},
                   {"mean_score", row.mean_score},
                   {"recovery", row.recovery}});
    return {{"kind", "bench"}, {"seed", seed},         {"tasks", num_tasks},
            {"identical", identical}, {"finetuned_mean", finetuned_mean}, {"rows", r}};
  }

  std::string to_text() const {
    std::string out = fmt::format("# bench synthetic seed={} tasks={} identical={} finetuned_mean={:.9e}\n",
                                  seed, num_tasks, identical, finetuned_mean);
    out += "method\tretain\tlambda\tmean_score\trecovery\n";
    for (const auto& r : rows)
      out += fmt::format("{}\t{:.2f}\t{:.4f}\t{:.9e}\t{:.6f}\n", to_string(r.method), r.retain, r.lambda,
                         r.mean_score, r.recovery);
    return out;
  }
};

inline constexpr Method kAllMethods[] = {Method::drm_h, Method::drm_v, Method::simple_avg,
                                         Method::task_arithmetic, Method::ties, Method::dare_ties};

/// Settings under which merging N copies of one task reproduces it: full
/// retention, lambda = 1 for the averaging family and 1/N for task
/// arithmetic, no DARE drops.
inline MergeConfig neutral_config(Method method, std::size_t num_tasks) {
  MergeConfig cfg = MergeConfig::defaults(method);
  cfg.retain = 1.0;
  cfg.dare_drop = 0.0;
  cfg.lambdas = {method == Method::task_arithmetic ? 1.0 / static_cast<double>(num_tasks) : 1.0};
  return cfg;
}

/// Every method against the individually finetuned models. The reference
/// score is the mean over tasks of each finetuned model on its own task.
inline BenchReport bench_synthetic(std::uint64_t seed, const SuiteOptions& opt) {
  const SynthSuite suite = make_synth_suite(seed, opt);
  std::vector<Matrix> finetuned;
  const DeltaSet ds = finetune_deltas(suite.base, suite.tasks, &finetuned);

  BenchReport rep;
  rep.seed = seed;
  rep.num_tasks = opt.num_tasks;
  rep.identical = opt.identical;
  double ref = 0.0;
  for (std::size_t t = 0; t < suite.tasks.size(); ++t)
    ref += evaluate(finetuned[t], std::span(&suite.tasks[t], 1)).mean;
  rep.finetuned_mean = ref / static_cast<double>(suite.tasks.size());

  for (Method m : kAllMethods) {
    MergeConfig cfg = opt.identical ? neutral_config(m, opt.num_tasks) : MergeConfig::defaults(m);
    cfg.seed = seed;
    const Evaluation ev = evaluate(merged_model(suite.base, ds, cfg), suite.tasks);
    rep.rows.push_back({m, m == Method::dare_ties ? 1.0 - cfg.dare_drop : cfg.retain, cfg.lambdas.front(),
                        ev.mean, score_recovery(rep.finetuned_mean, ev.mean)});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Grid search

/// k / 10 for k in [lo, hi]; exact tenths rather than accumulated steps.
inline std::vector<double> tenths(int lo, int hi) {
  std::vector<double> out;
  for (int k = lo; k <= hi; ++k) out.push_back(k / 10.0);
  return out;
}

/// Retention grid {0.1, ..., 1.0}; a single 1.0 for methods without pruning.
inline std::vector<double> default_retain_grid(Method m) {
  if (m == Method::task_arithmetic || m == Method::simple_avg) return {1.0};
  return tenths(1, 10);
}

/// Lambda grid {0.1, ..., 1.0} for task arithmetic, {0.8, ..., 1.5} for the
/// averaging methods.
inline std::vector<double> default_lambda_grid(Method m) {
  if (m == Method::task_arithmetic) return tenths(1, 10);
  if (m == Method::simple_avg) return {1.0};
  return tenths(8, 15);
}

struct GridPoint {
  double retain = 0.0;
  double lambda = 0.0;
  double val_score = 0.0;
};

/// JSON: {"kind": "tune", "method": str, "grid": [{"retain", "lambda", "val_score"}],
///        "best": {...}, "test_scores": [num per task], "test_mean": num}
struct TuneResult {
  Method method{};
  std::vector<GridPoint> grid;  // retain-major, both ascending
  GridPoint best;
  std::vector<double> test_scores;
  double test_mean = 0.0;

  nlohmann::json to_json() const {
    auto point = [](const GridPoint& g) {
      return nlohmann::json{{"retain", g.retain}, {"lambda", g.lambda}, {"val_score", g.val_score}};
    };
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& g : grid) rows.push_back(point(g));
    return {{"kind", "tune"},           {"method", std::string(to_string(method))},
            {"grid", rows},             {"best", point(best)},
            {"test_scores", test_scores}, {"test_mean", test_mean}};
  }

  std::string to_text() const {
    std::string out = fmt::format("# tune method={} points={} best_retain={:.4f} best_lambda={:.4f} "
                                  "best_val={:.9e} test_mean={:.9e}\n",
                                  to_string(method), grid.size(), best.retain, best.lambda, best.val_score,
                                  test_mean);
    out += "retain\tlambda\tval_score\n";
    for (const auto& g : grid) out += fmt::format("{:.4f}\t{:.4f}\t{:.9e}\n", g.retain, g.lambda, g.val_score);
    return out;
  }
};

/// Deterministic 90/10 train/validation split of a task's samples.
inline std::pair<SynthTask, SynthTask> split_validation(const SynthTask& task, std::uint64_t seed,
                                                        std::size_t task_index) {
  const Index s = task.X.rows();
  std::vector<Index> order(static_cast<std::size_t>(s));
  std::iota(order.begin(), order.end(), Index{0});
  CounterRng rng(derive_key(seed, "validation-split", task_index));
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  const Index n_val = std::max<Index>(1, static_cast<Index>(std::llround(0.1 * static_cast<double>(s))));
  SynthTask train = task, val = task;
  train.X.resize(s - n_val, task.X.cols());
  train.Y.resize(s - n_val, task.Y.cols());
  val.X.resize(n_val, task.X.cols());
  val.Y.resize(n_val, task.Y.cols());
  for (Index k = 0; k < s; ++k) {
    const Index src = order[static_cast<std::size_t>(k)];
    if (k < n_val) {
      val.X.row(k) = task.X.row(src);
      val.Y.row(k) = task.Y.row(src);
    } else {
      train.X.row(k - n_val) = task.X.row(src);
      train.Y.row(k - n_val) = task.Y.row(src);
    }
  }
  val.test_X.resize(0, 0);
  val.test_Y.resize(0, 0);
  return {std::move(train), std::move(val)};
}

/// Scores closer than this (relative to max(1, |best|)) count as a tie, so
/// rounding noise does not override the smallest-retain, smallest-lambda
/// rule.
inline constexpr double kTuneTieTolerance = 1e-12;

/// Grid search over (retain, lambda) with a shared lambda. Finetunes on the
/// training split, scores the mean validation score, and picks the maximum;
/// ties go to the smaller retain, then the smaller lambda. Held-out scores
/// at the best point use each task's test data.
inline TuneResult grid_tune(const Matrix& base, std::span<const SynthTask> tasks, Method method,
                            std::vector<double> retain_grid, std::vector<double> lambda_grid,
                            std::uint64_t val_split_seed, const MergeConfig* template_cfg = nullptr) {
  if (retain_grid.empty() || lambda_grid.empty())
    throw Error(ErrorKind::InvalidArgument, "tuning grids must be non-empty");
  std::sort(retain_grid.begin(), retain_grid.end());
  std::sort(lambda_grid.begin(), lambda_grid.end());

  std::vector<SynthTask> train, val;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    auto [tr, va] = split_validation(tasks[t], val_split_seed, t);
    train.push_back(std::move(tr));
    val.push_back(std::move(va));
  }
  const DeltaSet ds = finetune_deltas(base, train);

  MergeConfig cfg = template_cfg ? *template_cfg : MergeConfig::defaults(method);
  cfg.method = method;

  TuneResult res;
  res.method = method;
  bool have_best = false;
  for (double retain : retain_grid)
    for (double lambda : lambda_grid) {
      const Matrix model = merged_model(base, ds, config_at(cfg, retain, lambda));
      const double score = evaluate(model, val).mean;
      res.grid.push_back({retain, lambda, score});
      if (!have_best || score > res.best.val_score + kTuneTieTolerance * std::max(1.0, std::abs(res.best.val_score))) {
        res.best = res.grid.back();
        have_best = true;
      }
    }

  const Matrix best_model = merged_model(base, ds, config_at(cfg, res.best.retain, res.best.lambda));
  std::vector<SynthTask> held_out;
  for (std::size_t t = 0; t < tasks.size(); ++t) held_out.push_back(tasks[t].has_test() ? tasks[t] : val[t]);
  const Evaluation ev = evaluate(best_model, held_out);
  res.test_scores = ev.scores;
  res.test_mean = ev.mean;
  return res;
}

}  // namespace drm
