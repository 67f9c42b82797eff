// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Diagnostics of the joint space: per-row pruning densities, sign agreement
// in original / decomposed / back-projected spaces, the concatenation
// perturbation bound, and singular spectra. Every report renders both as a
// line-oriented text table and as JSON.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "drm/engine.hpp"
#include "drm/random.hpp"

namespace drm {

inline Orientation orientation_of(Method m) noexcept {
  return m == Method::drm_v ? Orientation::vertical : Orientation::horizontal;
}

// ---------------------------------------------------------------------------
// Pruning density

/// Drop fractions per (task, basis row).
///
/// JSON: {"kind": "prune-density", "layer": str, "orientation": str,
///        "retain": num, "renorm": bool, "prune_mode": str,
///        "drop_fraction": [[num per row] per task]}
struct DensityReport {
  std::string layer_name;
  Orientation orientation = Orientation::horizontal;
  double retain = 0.0;
  bool renorm = true;
  PruneMode prune_mode = PruneMode::joint;
  Matrix drop_fraction;  // N x active rows

  double max_drop() const { return drop_fraction.size() ? drop_fraction.maxCoeff() : 0.0; }
  double min_drop() const { return drop_fraction.size() ? drop_fraction.minCoeff() : 0.0; }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (Index t = 0; t < drop_fraction.rows(); ++t) {
      std::vector<double> r(drop_fraction.cols());
      for (Index i = 0; i < drop_fraction.cols(); ++i) r[static_cast<std::size_t>(i)] = drop_fraction(t, i);
      rows.push_back(r);
    }
    return {{"kind", "prune-density"},   {"layer", layer_name},
            {"orientation", std::string(to_string(orientation))},
            {"retain", retain},          {"renorm", renorm},
            {"prune_mode", std::string(to_string(prune_mode))},
            {"drop_fraction", rows}};
  }

  std::string to_text() const {
    std::string out = fmt::format("# prune-density layer={} orientation={} retain={} renorm={} mode={}\n",
                                  layer_name, to_string(orientation), retain, renorm ? "on" : "off",
                                  to_string(prune_mode));
    out += "task\trow\tdrop_fraction\n";
    for (Index t = 0; t < drop_fraction.rows(); ++t)
      for (Index i = 0; i < drop_fraction.cols(); ++i)
        out += fmt::format("{}\t{}\t{:.6f}\n", t, i, drop_fraction(t, i));
    return out;
  }
};

/// Fraction of each row's entries that the masks drop.
inline Matrix row_drop_fractions(std::span<const Mask> masks, Index rows) {
  Matrix out(static_cast<Index>(masks.size()), rows);
  for (std::size_t t = 0; t < masks.size(); ++t)
    for (Index i = 0; i < rows; ++i) {
      const auto dropped = (!masks[t].row(i)).count();
      out(static_cast<Index>(t), i) = static_cast<double>(dropped) / static_cast<double>(masks[t].cols());
    }
  return out;
}

inline DensityReport pruning_density(const DeltaSet& ds, const MergeConfig& cfg, bool with_renorm) {
  cfg.validate();
  DensityReport rep;
  rep.layer_name = ds.layer_name;
  rep.orientation = orientation_of(cfg.method);
  rep.retain = cfg.retain;
  rep.renorm = with_renorm;
  rep.prune_mode = cfg.prune_mode;

  const JointDecomposition jd = truncate_rank(decompose_joint(ds, rep.orientation), cfg.rank_drop);
  const auto& pruned = with_renorm ? jd.renorm_blocks : jd.blocks;
  const auto masks = prune_topk(pruned, cfg.retain, cfg.prune_mode);
  rep.drop_fraction = row_drop_fractions(masks, jd.rank());
  return rep;
}

// ---------------------------------------------------------------------------
// Sign agreement

enum class AgreementSpace { original, decomposed_h, decomposed_v, backprojected_h, backprojected_v };

constexpr std::string_view to_string(AgreementSpace s) noexcept {
  switch (s) {
    case AgreementSpace::original: return "original";
    case AgreementSpace::decomposed_h: return "decomposed-h";
    case AgreementSpace::decomposed_v: return "decomposed-v";
    case AgreementSpace::backprojected_h: return "backprojected-h";
    case AgreementSpace::backprojected_v: return "backprojected-v";
  }
  return "unknown";
}

inline std::optional<AgreementSpace> parse_space(std::string_view s) noexcept {
  for (auto sp : {AgreementSpace::original, AgreementSpace::decomposed_h, AgreementSpace::decomposed_v,
                  AgreementSpace::backprojected_h, AgreementSpace::backprojected_v})
    if (to_string(sp) == s) return sp;
  return std::nullopt;
}

inline constexpr std::size_t kAgreementBins = 10;

/// Lower edge of bin k over [0.5, 1.0]; bin 9 also takes 1.0.
inline double agreement_edge(std::size_t k) noexcept { return static_cast<double>(10 + k) / 20.0; }

inline std::size_t agreement_bin(double a) noexcept {
  std::size_t bin = 0;
  for (std::size_t k = 1; k < kAgreementBins; ++k)
    if (a >= agreement_edge(k)) bin = k;
  return bin;
}

/// max(#positive, #negative) / #nonzero, or nullopt when all are zero.
inline std::optional<double> position_agreement(std::span<const double> values) noexcept {
  std::size_t pos = 0, neg = 0;
  for (double v : values) {
    if (v > 0.0) ++pos;
    else if (v < 0.0) ++neg;
  }
  if (pos + neg == 0) return std::nullopt;
  return static_cast<double>(std::max(pos, neg)) / static_cast<double>(pos + neg);
}

/// JSON: {"kind": "sign-agreement", "layer": str, "space": str,
///        "edges": [11 nums], "counts": [10 ints], "tallied": int, "mean": num}
struct AgreementHistogram {
  std::string layer_name;
  AgreementSpace space = AgreementSpace::original;
  std::vector<double> edges;
  std::vector<std::size_t> counts;
  std::size_t tallied = 0;
  double mean = 0.0;
  double min_agreement = 1.0;
  double max_agreement = 0.5;

  nlohmann::json to_json() const {
    return {{"kind", "sign-agreement"}, {"layer", layer_name}, {"space", std::string(to_string(space))},
            {"edges", edges},           {"counts", counts},    {"tallied", tallied},
            {"mean", mean}};
  }

  std::string to_text() const {
    std::string out = fmt::format("# sign-agreement layer={} space={} tallied={} mean={:.6f}\n",
                                  layer_name, to_string(space), tallied, mean);
    out += "bin_lo\tbin_hi\tcount\n";
    for (std::size_t k = 0; k < counts.size(); ++k)
      out += fmt::format("{:.2f}\t{:.2f}\t{}\n", edges[k], edges[k + 1], counts[k]);
    return out;
  }
};

/// Tally agreement over every position of equally shaped task matrices.
inline AgreementHistogram tally_agreement(std::span<const Matrix> values) {
  AgreementHistogram h;
  for (std::size_t k = 0; k <= kAgreementBins; ++k) h.edges.push_back(agreement_edge(k));
  h.counts.assign(kAgreementBins, 0);
  if (values.empty()) return h;
  const Index rows = values.front().rows(), cols = values.front().cols();
  std::vector<double> column(values.size());
  double sum = 0.0;
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) {
      for (std::size_t t = 0; t < values.size(); ++t) column[t] = values[t](i, j);
      const auto a = position_agreement(column);
      if (!a) continue;
      ++h.counts[agreement_bin(*a)];
      ++h.tallied;
      sum += *a;
      h.min_agreement = std::min(h.min_agreement, *a);
      h.max_agreement = std::max(h.max_agreement, *a);
    }
  h.mean = h.tallied ? sum / static_cast<double>(h.tallied) : 0.0;
  return h;
}

/// Sign agreement after pruning in the requested space. Original space
/// prunes each delta on its own (TIES); decomposed spaces prune the
/// renormalised blocks; back-projected spaces map each task's pruned block
/// back through the shared basis with its own singular values.
inline AgreementHistogram sign_agreement(const DeltaSet& ds, const MergeConfig& cfg, AgreementSpace space) {
  ds.validate();
  cfg.validate();
  if (ds.num_tasks() < 2)
    throw Error(ErrorKind::NeedTwoTasks, "sign agreement needs at least two tasks", ds.layer_name);

  AgreementHistogram h;
  if (space == AgreementSpace::original) {
    const auto masks = prune_topk(ds.deltas, cfg.retain, PruneMode::individual);
    h = tally_agreement(apply_masks(ds.deltas, masks));
  } else {
    const bool horizontal =
        space == AgreementSpace::decomposed_h || space == AgreementSpace::backprojected_h;
    const JointDecomposition jd = truncate_rank(
        decompose_joint(ds, horizontal ? Orientation::horizontal : Orientation::vertical), cfg.rank_drop);
    const auto masks = prune_topk(jd.renorm_blocks, cfg.retain, cfg.prune_mode);
    const auto pruned = apply_masks(jd.renorm_blocks, masks);
    if (space == AgreementSpace::decomposed_h || space == AgreementSpace::decomposed_v) {
      h = tally_agreement(pruned);
    } else {
      std::vector<Matrix> back;
      for (std::size_t t = 0; t < pruned.size(); ++t)
        back.push_back(jd.to_parameter_space(
            jd.task_sigmas.row(static_cast<Index>(t)).transpose().asDiagonal() * pruned[t]));
      h = tally_agreement(back);
    }
  }
  h.layer_name = ds.layer_name;
  h.space = space;
  return h;
}

// ---------------------------------------------------------------------------
// Perturbation bound of the concatenation

/// One (i, t) evaluation of
///   |sigma_i(M~) - sqrt(k) sigma_i(dW_t)|
///     <= 1/(sqrt(k) sigma_i(dW_t)) * sum_j (2 ||dW_t||_2 ||E_j||_2 + ||E_j||_2^2)
/// with M~ the concatenation of all k deltas and E_j = dW_j - dW_t.
struct BoundEntry {
  Index index = 0;
  std::size_t task = 0;
  double sigma_joint = 0.0;
  double sigma_task = 0.0;
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

/// holds == lhs <= rhs * (1 + 1e-9) + slack, where slack = 1e-12 *
/// max(1, sigma_1(M~)) absorbs SVD rounding when the perturbation is
/// exactly zero (lhs is then a few ulps and rhs is exactly 0).
///
/// JSON: {"kind": "svd-bound", "layer": str, "k": int,
///        "entries": [{"i", "task", "sigma_joint", "sigma_task", "lhs", "rhs", "holds"}]}
struct BoundReport {
  std::string layer_name;
  std::size_t k = 0;
  std::vector<BoundEntry> entries;

  bool all_hold() const {
    return std::all_of(entries.begin(), entries.end(), [](const BoundEntry& e) { return e.holds; });
  }
  double max_lhs() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.lhs);
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : entries)
      rows.push_back({{"i", e.index},       {"task", e.task},     {"sigma_joint", e.sigma_joint},
                      {"sigma_task", e.sigma_task}, {"lhs", e.lhs}, {"rhs", e.rhs},
                      {"holds", e.holds}});
    return {{"kind", "svd-bound"}, {"layer", layer_name}, {"k", k}, {"entries", rows}};
  }

  std::string to_text() const {
    std::string out = fmt::format("# svd-bound layer={} k={} all_hold={}\n", layer_name, k, all_hold());
    out += "task\ti\tsigma_joint\tsigma_task\tlhs\trhs\tholds\n";
    for (const auto& e : entries)
      out += fmt::format("{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\n", e.task, e.index, e.sigma_joint,
                         e.sigma_task, e.lhs, e.rhs, e.holds ? 1 : 0);
    return out;
  }
};

inline constexpr double kBoundRelativeSlack = 1e-9;
inline constexpr double kBoundAbsoluteSlack = 1e-12;

inline BoundReport check_perturbation_bound(const DeltaSet& ds, std::size_t task) {
  ds.validate();
  if (task >= ds.num_tasks()) throw Error(ErrorKind::InvalidArgument, "task index out of range", ds.layer_name);
  const std::size_t k = ds.num_tasks();
  const double root_k = std::sqrt(static_cast<double>(k));
  const Matrix& target = ds.deltas[task];

  const ThinSVD joint = thin_svd(hconcat(ds.deltas));
  const ThinSVD own = thin_svd(target);
  const double target_norm = own.sigma.size() ? own.sigma(0) : 0.0;

  double perturbation = 0.0;
  for (const auto& d : ds.deltas) {
    const double e = spectral_norm(d - target);
    perturbation += 2.0 * target_norm * e + e * e;
  }
  const double slack = kBoundAbsoluteSlack * std::max(1.0, joint.sigma.size() ? joint.sigma(0) : 0.0);

  BoundReport rep;
  rep.layer_name = ds.layer_name;
  rep.k = k;
  for (Index i = 0; i < own.size(); ++i) {
    const double s = own.sigma(i);
    if (!(s > 0.0)) continue;
    BoundEntry e;
    e.index = i;
    e.task = task;
    e.sigma_task = s;
    e.sigma_joint = joint.sigma(i);
    e.lhs = std::abs(e.sigma_joint - root_k * s);
    e.rhs = perturbation / (root_k * s);
    e.holds = e.lhs <= e.rhs * (1.0 + kBoundRelativeSlack) + slack;
    rep.entries.push_back(e);
  }
  return rep;
}

/// Bound entries for every task.
inline BoundReport check_perturbation_bound(const DeltaSet& ds) {
  BoundReport all;
  for (std::size_t t = 0; t < ds.num_tasks(); ++t) {
    auto r = check_perturbation_bound(ds, t);
    all.layer_name = r.layer_name;
    all.k = r.k;
    all.entries.insert(all.entries.end(), r.entries.begin(), r.entries.end());
  }
  return all;
}

// ---------------------------------------------------------------------------
// Spectrum

struct SpectrumEntry {
  Index index = 0;
  double sigma = 0.0;
  std::vector<double> row_norms;  // one per task
};

/// JSON: {"kind": "spectrum", "layer": str, "orientation": str,
///        "entries": [{"i", "sigma", "row_norms": [num per task]}]}
struct SpectrumReport {
  std::string layer_name;
  Orientation orientation = Orientation::horizontal;
  std::vector<SpectrumEntry> entries;

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : entries) rows.push_back({{"i", e.index}, {"sigma", e.sigma}, {"row_norms", e.row_norms}});
    return {{"kind", "spectrum"}, {"layer", layer_name},
            {"orientation", std::string(to_string(orientation))}, {"entries", rows}};
  }

  std::string to_text() const {
    std::string out = fmt::format("# spectrum layer={} orientation={}\n", layer_name, to_string(orientation));
    out += "i\tsigma\trow_norms\n";
    for (const auto& e : entries) {
      out += fmt::format("{}\t{:.9e}\t", e.index, e.sigma);
      for (std::size_t t = 0; t < e.row_norms.size(); ++t)
        out += fmt::format("{}{:.6f}", t ? "," : "", e.row_norms[t]);
      out += "\n";
    }
    return out;
  }
};

inline SpectrumReport spectrum_report(const DeltaSet& ds, Orientation orientation) {
  const JointDecomposition jd = decompose_joint(ds, orientation);
  SpectrumReport rep;
  rep.layer_name = ds.layer_name;
  rep.orientation = orientation;
  for (Index i = 0; i < jd.components(); ++i) {
    SpectrumEntry e;
    e.index = i;
    e.sigma = jd.sigma(i);
    for (Index t = 0; t < jd.row_norms.rows(); ++t) e.row_norms.push_back(jd.row_norms(t, i));
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Synthetic heterogeneous deltas

/// N standard-normal m x n deltas, task t scaled by
/// scale_ratio^(t / (N - 1)) so that task norms span the ratio.
inline DeltaSet synth_hetero_deltas(std::uint64_t seed, std::size_t num_tasks, Index rows, Index cols,
                                    double scale_ratio) {
  if (!(scale_ratio >= 1.0)) throw Error(ErrorKind::InvalidArgument, "scale ratio must be at least 1");
  if (num_tasks == 0) throw Error(ErrorKind::InvalidArgument, "need at least one task");
  std::vector<Matrix> deltas;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    CounterRng rng(derive_key(seed, "synth_hetero_deltas", t));
    const double exponent =
        num_tasks > 1 ? static_cast<double>(t) / static_cast<double>(num_tasks - 1) : 0.0;
    const double scale = std::pow(scale_ratio, exponent);
    Matrix d(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) d(i, j) = scale * rng.normal();
    deltas.push_back(std::move(d));
  }
  return DeltaSet::from("synthetic", std::move(deltas));
}

}  // namespace drm
