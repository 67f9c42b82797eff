// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "drm/drm.hpp"

namespace drm::cli {
namespace {

double parse_number(const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || !std::isfinite(v))
    throw Error(ErrorKind::InvalidArgument, fmt::format("'{}' is not a number", text));
  return v;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  if (!text.empty() && text.back() == sep) parts.emplace_back();
  return parts;
}

int exit_code_for(const Error& e) {
  switch (category_of(e.kind())) {
    case ErrorCategory::Argument: return kArgumentError;
    case ErrorCategory::Io: return kIoError;
    case ErrorCategory::Numerical: return kNumericalError;
  }
  return kArgumentError;
}

unsigned thread_budget() {
  const char* env = std::getenv("DRM_THREADS");
  if (!env || !*env) return 1;
  const double v = parse_number(env);
  if (v < 0 || v != std::floor(v)) throw Error(ErrorKind::InvalidArgument, "DRM_THREADS must be a non-negative integer");
  return static_cast<unsigned>(v);
}

bool wants_json(const std::string& path) {
  return path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::IoFailure, "cannot open for writing", path);
  f << content;
  f.close();
  if (!f) throw Error(ErrorKind::IoFailure, "write failed", path);
}

/// JSON when the path ends in .json, the text table otherwise.
void write_report(const std::string& path, const std::string& text, const nlohmann::json& json) {
  write_text_file(path, wants_json(path) ? json.dump(2) + "\n" : text);
}

std::pair<Index, Index> parse_dim(const std::string& spec) {
  const auto parts = split(spec, ',');
  if (parts.size() != 2) throw Error(ErrorKind::InvalidArgument, "--dim expects M,N");
  const double m = parse_number(parts[0]), n = parse_number(parts[1]);
  if (m < 1 || n < 1 || m != std::floor(m) || n != std::floor(n))
    throw Error(ErrorKind::InvalidArgument, "--dim extents must be positive integers");
  return {static_cast<Index>(m), static_cast<Index>(n)};
}

struct MergeOptions {
  std::string method = "drm-h";
  std::string lambda;
  double retain = 0.0;
  double dare_drop = 0.0;
  double rank_drop = 0.0;
  std::string prune_mode = "joint";
  bool no_prune = false;
  bool no_sign_elect = false;
  bool no_disjoint = false;
  std::uint64_t seed = 0;

  CLI::Option* retain_opt = nullptr;
  CLI::Option* dare_opt = nullptr;

  void attach(CLI::App& app, bool with_method) {
    if (with_method)
      app.add_option("--method", method, "drm-h|drm-v|avg|ta|ties|dare-ties")->required();
    retain_opt = app.add_option("--retain", retain, "fraction of entries kept by pruning");
    app.add_option("--lambda", lambda, "shared coefficient F or per-task list F,F,...");
    dare_opt = app.add_option("--dare-drop", dare_drop, "DARE drop rate p");
    app.add_option("--rank-drop", rank_drop, "fraction of ranks truncated");
    app.add_option("--prune-mode", prune_mode, "joint|individual");
    app.add_flag("--no-prune", no_prune, "skip pruning");
    app.add_flag("--no-sign-elect", no_sign_elect, "skip sign election");
    app.add_flag("--no-disjoint", no_disjoint, "plain instead of disjoint averaging");
    app.add_option("--seed", seed, "RNG seed (DARE)");
  }

  MergeConfig build(Method m) const {
    MergeConfig cfg = MergeConfig::defaults(m);
    if (retain_opt && retain_opt->count()) {
      cfg.retain = retain;
      if (m == Method::dare_ties && !(dare_opt && dare_opt->count())) cfg.dare_drop = 1.0 - retain;
    }
    if (dare_opt && dare_opt->count()) cfg.dare_drop = dare_drop;
    if (!lambda.empty()) cfg.lambdas = parse_list(lambda);
    cfg.rank_drop = rank_drop;
    const auto mode = parse_prune_mode(prune_mode);
    if (!mode) throw Error(ErrorKind::InvalidArgument, "--prune-mode must be joint or individual");
    cfg.prune_mode = *mode;
    cfg.enable_prune = !no_prune;
    cfg.enable_sign_elect = !no_sign_elect;
    cfg.enable_disjoint = !no_disjoint;
    cfg.seed = seed;
    cfg.validate();
    return cfg;
  }
};

Method method_from(const std::string& name) {
  const auto m = parse_method(name);
  if (!m) throw Error(ErrorKind::InvalidArgument, fmt::format("unknown method '{}'", name));
  return *m;
}

std::vector<TensorBundle> read_tasks(const std::vector<std::string>& paths) {
  std::vector<TensorBundle> tasks;
  for (const auto& p : paths) tasks.push_back(read_bundle(p));
  return tasks;
}

int cmd_merge(const MergeOptions& opt, const std::string& base_path, const std::vector<std::string>& task_paths,
              const std::string& out_path, std::ostream& out) {
  const Method method = method_from(opt.method);
  const MergeConfig cfg = opt.build(method);
  const TensorBundle base = read_bundle(base_path);
  const auto tasks = read_tasks(task_paths);
  const BundleMerge merged = merge_bundle_detailed(base, tasks, cfg, thread_budget());
  write_bundle(merged.bundle, out_path);

  out << fmt::format("# merge method={} retain={} lambda={} tasks={}\n", to_string(method), cfg.retain,
                     fmt::join(cfg.lambdas, ","), tasks.size());
  out << "layer\tshape\trank\tkept\ttotal\n";
  for (const auto& l : merged.layers)
    out << fmt::format("{}\t{}x{}\t{}\t{}\t{}\n", l.name, l.rows, l.cols, l.rank_used, l.kept, l.total);
  return kOk;
}

struct AnalyzeOptions {
  std::string kind;
  std::string base;
  std::vector<std::string> tasks;
  std::string space = "all";
  std::string orientation = "h";
  bool renorm = true;
  bool no_renorm = false;
  std::string out;
};

int cmd_analyze(const AnalyzeOptions& a, const MergeOptions& mo, std::ostream& out) {
  Orientation orientation;
  if (a.orientation == "h" || a.orientation == "horizontal") orientation = Orientation::horizontal;
  else if (a.orientation == "v" || a.orientation == "vertical") orientation = Orientation::vertical;
  else throw Error(ErrorKind::InvalidArgument, "--orientation must be h or v");

  MergeConfig cfg = mo.build(orientation == Orientation::vertical ? Method::drm_v : Method::drm_h);

  std::vector<AgreementSpace> spaces;
  if (a.kind == "sign-agreement") {
    if (a.space == "all") {
      spaces = {AgreementSpace::original, AgreementSpace::decomposed_h, AgreementSpace::backprojected_h,
                AgreementSpace::decomposed_v, AgreementSpace::backprojected_v};
    } else {
      const auto sp = parse_space(a.space);
      if (!sp) throw Error(ErrorKind::InvalidArgument, fmt::format("unknown space '{}'", a.space));
      spaces = {*sp};
    }
    if (a.tasks.size() < 2) throw Error(ErrorKind::NeedTwoTasks, "sign agreement needs at least two tasks");
  }

  const TensorBundle base = read_bundle(a.base);
  const auto tasks = read_tasks(a.tasks);
  const DeltaExtraction ex = extract_deltas(base, tasks);

  std::string text;
  nlohmann::json reports = nlohmann::json::array();
  auto add = [&](const auto& rep) {
    text += rep.to_text();
    reports.push_back(rep.to_json());
  };
  for (const auto& ds : ex.layers) {
    if (a.kind == "prune-density") {
      add(pruning_density(ds, cfg, !a.no_renorm));
    } else if (a.kind == "sign-agreement") {
      for (auto sp : spaces) add(sign_agreement(ds, cfg, sp));
    } else if (a.kind == "svd-bound") {
      add(check_perturbation_bound(ds));
    } else {
      add(spectrum_report(ds, orientation));
    }
  }
  write_report(a.out, text, nlohmann::json{{"kind", a.kind}, {"reports", reports}});
  out << fmt::format("# analyze {} layers={} -> {}\n", a.kind, ex.layers.size(), a.out);
  return kOk;
}

struct SuiteArgs {
  std::uint64_t seed = 0;
  std::size_t tasks = 3;
  std::string dim = "16,12";
  Index samples = 120;
  bool identical = false;

  void attach(CLI::App& app) {
    app.add_option("--seed", seed, "suite seed");
    app.add_option("--tasks", tasks, "number of tasks")->check(CLI::PositiveNumber);
    app.add_option("--dim", dim, "layer shape M,N");
    app.add_option("--samples", samples, "training samples per task")->check(CLI::PositiveNumber);
    app.add_flag("--identical", identical, "every task is the same problem");
  }

  SuiteOptions options() const {
    SuiteOptions o;
    const auto [m, n] = parse_dim(dim);
    o.num_tasks = tasks;
    o.rows = m;
    o.cols = n;
    o.samples = samples;
    o.test_samples = std::max<Index>(n, samples / 2);
    o.identical = identical;
    return o;
  }
};

int cmd_bench(const SuiteArgs& s, const std::string& out_path, std::ostream& out) {
  const BenchReport rep = bench_synthetic(s.seed, s.options());
  const std::string text = rep.to_text();
  out << text;
  if (!out_path.empty()) write_report(out_path, text, rep.to_json());
  return kOk;
}

int cmd_tune(const SuiteArgs& s, const std::string& method_name, const std::string& grid_retain,
             const std::string& grid_lambda, const std::string& out_path, std::ostream& out) {
  const Method method = method_from(method_name);
  const auto retain = grid_retain.empty() ? default_retain_grid(method) : parse_range(grid_retain);
  const auto lambda = grid_lambda.empty() ? default_lambda_grid(method) : parse_range(grid_lambda);
  for (double r : retain)
    if (!(r > 0.0 && r <= 1.0)) throw Error(ErrorKind::InvalidArgument, "retain grid values must lie in (0, 1]");
  const SynthSuite suite = make_synth_suite(s.seed, s.options());
  MergeConfig cfg = MergeConfig::defaults(method);
  cfg.seed = s.seed;
  const TuneResult res = grid_tune(suite.base, suite.tasks, method, retain, lambda, s.seed, &cfg);
  const std::string text = res.to_text();
  out << text;
  if (!out_path.empty()) write_report(out_path, text, res.to_json());
  return kOk;
}

}  // namespace

std::vector<double> parse_list(const std::string& spec) {
  std::vector<double> out;
  for (const auto& p : split(spec, ',')) out.push_back(parse_number(p));
  if (out.empty()) throw Error(ErrorKind::InvalidArgument, "empty number list");
  return out;
}

std::vector<double> parse_range(const std::string& spec) {
  const auto parts = split(spec, ':');
  if (parts.size() == 1) return {parse_number(parts[0])};
  if (parts.size() != 3) throw Error(ErrorKind::InvalidArgument, fmt::format("'{}' is not a:b:step", spec));
  const double lo = parse_number(parts[0]), hi = parse_number(parts[1]), step = parse_number(parts[2]);
  if (!(step > 0.0) || hi < lo) throw Error(ErrorKind::InvalidArgument, fmt::format("'{}' is an empty range", spec));
  const auto count = static_cast<long>(std::floor((hi - lo) / step + 1e-9)) + 1;
  std::vector<double> out;
  for (long k = 0; k < count; ++k) out.push_back(std::round((lo + static_cast<double>(k) * step) * 1e12) / 1e12);
  return out;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Decom-Renorm-Merge checkpoint merging and analysis", "drm-merge"};
  app.require_subcommand(1);

  // merge
  auto* merge = app.add_subcommand("merge", "merge task checkpoints into one");
  MergeOptions merge_opt;
  std::string merge_base, merge_out;
  std::vector<std::string> merge_tasks;
  merge_opt.attach(*merge, true);
  merge->add_option("--base", merge_base, "base checkpoint")->required();
  merge->add_option("--task", merge_tasks, "task checkpoint (repeatable)")->required();
  merge->add_option("--out", merge_out, "output checkpoint")->required();

  // analyze
  auto* analyze = app.add_subcommand("analyze", "joint-space diagnostics");
  AnalyzeOptions an;
  MergeOptions an_merge;
  analyze->add_option("kind", an.kind, "prune-density|sign-agreement|svd-bound|spectrum")
      ->required()
      ->check(CLI::IsMember({"prune-density", "sign-agreement", "svd-bound", "spectrum"}));
  analyze->add_option("--base", an.base, "base checkpoint")->required();
  analyze->add_option("--task", an.tasks, "task checkpoint (repeatable)")->required();
  analyze->add_option("--space", an.space,
                      "original|decomposed-h|decomposed-v|backprojected-h|backprojected-v|all");
  analyze->add_option("--orientation", an.orientation, "h|v (prune-density, spectrum)");
  analyze->add_flag("--renorm", an.renorm, "prune renormalised blocks (default)");
  analyze->add_flag("--no-renorm", an.no_renorm, "prune raw blocks");
  analyze->add_option("--out", an.out, "report path (.json for JSON)")->required();
  an_merge.attach(*analyze, false);

  // bench
  auto* bench = app.add_subcommand("bench", "compare all methods on a synthetic suite");
  std::string bench_kind, bench_out;
  SuiteArgs bench_suite;
  bench->add_option("scenario", bench_kind, "synthetic")->required()->check(CLI::IsMember({"synthetic"}));
  bench_suite.attach(*bench);
  bench->add_option("--out", bench_out, "optional report path");

  // tune
  auto* tune = app.add_subcommand("tune", "grid-search retain and lambda on a synthetic suite");
  std::string tune_method, grid_retain, grid_lambda, tune_out;
  SuiteArgs tune_suite;
  tune->add_option("--method", tune_method, "drm-h|drm-v|avg|ta|ties|dare-ties")->required();
  tune->add_option("--grid-retain", grid_retain, "a:b:step");
  tune->add_option("--grid-lambda", grid_lambda, "a:b:step");
  tune_suite.attach(*tune);
  tune->add_option("--out", tune_out, "optional report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kArgumentError;
  }

  try {
    if (merge->parsed()) return cmd_merge(merge_opt, merge_base, merge_tasks, merge_out, out);
    if (analyze->parsed()) return cmd_analyze(an, an_merge, out);
    if (bench->parsed()) return cmd_bench(bench_suite, bench_out, out);
    if (tune->parsed())
      return cmd_tune(tune_suite, tune_method, grid_retain, grid_lambda, tune_out, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kNumericalError;
  }
  return kArgumentError;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"drm-merge"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace drm::cli
