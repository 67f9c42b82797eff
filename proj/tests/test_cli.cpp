// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cli.hpp"
#include "drm/drm.hpp"
#include "oracles.hpp"

namespace drm {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("drm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::mt19937_64 rng(42);
    base_.add("fc.weight", Tensor::from_matrix(testing::random_matrix(rng, 6, 5), DType::f64));
    base_.add("fc.bias", Tensor::from_vector(testing::random_matrix(rng, 6, 1).col(0), DType::f64));
    write_bundle(base_, path("base.drmb"));
    for (int t = 0; t < 3; ++t) {
      TensorBundle b;
      b.add("fc.weight", Tensor::from_matrix(base_.at("fc.weight").to_matrix() +
                                                 testing::random_matrix(rng, 6, 5, 0.1),
                                             DType::f64));
      b.add("fc.bias", Tensor::from_vector(base_.at("fc.bias").to_vector() +
                                               testing::random_matrix(rng, 6, 1, 0.1).col(0),
                                           DType::f64));
      tasks_.push_back(b);
      write_bundle(b, path("task" + std::to_string(t) + ".drmb"));
    }
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
  TensorBundle base_;
  std::vector<TensorBundle> tasks_;
};

TEST_F(CliTest, MergeAppliesMethodDefaults) {
  auto r = run_cli({"merge", "--method", "drm-h", "--base", path("base.drmb"), "--task", path("task0.drmb"),
                    "--task", path("task1.drmb"), "--out", path("out.drmb")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("retain=0.2 lambda=1 "), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("layer\tshape\trank\tkept\ttotal"), std::string::npos);
  EXPECT_NE(r.out.find("fc.weight\t6x5\t"), std::string::npos);
  const auto merged = read_bundle(path("out.drmb"));
  const auto cfg = nlohmann::json::parse(merged.metadata.at(kConfigMetadataKey));
  EXPECT_DOUBLE_EQ(cfg.at("retain").get<double>(), 0.2);
  EXPECT_EQ(cfg.at("lambdas"), nlohmann::json::array({1.0}));
  // CLI output equals the library call
  const std::vector<TensorBundle> two{tasks_[0], tasks_[1]};
  EXPECT_EQ(encode_bundle(merged), encode_bundle(merge_bundle(base_, two, MergeConfig::defaults(Method::drm_h))));

  r = run_cli({"merge", "--method", "ta", "--base", path("base.drmb"), "--task", path("task0.drmb"), "--out",
               path("ta.drmb")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ta = nlohmann::json::parse(read_bundle(path("ta.drmb")).metadata.at(kConfigMetadataKey));
  EXPECT_EQ(ta.at("lambdas"), nlohmann::json::array({0.4}));
}

TEST_F(CliTest, MergeIdentityPipelineWithOneTask) {
  const auto r = run_cli({"merge", "--method", "drm-h", "--no-prune", "--no-sign-elect", "--base",
                          path("base.drmb"), "--task", path("task0.drmb"), "--out", path("id.drmb")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto out = read_bundle(path("id.drmb"));
  for (const auto& [name, t] : tasks_[0]) {
    const auto& o = out.at(name);
    for (std::size_t k = 0; k < t.values().size(); ++k) EXPECT_NEAR(o.values()[k], t.values()[k], 1e-10);
  }
}

TEST_F(CliTest, MergeOptionsReachTheConfig) {
  const auto r = run_cli({"merge", "--method", "dare-ties", "--retain", "0.3", "--lambda", "0.9,1.0,1.1",
                          "--seed", "7", "--prune-mode", "individual", "--no-disjoint", "--rank-drop", "0.25",
                          "--base", path("base.drmb"), "--task", path("task0.drmb"), "--task",
                          path("task1.drmb"), "--task", path("task2.drmb"), "--out", path("d.drmb")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cfg = nlohmann::json::parse(read_bundle(path("d.drmb")).metadata.at(kConfigMetadataKey));
  EXPECT_DOUBLE_EQ(cfg.at("dare_drop").get<double>(), 0.7);
  EXPECT_EQ(cfg.at("lambdas").size(), 3u);
  EXPECT_EQ(cfg.at("seed"), 7);
  EXPECT_EQ(cfg.at("prune_mode"), "individual");
  EXPECT_EQ(cfg.at("enable_disjoint"), false);
  EXPECT_DOUBLE_EQ(cfg.at("rank_drop").get<double>(), 0.25);
}

TEST_F(CliTest, SignAgreementNeedsTwoTasks) {
  const auto r = run_cli({"analyze", "sign-agreement", "--base", path("base.drmb"), "--task",
                          path("task0.drmb"), "--out", path("a.txt")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("NeedTwoTasks"), std::string::npos) << r.err;
}

TEST_F(CliTest, SvdBoundOnIdenticalTasks) {
  const auto r = run_cli({"analyze", "svd-bound", "--base", path("base.drmb"), "--task", path("task0.drmb"),
                          "--task", path("task0.drmb"), "--out", path("b.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(path("b.json")));
  EXPECT_EQ(j.at("kind"), "svd-bound");
  const auto& entries = j.at("reports").at(0).at("entries");
  EXPECT_EQ(entries.size(), 10u);
  for (const auto& e : entries) {
    EXPECT_LE(e.at("lhs").get<double>(), 1e-12 * std::max(1.0, e.at("sigma_joint").get<double>()));
    EXPECT_EQ(e.at("rhs").get<double>(), 0.0);
    EXPECT_TRUE(e.at("holds").get<bool>());
  }
}

TEST_F(CliTest, PruneDensityIsDeterministic) {
  const std::vector<std::string> common{"--base", path("base.drmb"), "--task", path("task0.drmb"),
                                        "--task", path("task1.drmb"), "--retain", "0.5"};
  for (const std::string ext : {".txt", ".json"}) {
    auto a = common, b = common;
    a.insert(a.begin(), {"analyze", "prune-density"});
    b.insert(b.begin(), {"analyze", "prune-density"});
    a.insert(a.end(), {"--out", path("p1" + ext)});
    b.insert(b.end(), {"--out", path("p2" + ext)});
    ASSERT_EQ(run_cli(a).code, 0);
    ASSERT_EQ(run_cli(b).code, 0);
    EXPECT_EQ(slurp(path("p1" + ext)), slurp(path("p2" + ext)));
    EXPECT_FALSE(slurp(path("p1" + ext)).empty());
  }
  auto no = common;
  no.insert(no.begin(), {"analyze", "prune-density"});
  no.insert(no.end(), {"--no-renorm", "--orientation", "v", "--out", path("p3.json")});
  ASSERT_EQ(run_cli(no).code, 0);
  const auto j = nlohmann::json::parse(slurp(path("p3.json")));
  EXPECT_EQ(j.at("reports").at(0).at("renorm"), false);
  EXPECT_EQ(j.at("reports").at(0).at("orientation"), "vertical");
}

TEST_F(CliTest, SignAgreementAndSpectrumReports) {
  auto r = run_cli({"analyze", "sign-agreement", "--base", path("base.drmb"), "--task", path("task0.drmb"),
                    "--task", path("task1.drmb"), "--out", path("s.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(slurp(path("s.json"))).at("reports").size(), 5u);
  r = run_cli({"analyze", "sign-agreement", "--space", "backprojected-v", "--base", path("base.drmb"),
               "--task", path("task0.drmb"), "--task", path("task1.drmb"), "--out", path("s1.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(slurp(path("s1.json"))).at("reports").size(), 1u);
  r = run_cli({"analyze", "sign-agreement", "--space", "bogus", "--base", path("base.drmb"), "--task",
               path("task0.drmb"), "--task", path("task1.drmb"), "--out", path("s2.json")});
  EXPECT_EQ(r.code, 2);
  r = run_cli({"analyze", "spectrum", "--base", path("base.drmb"), "--task", path("task0.drmb"), "--out",
               path("sp.txt")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(path("sp.txt")).find("# spectrum layer=fc.weight"), std::string::npos);
}

TEST(Cli, BenchIdenticalTasksRecover) {
  const auto r = run_cli({"bench", "synthetic", "--seed", "3", "--tasks", "3", "--dim", "8,6", "--identical"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("method", 0) == 0) continue;
    const double recovery = std::stod(line.substr(line.rfind('\t') + 1));
    EXPECT_GE(recovery, 0.999) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 6);
}

TEST(Cli, TuneGrids) {
  auto r = run_cli({"tune", "--method", "drm-h", "--grid-retain", "0.5:0.5:0.1", "--grid-lambda", "1:1:0.1",
                    "--dim", "6,4", "--samples", "40"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("points=1 "), std::string::npos) << r.out;

  r = run_cli({"tune", "--method", "drm-h", "--dim", "6,4", "--samples", "40"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("points=80 "), std::string::npos) << r.out;
}

TEST(Cli, ParseHelpers) {
  EXPECT_EQ(cli::parse_range("0.1:0.3:0.1"), (std::vector<double>{0.1, 0.2, 0.3}));
  EXPECT_EQ(cli::parse_range("0.8:1.5:0.1").size(), 8u);
  EXPECT_EQ(cli::parse_range("2"), std::vector<double>{2.0});
  EXPECT_THROW(cli::parse_range("1:0:0.1"), Error);
  EXPECT_THROW(cli::parse_range("a:b"), Error);
  EXPECT_EQ(cli::parse_list("1,2.5"), (std::vector<double>{1.0, 2.5}));
  EXPECT_THROW(cli::parse_list("1,"), Error);
}

TEST_F(CliTest, ExitCodes) {
  // argument errors
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"merge", "--base", path("base.drmb")}).code, 2);
  EXPECT_EQ(run_cli({"merge", "--method", "nope", "--base", path("base.drmb"), "--task", path("task0.drmb"),
                     "--out", path("x.drmb")})
                .code,
            2);
  EXPECT_EQ(run_cli({"merge", "--method", "ties", "--retain", "1.5", "--base", path("base.drmb"), "--task",
                     path("task0.drmb"), "--out", path("x.drmb")})
                .code,
            2);
  // io errors
  auto r = run_cli({"merge", "--method", "ties", "--base", path("missing.drmb"), "--task", path("task0.drmb"),
                    "--out", path("x.drmb")});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("missing.drmb"), std::string::npos) << r.err;
  {
    std::ofstream bad(path("bad.drmb"), std::ios::binary);
    bad << "NOPE0000000000000000";
  }
  EXPECT_EQ(run_cli({"merge", "--method", "ties", "--base", path("bad.drmb"), "--task", path("task0.drmb"),
                     "--out", path("x.drmb")})
                .code,
            3);
  // shape mismatch names the layer
  TensorBundle other;
  other.add("fc.weight", Tensor::from_matrix(Matrix::Zero(5, 5), DType::f64));
  other.add("fc.bias", base_.at("fc.bias"));
  write_bundle(other, path("other.drmb"));
  r = run_cli({"merge", "--method", "ties", "--base", path("base.drmb"), "--task", path("other.drmb"), "--out",
               path("x.drmb")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("fc.weight"), std::string::npos) << r.err;
  // numerical failure: fewer samples than inputs
  EXPECT_EQ(run_cli({"bench", "synthetic", "--dim", "4,8", "--samples", "3"}).code, 4);
  // help succeeds
  EXPECT_EQ(run_cli({"--help"}).code, 0);
}

}  // namespace
}  // namespace drm
