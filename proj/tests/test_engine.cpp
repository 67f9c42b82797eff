// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "drm/engine.hpp"
#include "drm/svd_oracle.hpp"
#include "oracles.hpp"

namespace drm {
namespace {

MergeConfig full_config(Method m) {
  MergeConfig cfg = MergeConfig::defaults(m);
  cfg.retain = 1.0;
  cfg.lambdas = {1.0};
  return cfg;
}

double rel(const Matrix& a, const Matrix& b) { return relative_frobenius(a, b); }

TEST(RetainedCount, CeilWithSnapping) {
  EXPECT_EQ(retained_count(0.3, 10), 3u);
  EXPECT_EQ(retained_count(0.2, 10), 2u);
  EXPECT_EQ(retained_count(0.25, 10), 3u);
  EXPECT_EQ(retained_count(1.0, 7), 7u);
  EXPECT_EQ(retained_count(0.01, 7), 1u);
  EXPECT_EQ(retained_count(0.5, 0), 0u);
}

TEST(MergeConfigTest, DefaultsAndValidation) {
  const auto d = MergeConfig::defaults(Method::drm_h);
  EXPECT_DOUBLE_EQ(d.retain, 0.2);
  EXPECT_EQ(d.lambdas, std::vector<double>{1.0});
  EXPECT_EQ(d.prune_mode, PruneMode::joint);
  EXPECT_DOUBLE_EQ(d.dare_drop, 0.8);
  EXPECT_EQ(MergeConfig::defaults(Method::task_arithmetic).lambdas, std::vector<double>{0.4});
  EXPECT_EQ(MergeConfig::defaults(Method::ties).lambdas, std::vector<double>{1.0});

  MergeConfig bad = d;
  bad.retain = 0.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = d;
  bad.retain = 1.5;
  EXPECT_THROW(bad.validate(), Error);
  bad = d;
  bad.dare_drop = 1.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = d;
  bad.rank_drop = -0.1;
  EXPECT_THROW(bad.validate(), Error);
  bad = d;
  bad.lambdas = {};
  EXPECT_THROW(bad.validate(), Error);

  MergeConfig many = d;
  many.lambdas = {1.0, 2.0};
  EXPECT_EQ(many.lambdas_for(2), (std::vector<double>{1.0, 2.0}));
  EXPECT_THROW(many.lambdas_for(3), Error);
  EXPECT_EQ(d.lambdas_for(3), (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(ParseNames, RoundTrip) {
  for (Method m : {Method::drm_h, Method::drm_v, Method::simple_avg, Method::task_arithmetic, Method::ties,
                   Method::dare_ties})
    EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_FALSE(parse_method("nope"));
  EXPECT_EQ(parse_prune_mode("individual"), PruneMode::individual);
  EXPECT_FALSE(parse_prune_mode("x"));
}

TEST(RenormalizeRow, Examples) {
  Vector unit(2), v(2);
  unit << 0.6, 0.8;
  v << 3, 4;
  auto [u1, n1] = renormalize_row(unit);
  EXPECT_NEAR((u1 - unit).norm(), 0.0, 1e-15);
  EXPECT_NEAR(n1, 1.0, 1e-15);
  auto [u2, n2] = renormalize_row(v);
  EXPECT_NEAR((u2 - unit).norm(), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(n2, 5.0);
  auto [u3, n3] = renormalize_row(Vector::Zero(3));
  EXPECT_TRUE(u3.isZero(0.0));
  EXPECT_EQ(n3, 0.0);
}

TEST(DecomposeJoint, SingleTaskIsPlainSvd) {
  std::mt19937_64 rng(1);
  const Matrix a = testing::random_matrix(rng, 5, 4);
  const auto ds = DeltaSet::from("w", {a});
  const auto plain = thin_svd(a);
  const auto jd = decompose_joint(ds, Orientation::horizontal);
  EXPECT_LE((jd.blocks[0] - plain.Vt).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((jd.row_norms.array() - 1.0).abs().maxCoeff(), 1e-12);
  EXPECT_LE((jd.renorm_blocks[0] - jd.blocks[0]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DecomposeJoint, DuplicateTasksSplitBudgetEvenly) {
  std::mt19937_64 rng(2);
  const Matrix a = testing::random_matrix(rng, 4, 6);
  for (auto o : {Orientation::horizontal, Orientation::vertical}) {
    const auto jd = decompose_joint(DeltaSet::from("w", {a, a}), o);
    for (Index i = 0; i < jd.components(); ++i) {
      if (jd.sigma(i) == 0.0) continue;
      EXPECT_NEAR(jd.row_norms(0, i), 1.0 / std::sqrt(2.0), 1e-10);
      EXPECT_NEAR(jd.row_norms(1, i), 1.0 / std::sqrt(2.0), 1e-10);
    }
  }
}

TEST(DecomposeJoint, ReconstructionAndNormBudgetOnRandomSets) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> dim(2, 9), tasks(1, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = tasks(rng);
    const auto blocks = testing::random_blocks(rng, static_cast<std::size_t>(n), dim(rng), dim(rng));
    const auto ds = DeltaSet::from("w", blocks);
    for (auto o : {Orientation::horizontal, Orientation::vertical}) {
      const auto jd = decompose_joint(ds, o);
      for (std::size_t t = 0; t < ds.num_tasks(); ++t)
        EXPECT_LE((jd.reconstruct(t) - ds.deltas[t]).norm(), 1e-8 * std::max(1.0, ds.deltas[t].norm()));
      for (Index i = 0; i < jd.components(); ++i) {
        if (jd.sigma(i) == 0.0) continue;
        EXPECT_NEAR(jd.row_norms.col(i).squaredNorm(), 1.0, 1e-10);
      }
    }
  }
}

TEST(DecomposeJoint, ThreeSixByFourDeltas) {
  std::mt19937_64 rng(4);
  const auto ds = DeltaSet::from("w", testing::random_blocks(rng, 3, 6, 4));
  const auto jd = decompose_joint(ds, Orientation::horizontal);
  EXPECT_EQ(jd.components(), 6);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_LE((jd.reconstruct(t) - ds.deltas[t]).norm(), 1e-10);
  for (Index i = 0; i < jd.rank(); ++i) EXPECT_NEAR(jd.row_norms.col(i).squaredNorm(), 1.0, 1e-10);
}

TEST(DecomposeJoint, ScaleCompensationRowwise) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ds = DeltaSet::from("w", testing::random_blocks(rng, 3, 5, 3));
    for (auto o : {Orientation::horizontal, Orientation::vertical}) {
      const auto jd = decompose_joint(ds, o);
      for (std::size_t t = 0; t < 3; ++t) {
        const Matrix want = jd.sigma.asDiagonal() * jd.blocks[t];
        EXPECT_LE((jd.scaled_block(t) - want).cwiseAbs().maxCoeff(), 1e-14 * std::max(1.0, jd.sigma(0)));
      }
    }
  }
}

TEST(DecomposeJoint, RankDeficientRowsStayZero) {
  std::mt19937_64 rng(6);
  const Matrix a = testing::random_matrix(rng, 6, 1) * testing::random_matrix(rng, 1, 4);
  const auto jd = decompose_joint(DeltaSet::from("w", {a, 2.0 * a}), Orientation::horizontal);
  EXPECT_EQ(jd.rank(), 1);
  for (Index i = 1; i < jd.components(); ++i)
    for (std::size_t t = 0; t < 2; ++t) {
      EXPECT_TRUE(jd.renorm_blocks[t].row(i).isZero(0.0));
      EXPECT_EQ(jd.task_sigmas(static_cast<Index>(t), i), 0.0);
    }
}

TEST(DecomposeJoint, RejectsNonFinite) {
  Matrix a = Matrix::Ones(2, 2);
  a(1, 1) = std::nan("");
  DeltaSet ds;
  ds.layer_name = "w";
  ds.rows = ds.cols = 2;
  ds.deltas = {a};
  ds.task_names = {"t"};
  EXPECT_THROW(decompose_joint(ds, Orientation::horizontal), Error);
}

TEST(TruncateRank, Examples) {
  std::mt19937_64 rng(7);
  const auto ds = DeltaSet::from("w", testing::random_blocks(rng, 2, 4, 5));
  const auto jd = decompose_joint(ds, Orientation::horizontal);
  ASSERT_EQ(jd.rank(), 4);
  const auto same = truncate_rank(jd, 0.0);
  EXPECT_EQ(same.sigma, jd.sigma);
  EXPECT_EQ(same.basis, jd.basis);
  const auto half = truncate_rank(jd, 0.5);
  EXPECT_EQ(half.rank(), 2);
  EXPECT_THROW(truncate_rank(jd, 1.0), Error);
}

TEST(TruncateRank, TailEnergyMatchesEckartYoung) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ds = DeltaSet::from("w", testing::random_blocks(rng, 3, 6, 5));
    const auto jd = decompose_joint(ds, Orientation::horizontal);
    const auto cut = truncate_rank(jd, 0.5);
    const Index kept = cut.rank();
    // reconstruct the whole concatenated matrix and compare to the tail
    std::vector<Matrix> approx;
    for (std::size_t t = 0; t < 3; ++t) approx.push_back(cut.reconstruct(t));
    const double err = (hconcat(approx) - hconcat(ds.deltas)).norm();
    const auto ref = svd_oracle(hconcat(ds.deltas));
    double tail = 0.0;
    for (std::size_t i = static_cast<std::size_t>(kept); i < ref.size(); ++i) tail += ref[i] * ref[i];
    EXPECT_NEAR(err, std::sqrt(tail), 1e-8);
  }
}

TEST(PruneTopk, Examples) {
  Matrix b(2, 2);
  b << 1, -2, 3, -4;
  const std::vector<Matrix> one{b};
  const auto m = prune_topk(one, 0.5, PruneMode::joint);
  Mask want(2, 2);
  want << false, false, true, true;
  EXPECT_TRUE((m[0] == want).all());
  const auto all = prune_topk(one, 1.0, PruneMode::joint);
  EXPECT_TRUE(all[0].all());
  EXPECT_THROW(prune_topk(one, 0.0, PruneMode::joint), Error);
}

TEST(PruneTopk, JointModeFavoursLargerBlock) {
  std::mt19937_64 rng(9);
  const Matrix small = (testing::random_matrix(rng, 3, 4).cwiseAbs().array() + 0.1).matrix();
  const Matrix large = 10.0 * (testing::random_matrix(rng, 3, 4).cwiseAbs().array() + 1.5).matrix();
  const std::vector<Matrix> blocks{large, small};
  const auto m = prune_topk(blocks, 0.5, PruneMode::joint);
  EXPECT_TRUE(m[0].all());
  EXPECT_FALSE(m[1].any());
  const auto oracle = testing::sort_topk(blocks, 0.5);
  for (std::size_t t = 0; t < 2; ++t)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 4; ++j) EXPECT_EQ(m[t](i, j), oracle[t][i][j]);
}

TEST(PruneTopk, TiesBreakByIndexAndCountIsExact) {
  const std::vector<Matrix> blocks{Matrix::Ones(2, 2), Matrix::Ones(2, 2)};
  const auto m = prune_topk(blocks, 0.25, PruneMode::joint);
  EXPECT_TRUE(m[0](0, 0));
  EXPECT_TRUE(m[0](0, 1));
  EXPECT_EQ(m[0].count() + m[1].count(), 2);
  const auto ind = prune_topk(blocks, 0.25, PruneMode::individual);
  EXPECT_TRUE(ind[0](0, 0));
  EXPECT_TRUE(ind[1](0, 0));
  EXPECT_EQ(ind[0].count() + ind[1].count(), 2);
}

TEST(PruneTopk, MatchesSortOracleOnRandomBlocks) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> frac(0.05, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    auto blocks = testing::random_blocks(rng, 3, 3, 4);
    // repeated magnitudes exercise the tie rule
    if (trial % 3 == 0) blocks[1] = -blocks[0];
    const double retain = frac(rng);
    const auto m = prune_topk(blocks, retain, PruneMode::joint);
    const auto oracle = testing::sort_topk(blocks, retain);
    for (std::size_t t = 0; t < 3; ++t)
      for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 4; ++j) ASSERT_EQ(m[t](i, j), oracle[t][i][j]) << trial;
    for (std::size_t t = 0; t < 3; ++t) {
      const std::vector<Matrix> single{blocks[t]};
      const auto ind = prune_topk(blocks, retain, PruneMode::individual);
      const auto ref = testing::sort_topk(single, retain);
      for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 4; ++j) ASSERT_EQ(ind[t](i, j), ref[0][i][j]);
    }
  }
}

TEST(ElectSigns, Examples) {
  Matrix a(1, 1), b(1, 1), c(1, 1);
  a << 2;
  b << -1;
  c << -3;
  const std::vector<Matrix> three{a, b, c};
  EXPECT_EQ(elect_signs(three)(0, 0), -1.0);
  const std::vector<Matrix> pos{Matrix::Ones(2, 2), 2.0 * Matrix::Ones(2, 2)};
  EXPECT_TRUE((elect_signs(pos).array() == 1.0).all());
  Matrix p(1, 1), q(1, 1);
  p << 1;
  q << -1;
  const std::vector<Matrix> tie{p, q};
  EXPECT_EQ(elect_signs(tie)(0, 0), 1.0);
  const std::vector<Matrix> bad{Matrix::Ones(1, 2), Matrix::Ones(2, 1)};
  EXPECT_THROW(elect_signs(bad), Error);
}

TEST(DisjointAverage, Examples) {
  Matrix a(1, 1), b(1, 1), c(1, 1);
  a << 1.0;
  b << 0.0;
  c << 2.0;
  const std::vector<Matrix> vals{a, b, c};
  const auto masks = full_masks(vals);
  const std::vector<double> ones{1.0, 1.0, 1.0};
  const Matrix signs = elect_signs(vals);
  EXPECT_DOUBLE_EQ(disjoint_average(vals, masks, &signs, ones, true)(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(disjoint_average(vals, masks, &signs, ones, false)(0, 0), 1.0);

  const Matrix v = Matrix::Constant(2, 3, -0.7);
  const std::vector<Matrix> same{v, v, v};
  const Matrix s2 = elect_signs(same);
  EXPECT_LE((disjoint_average(same, full_masks(same), &s2, ones, true) - v).cwiseAbs().maxCoeff(), 1e-15);

  const std::vector<Matrix> zeros{Matrix::Zero(2, 2), Matrix::Zero(2, 2)};
  const std::vector<double> two{1.0, 1.0};
  EXPECT_TRUE(disjoint_average(zeros, full_masks(zeros), nullptr, two, true).isZero(0.0));
}

TEST(DisjointAverage, MatchesPerPositionOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> frac(0.1, 1.0), lam(0.2, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto vals = testing::random_blocks(rng, 3, 4, 4);
    const double retain = frac(rng);
    const std::vector<double> lambdas{lam(rng), lam(rng), lam(rng)};
    const auto masks = prune_topk(vals, retain, PruneMode::joint);
    const Matrix signs = elect_signs(apply_masks(vals, masks));
    for (bool disjoint : {true, false}) {
      const Matrix got = disjoint_average(vals, masks, &signs, lambdas, disjoint);
      const Matrix want = testing::per_position_merge(
          vals, lambdas, [&](std::size_t t, Index i, Index j) { return masks[t](i, j); }, true, disjoint);
      ASSERT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12);
    }
    const Matrix no_elect = disjoint_average(vals, masks, nullptr, lambdas, true);
    const Matrix want_ne = testing::per_position_merge(
        vals, lambdas, [&](std::size_t t, Index i, Index j) { return masks[t](i, j); }, false, true);
    ASSERT_LE((no_elect - want_ne).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MergeDrm, IdentityOnIdenticalTasks) {
  std::mt19937_64 rng(12);
  const Matrix a = testing::random_matrix(rng, 5, 7);
  for (Method m : {Method::drm_h, Method::drm_v})
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto ds = DeltaSet::from("w", std::vector<Matrix>(n, a));
      EXPECT_LE(rel(merge_drm(ds, full_config(m)), a), 1e-8) << to_string(m) << " n=" << n;
    }
}

TEST(MergeDrm, FullRetentionSingleTaskAndAblations) {
  std::mt19937_64 rng(13);
  const Matrix a = testing::random_matrix(rng, 6, 4);
  const auto ds = DeltaSet::from("w", {a});
  for (Method m : {Method::drm_h, Method::drm_v}) {
    auto cfg = full_config(m);
    EXPECT_LE(rel(merge_drm(ds, cfg), a), 1e-8);
    cfg.enable_prune = false;
    cfg.enable_sign_elect = false;
    cfg.retain = 0.2;
    EXPECT_LE(rel(merge_drm(ds, cfg), a), 1e-8);
  }
}

TEST(MergeDrm, RejectsBaselineMethod) {
  const auto ds = DeltaSet::from("w", {Matrix::Ones(2, 2)});
  EXPECT_THROW(merge_drm(ds, MergeConfig::defaults(Method::ties)), Error);
}

TEST(MergeDrm, VerticalEqualsTransposedHorizontal) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 30; ++trial) {
    const auto ds = DeltaSet::from("w", testing::separated_deltas(rng, 3, 5, 7));
    for (double retain : {0.2, 0.5, 1.0}) {
      MergeConfig h = MergeConfig::defaults(Method::drm_h), v = MergeConfig::defaults(Method::drm_v);
      h.retain = v.retain = retain;
      const Matrix mv = merge_drm(ds, v);
      const Matrix mh = merge_drm(ds.transposed(), h).transpose();
      EXPECT_LE(rel(mv, mh), 1e-8) << trial << " " << retain;
    }
  }
}

TEST(MergeDrm, TaskOrderInvariance) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const auto deltas = testing::separated_deltas(rng, 4, 6, 5);
    std::vector<Matrix> shuffled = deltas;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (Method m : {Method::drm_h, Method::drm_v}) {
      const auto cfg = MergeConfig::defaults(m);
      EXPECT_LE(rel(merge_drm(DeltaSet::from("w", deltas), cfg), merge_drm(DeltaSet::from("w", shuffled), cfg)),
                1e-6);
    }
  }
}

TEST(MergeDrm, MatchesStepByStepComposition) {
  std::mt19937_64 rng(16);
  const auto ds = DeltaSet::from("w", testing::random_blocks(rng, 3, 4, 6));
  auto cfg = MergeConfig::defaults(Method::drm_h);
  cfg.retain = 0.3;
  cfg.lambdas = {0.9, 1.1, 1.3};
  cfg.rank_drop = 0.25;
  const auto jd = truncate_rank(decompose_joint(ds, Orientation::horizontal), 0.25);
  const auto masks = prune_topk(jd.renorm_blocks, 0.3, PruneMode::joint);
  std::vector<Matrix> scaled;
  for (std::size_t t = 0; t < 3; ++t) scaled.push_back(jd.scaled_block(t));
  const Matrix want_block = testing::per_position_merge(
      scaled, cfg.lambdas, [&](std::size_t t, Index i, Index j) { return masks[t](i, j); });
  const Matrix want = testing::naive_matmul(jd.basis, want_block);
  const auto got = merge_drm_detailed(ds, cfg);
  EXPECT_LE((got.delta - want).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(got.rank_used, 3);
  EXPECT_EQ(got.total, 3u * 4u * 6u);
}

TEST(MergeBiases, Examples) {
  Vector base = Vector::Zero(1), t1(1), t2(1);
  t1 << 2;
  t2 << 4;
  const std::vector<Vector> tasks{t1, t2};
  const std::vector<double> one{1.0, 1.0}, two{2.0, 2.0};
  EXPECT_DOUBLE_EQ(merge_biases(base, tasks, one)(0), 3.0);
  EXPECT_DOUBLE_EQ(merge_biases(base, tasks, two)(0), 6.0);
  Vector b2(2), x(2);
  b2 << 1, 1;
  x << 3, -1;
  const std::vector<Vector> same{x, x, x};
  const std::vector<double> ones{1.0, 1.0, 1.0};
  EXPECT_EQ(merge_biases(b2, same, ones), x);
  const std::vector<Vector> bad{Vector::Zero(3)};
  const std::vector<double> l1{1.0};
  EXPECT_THROW(merge_biases(b2, bad, l1), Error);
}

}  // namespace
}  // namespace drm
