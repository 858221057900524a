// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "caood/mol.hpp"

namespace caood {
namespace {

ModelConfig tiny_model(std::uint64_t seed = 3) {
  ModelConfig c;
  c.input_dim = 2;
  c.extractor_widths = {16};
  c.feat_dim = 8;
  c.adapter_widths = {8};
  c.num_classes = 4;
  c.seed = seed;
  return c;
}

SyntheticConfig tiny_synthetic() {
  SyntheticConfig c;
  c.origin_samples = 400;
  c.train_angles = angle_grid(6.0, 6.0, 10);
  c.train_per_t = 80;
  c.adapt_per_t = 20;
  c.calib_per_t = 20;
  c.eval_id_per_t = 40;
  c.eval_ood_per_t = 40;
  c.test_angles = angle_grid(120.0, 18.0, 3);
  c.seed = 11;
  return c;
}

MetaConfig tiny_meta() {
  MetaConfig m;
  m.episodes = 6;
  m.trajectory_length = 3;
  m.spt_per_t = 30;
  m.qry_per_t = 30;
  m.origin_batch = 32;
  m.queue_capacity = 40;
  m.pool_size = 50;
  m.test_steps = 2;
  m.seed = 5;
  return m;
}

const SyntheticBenchmark& bench() {
  static const SyntheticBenchmark b = make_synthetic_caood(tiny_synthetic());
  return b;
}

Tensor rows_of(const Dataset& d, std::size_t n) {
  std::vector<std::size_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = i;
  return d.subset(r).x;
}

std::vector<int> labels_of(const Dataset& d, std::size_t n) { return {d.y.begin(), d.y.begin() + static_cast<long>(n)}; }

TEST(MetaConfig, Defaults) {
  const MetaConfig m;
  EXPECT_EQ(m.lambda, 0.015);
  EXPECT_EQ(m.alpha, 0.1);
  EXPECT_EQ(m.beta, 0.01);
  EXPECT_EQ(m.momentum, 0.9);
  EXPECT_EQ(m.weight_decay, 5e-4);
  EXPECT_EQ(m.reg_start, 2.0 / 3.0);
  EXPECT_EQ(m.queue_capacity, 500u);
  EXPECT_EQ(m.pool_size, 1000u);
  EXPECT_EQ(m.pool_rank, 1u);
  const MetaConfig h = MetaConfig::heavy();
  EXPECT_EQ(h.lambda, 0.1);
  EXPECT_EQ(h.alpha, 0.3);
  EXPECT_EQ(h.beta, 0.03);
}

TEST(MetaConfig, JsonRoundTripAndValidation) {
  const MetaConfig m = tiny_meta();
  const nlohmann::json j = m;
  EXPECT_EQ(nlohmann::json(j.get<MetaConfig>()).dump(), j.dump());
  nlohmann::json bad = j;
  bad["gamma"] = 1.0;
  EXPECT_THROW(bad.get<MetaConfig>(), ArgumentError);
  MetaConfig z = m;
  z.pool_rank = m.pool_size + 1;
  EXPECT_THROW(z.validate(), ArgumentError);
  z = m;
  z.alpha = 0.0;
  EXPECT_THROW(z.validate(), ArgumentError);
}

TEST(Losses, CrossEntropyOfZeroLogitsIsLogC) {
  PartitionedModel m(tiny_model());
  m.zero_group(Group::Classifier);
  const Tensor x = rows_of(bench().origin, 20);
  const auto l = loss_id_adapt(m, x, labels_of(bench().origin, 20), x);
  EXPECT_NEAR(l.ce.item(), std::log(4.0), 1e-9);
  EXPECT_NEAR(l.discrepancy.item(), 0.0, 1e-12);
}

TEST(Losses, UncertaintyAtZeroEnergyIsTwoLogTwo) {
  PartitionedModel m(tiny_model());
  m.zero_group(Group::Classifier);
  // bias -ln C makes every logsumexp exactly zero
  for (auto& p : m.group(Group::Classifier))
    if (p.value.rank() == 1)
      for (double& v : p.value.data()) v = -std::log(4.0);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  std::vector<Tensor> virt;
  for (int c = 0; c < 4; ++c) {
    Tensor z = Tensor::zeros({3, 8});
    for (double& v : z.data()) v = g(rng);
    virt.push_back(z);
  }
  const Tensor shifted = m.forward(rows_of(bench().test[0].adapt, 10));
  EXPECT_NEAR(loss_uncertainty(m, virt, shifted).item(), 2 * std::numbers::ln2, 1e-9);
  EXPECT_THROW(loss_uncertainty(m, {}, shifted), ArgumentError);
}

TEST(Losses, QueryLossIsMaxOverConsecutivePairs) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<Tensor> q;
  for (int i = 0; i < 4; ++i) {
    Tensor t = Tensor::zeros({12, 3});
    for (double& v : t.data()) v = g(rng) + 0.4 * i * i;
    q.push_back(t);
  }
  double want = 0.0;
  for (int i = 0; i < 3; ++i) want = std::max(want, mmd2_value(q[i + 1], q[i]));
  EXPECT_EQ(loss_qry(q).item(), want);
  EXPECT_THROW(loss_qry(std::span<const Tensor>(q.data(), 1)), ArgumentError);
}

TEST(Losses, SingleStepZeroLambdaReducesToIdAdaptation) {
  PartitionedModel m(tiny_model());
  const Dataset& o = bench().origin;
  const Tensor ox = rows_of(o, 40), qx = rows_of(bench().train.sets[2], 30);
  const auto y = labels_of(o, 40);
  const TrajectoryStep step{12.0, qx, {}};
  const MetaLoss ml = meta_loss(m, ox, y, std::span<const TrajectoryStep>(&step, 1), 0.0, false);
  const auto id = loss_id_adapt(m, ox, y, qx);
  EXPECT_NEAR(ml.total.item(), id.ce.item() + id.discrepancy.item(), 1e-12);
  EXPECT_EQ(ml.parts.qry, 0.0);
}

TEST(Losses, MetaLossIncludesQueryTermForLongerTrajectories) {
  PartitionedModel m(tiny_model());
  const Dataset& o = bench().origin;
  const Tensor ox = rows_of(o, 40);
  const auto y = labels_of(o, 40);
  std::vector<TrajectoryStep> steps;
  for (std::size_t i : {0u, 4u, 9u}) steps.push_back({bench().train.grid[i], rows_of(bench().train.sets[i], 30), {}});
  const MetaLoss ml = meta_loss(m, ox, y, steps, 0.0, false);
  std::vector<Tensor> ql;
  for (const auto& s : steps) ql.push_back(m.forward(s.query_x));
  EXPECT_NEAR(ml.parts.qry, loss_qry(ql).item(), 1e-12);
  EXPECT_NEAR(ml.parts.total, ml.parts.ce + ml.parts.qry + ml.parts.d, 1e-12);
}

TEST(InnerStep, MovesOnlyTheHead) {
  PartitionedModel m(tiny_model());
  const MetaConfig cfg = tiny_meta();
  HeadState head(cfg, m.config(), 4);
  DisciplineMonitor mon;
  const auto theta = m.checksum(Group::Extractor);
  const auto phi = m.checksum(Group::Adapter), w = m.checksum(Group::Classifier);
  for (int k = 0; k < 3; ++k) inner_step(m, head, bench().origin, bench().train.sets[0].x, cfg, true, true, &mon);
  EXPECT_EQ(m.checksum(Group::Extractor), theta);
  EXPECT_NE(m.checksum(Group::Adapter), phi);
  EXPECT_NE(m.checksum(Group::Classifier), w);
  EXPECT_EQ(mon.inner_checks, 3u);
  EXPECT_EQ(mon.violations, 0u);
  for (Group g : {Group::Extractor, Group::Adapter, Group::Classifier})
    for (const auto& p : m.group(g)) EXPECT_TRUE(p.value.requires_grad());
}

TEST(InnerStep, VirtualOutliersPerClass) {
  PartitionedModel m(tiny_model());
  MetaConfig cfg = tiny_meta();
  cfg.virtual_per_class = 2;
  HeadState head(cfg, m.config(), 4);
  const auto r = inner_step(m, head, bench().origin, bench().train.sets[0].x, cfg, true, true);
  ASSERT_EQ(r.virtual_features.size(), 4u);
  EXPECT_EQ(r.virtual_features[0].rows(), 2u);
  EXPECT_EQ(r.virtual_features[0].cols(), 8u);
  EXPECT_GT(r.loss.ood, 0.0);
  const auto plain = inner_step(m, head, bench().origin, bench().train.sets[0].x, cfg, false, false);
  EXPECT_TRUE(plain.virtual_features.empty());
  EXPECT_EQ(plain.loss.d, 0.0);
  EXPECT_EQ(plain.loss.total, plain.loss.ce);
}

TEST(OuterStep, MovesOnlyTheExtractor) {
  PartitionedModel m(tiny_model());
  const MetaConfig cfg = tiny_meta();
  Sgd opt(cfg.outer_options());
  std::mt19937_64 rng(3);
  DisciplineMonitor mon;
  std::vector<TrajectoryStep> steps;
  for (std::size_t i : {1u, 5u}) steps.push_back({bench().train.grid[i], rows_of(bench().train.sets[i], 30), {}});
  const auto theta = m.checksum(Group::Extractor);
  const auto phi = m.checksum(Group::Adapter), w = m.checksum(Group::Classifier);
  outer_step(m, opt, bench().origin, steps, cfg, false, rng, &mon);
  EXPECT_NE(m.checksum(Group::Extractor), theta);
  EXPECT_EQ(m.checksum(Group::Adapter), phi);
  EXPECT_EQ(m.checksum(Group::Classifier), w);
  EXPECT_EQ(mon.outer_checks, 1u);
  EXPECT_EQ(mon.violations, 0u);
}

TEST(MetaTrain, LogShapeAndDiscipline) {
  PartitionedModel m(tiny_model());
  const MetaConfig cfg = tiny_meta();
  const TrainResult r = meta_train(m, bench().train, cfg);
  std::size_t inner = 0, outer = 0;
  for (const auto& rec : r.log) {
    (rec.phase == "inner" ? inner : outer) += 1;
    if (rec.phase == "inner") {
      EXPECT_TRUE(std::find(bench().train.grid.begin(), bench().train.grid.end(), rec.t) != bench().train.grid.end());
    }
  }
  EXPECT_EQ(inner, cfg.episodes * cfg.trajectory_length);
  EXPECT_EQ(outer, cfg.episodes);
  EXPECT_EQ(r.monitor.violations, 0u);
  EXPECT_EQ(r.monitor.outer_checks, cfg.episodes);
  const auto line = to_json_line(r.log.front());
  for (const char* k : {"episode", "t", "loss_ce", "loss_d", "loss_ood", "loss_qry", "loss_total"})
    EXPECT_TRUE(line.contains(k)) << k;
}

TEST(MetaTrain, RegularizerSwitchesOnLate) {
  PartitionedModel m(tiny_model());
  const MetaConfig cfg = tiny_meta();
  const TrainResult r = meta_train(m, bench().train, cfg);
  for (const auto& rec : r.log) {
    if (rec.phase != "inner") continue;
    if (rec.episode < 4) EXPECT_EQ(rec.loss.ood, 0.0);
    else EXPECT_GT(rec.loss.ood, 0.0);
  }
}

TEST(MetaTrain, ZeroEpisodesLeavesModelUnchanged) {
  PartitionedModel m(tiny_model());
  std::array<std::uint64_t, 3> before{};
  for (int g = 0; g < 3; ++g) before[g] = m.checksum(static_cast<Group>(g));
  MetaConfig cfg = tiny_meta();
  cfg.episodes = 0;
  const TrainResult r = meta_train(m, bench().train, cfg);
  EXPECT_TRUE(r.log.empty());
  for (int g = 0; g < 3; ++g) EXPECT_EQ(m.checksum(static_cast<Group>(g)), before[g]);
}

TEST(MetaTrain, DeterministicUnderSeed) {
  PartitionedModel a(tiny_model()), b(tiny_model());
  meta_train(a, bench().train, tiny_meta());
  meta_train(b, bench().train, tiny_meta());
  for (int g = 0; g < 3; ++g) EXPECT_EQ(a.checksum(static_cast<Group>(g)), b.checksum(static_cast<Group>(g)));
}

TEST(MetaTrain, CrossEntropyDecreases) {
  PartitionedModel m(tiny_model());
  MetaConfig cfg = tiny_meta();
  cfg.episodes = 40;
  cfg.inner_steps = 3;
  const TrainResult r = meta_train(m, bench().train, cfg);
  std::vector<double> ce;
  for (const auto& rec : r.log)
    if (rec.phase == "inner") ce.push_back(rec.loss.ce);
  const std::size_t k = ce.size() / 10;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < k; ++i) first += ce[i], last += ce[ce.size() - 1 - i];
  EXPECT_LT(last, first);
}

TEST(MetaTest, ZeroStepsEqualsDirectEvaluation) {
  PartitionedModel m(tiny_model());
  AdaptOptions opt;
  opt.reinit_head = false;
  opt.steps_per_t = 0;
  const auto before = m.checksum(Group::Adapter);
  const TestResult r = meta_test(m, bench().origin, bench().test, tiny_meta(), opt);
  EXPECT_EQ(m.checksum(Group::Adapter), before);
  ASSERT_EQ(r.records.size(), bench().test.size());
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    const EvalRecord d = evaluate_step(m, bench().test[i], ScoreKind::Energy, bench().origin);
    EXPECT_EQ(r.records[i].id_acc, d.id_acc);
    EXPECT_EQ(r.records[i].auroc, d.auroc);
    EXPECT_EQ(r.records[i].gamma, d.gamma);
  }
}

TEST(MetaTest, ThresholdComesFromCalibrationSplit) {
  PartitionedModel m(tiny_model());
  const TestStep& s = bench().test[1];
  const EvalRecord r = evaluate_step(m, s, ScoreKind::Energy, bench().origin);
  Tape::Pause p;
  const Tensor e = energy_score(m.forward(s.calib.x));
  EXPECT_EQ(r.gamma, select_threshold(e.values()));
  EXPECT_EQ(r.n_id, s.eval_id.size());
  EXPECT_EQ(r.n_ood, s.eval_ood.size());
}

TEST(MetaTest, AdaptationNeverTouchesTheExtractor) {
  PartitionedModel m(tiny_model());
  const auto theta = m.checksum(Group::Extractor);
  AdaptOptions opt;
  opt.steps_per_t = 3;
  opt.passes = 2;
  const TestResult r = meta_test(m, bench().origin, bench().test, tiny_meta(), opt);
  EXPECT_EQ(m.checksum(Group::Extractor), theta);
  EXPECT_EQ(r.monitor.violations, 0u);
  EXPECT_EQ(r.monitor.inner_checks, 3u * bench().test.size() * 2);
  EXPECT_EQ(r.records.size(), bench().test.size());
  EXPECT_FALSE(m.extractor_frozen());
}

TEST(MetaTest, MahalanobisScoreRuns) {
  PartitionedModel m(tiny_model());
  AdaptOptions opt;
  opt.steps_per_t = 1;
  opt.score = ScoreKind::Mahalanobis;
  const TestResult r = meta_test(m, bench().origin, bench().test, tiny_meta(), opt);
  for (const auto& rec : r.records) {
    EXPECT_GE(rec.auroc, 0.0);
    EXPECT_LE(rec.auroc, 1.0);
  }
}

}  // namespace
}  // namespace caood
