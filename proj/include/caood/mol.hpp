// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

// Meta-learned OOD detection under continuous shift.
//
// Inner tasks adapt the head (adapter + classifier) to one time step with
//   L^t = L_ce(S) + mmd2(f(S), f(S^t_spt)) + lambda * L_ood^t
// while the extractor is held fixed. The outer step updates only the
// extractor on the query sets of the whole trajectory:
//   L_meta = L_ce(S) + L_qry + (1/l) sum_t (L_d^t + lambda * L_ood^t)
// with a first-order gradient (the adapted head is treated as constant).

#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "caood/autodiff.hpp"
#include "caood/mmd.hpp"
#include "caood/net.hpp"
#include "caood/oodscore.hpp"
#include "caood/shiftbench.hpp"
#include "caood/virtual_ood.hpp"

namespace caood {

struct MetaConfig {
  double alpha = 0.1;    // inner / test-time learning rate
  double beta = 0.01;    // outer learning rate
  double lambda = 0.015;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double reg_start = 2.0 / 3.0;  // fraction of episodes after which L_ood is switched on
  std::size_t episodes = 60;
  std::size_t trajectory_length = 10;
  std::size_t spt_per_t = 100;
  std::size_t qry_per_t = 100;
  std::size_t inner_steps = 1;   // SGD steps per trajectory time step
  std::size_t origin_batch = 128;
  std::size_t queue_capacity = kDefaultQueueCapacity;
  std::size_t pool_size = kDefaultPoolSize;
  std::size_t pool_rank = 1;     // p
  std::size_t virtual_per_class = 1;
  std::size_t test_steps = 20;   // adaptation steps per test time step
  std::size_t test_passes = 1;   // passes over the test window
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ArgumentError("meta config: " + field + " " + why);
    };
    if (!(alpha > 0.0)) fail("alpha", "must be > 0");
    if (!(beta > 0.0)) fail("beta", "must be > 0");
    if (!(lambda >= 0.0)) fail("lambda", "must be >= 0");
    if (!(reg_start > 0.0 && reg_start <= 1.0)) fail("reg_start", "must be in (0, 1]");
    if (trajectory_length < 2) fail("trajectory_length", "must be >= 2");
    if (spt_per_t < 1 || qry_per_t < 1) fail("spt_per_t/qry_per_t", "must be >= 1");
    if (origin_batch < 1) fail("origin_batch", "must be >= 1");
    if (pool_rank < 1 || pool_rank > pool_size) fail("pool_rank", "must be in [1, pool_size]");
    if (virtual_per_class < 1) fail("virtual_per_class", "must be >= 1");
    if (queue_capacity < 1) fail("queue_capacity", "must be >= 1");
    if (test_passes < 1) fail("test_passes", "must be >= 1");
  }

  SgdOptions inner_options() const { return {alpha, momentum, weight_decay}; }
  SgdOptions outer_options() const { return {beta, momentum, weight_decay}; }

  // The heavier setting with larger learning rates and lambda.
  static MetaConfig heavy() {
    MetaConfig c;
    c.alpha = 0.3;
    c.beta = 0.03;
    c.lambda = 0.1;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const MetaConfig& c) {
  j = {{"alpha", c.alpha},
       {"beta", c.beta},
       {"lambda", c.lambda},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"reg_start", c.reg_start},
       {"episodes", c.episodes},
       {"trajectory_length", c.trajectory_length},
       {"spt_per_t", c.spt_per_t},
       {"qry_per_t", c.qry_per_t},
       {"inner_steps", c.inner_steps},
       {"origin_batch", c.origin_batch},
       {"queue_capacity", c.queue_capacity},
       {"pool_size", c.pool_size},
       {"pool_rank", c.pool_rank},
       {"virtual_per_class", c.virtual_per_class},
       {"test_steps", c.test_steps},
       {"test_passes", c.test_passes},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, MetaConfig& c) {
  if (!j.is_object()) throw ArgumentError("meta config: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    if (k == "alpha") c.alpha = v.get<double>();
    else if (k == "beta") c.beta = v.get<double>();
    else if (k == "lambda") c.lambda = v.get<double>();
    else if (k == "momentum") c.momentum = v.get<double>();
    else if (k == "weight_decay") c.weight_decay = v.get<double>();
    else if (k == "reg_start") c.reg_start = v.get<double>();
    else if (k == "episodes") c.episodes = v.get<std::size_t>();
    else if (k == "trajectory_length") c.trajectory_length = v.get<std::size_t>();
    else if (k == "spt_per_t") c.spt_per_t = v.get<std::size_t>();
    else if (k == "qry_per_t") c.qry_per_t = v.get<std::size_t>();
    else if (k == "inner_steps") c.inner_steps = v.get<std::size_t>();
    else if (k == "origin_batch") c.origin_batch = v.get<std::size_t>();
    else if (k == "queue_capacity") c.queue_capacity = v.get<std::size_t>();
    else if (k == "pool_size") c.pool_size = v.get<std::size_t>();
    else if (k == "pool_rank") c.pool_rank = v.get<std::size_t>();
    else if (k == "virtual_per_class") c.virtual_per_class = v.get<std::size_t>();
    else if (k == "test_steps") c.test_steps = v.get<std::size_t>();
    else if (k == "test_passes") c.test_passes = v.get<std::size_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else throw ArgumentError("meta config: unknown key '" + k + "'");
  }
}

// ---------------------------------------------------------------------------
// Losses.

struct IdAdaptLoss {
  Tensor ce;
  Tensor discrepancy;
};

// L_ce on the labeled origin batch and mmd2 between its logits and the
// logits of the shifted batch.
inline IdAdaptLoss loss_id_adapt(const PartitionedModel& model, const Tensor& origin_x, std::span<const int> origin_y,
                                 const Tensor& shifted_x) {
  const Tensor lo = model.forward(origin_x);
  const Tensor ls = model.forward(shifted_x);
  return {cross_entropy(lo, origin_y), mmd2(lo, ls)};
}

// mean_c mean_z softplus(E(c(z))) + mean_x softplus(-E(f(x))), where E is the
// energy score. `virtual_features` holds the outliers of each class.
inline Tensor loss_uncertainty(const PartitionedModel& model, std::span<const Tensor> virtual_features,
                               const Tensor& shifted_logits) {
  if (virtual_features.empty()) throw ArgumentError("loss_uncertainty: no virtual outliers");
  std::vector<Tensor> per_class;
  for (const auto& z : virtual_features) {
    if (z.rank() != 2 || z.rows() == 0) throw ArgumentError("loss_uncertainty: empty virtual batch for a class");
    per_class.push_back(mean(softplus(energy_score(model.classify(z)))));
  }
  Tensor term1 = per_class.front();
  for (std::size_t i = 1; i < per_class.size(); ++i) term1 = add(term1, per_class[i]);
  term1 = scale(term1, 1.0 / static_cast<double>(per_class.size()));
  const Tensor term2 = mean(softplus(neg(energy_score(shifted_logits))));
  return add(term1, term2);
}

// max_i mmd2(f(S_qry^{i+1}), f(S_qry^i)) over consecutive query sets.
inline Tensor loss_qry(std::span<const Tensor> query_logits) {
  if (query_logits.size() < 2) throw ArgumentError("loss_qry: need at least two query sets");
  std::vector<Tensor> pairs;
  for (std::size_t i = 0; i + 1 < query_logits.size(); ++i) pairs.push_back(mmd2(query_logits[i + 1], query_logits[i]));
  return maximum(pairs);
}

// ---------------------------------------------------------------------------
// Loop plumbing.

struct LossBreakdown {
  double ce = 0.0;
  double d = 0.0;
  double ood = 0.0;
  double qry = 0.0;
  double total = 0.0;
};

struct LogRecord {
  std::string phase;  // "inner" or "outer"
  std::size_t episode = 0;
  double t = 0.0;
  LossBreakdown loss;
};

inline nlohmann::json to_json_line(const LogRecord& r) {
  return {{"phase", r.phase},       {"episode", r.episode},   {"t", r.t},
          {"loss_ce", r.loss.ce},   {"loss_d", r.loss.d},     {"loss_ood", r.loss.ood},
          {"loss_qry", r.loss.qry}, {"loss_total", r.loss.total}};
}

// Makes only the listed groups require gradients for its lifetime.
class TrainableScope {
 public:
  TrainableScope(PartitionedModel& model, std::initializer_list<Group> groups) : model_(model) {
    for (Group g : {Group::Extractor, Group::Adapter, Group::Classifier}) {
      const bool on = std::find(groups.begin(), groups.end(), g) != groups.end();
      for (auto& p : model_.group(g)) p.value.set_requires_grad(on);
    }
  }
  ~TrainableScope() {
    for (Group g : {Group::Extractor, Group::Adapter, Group::Classifier})
      for (auto& p : model_.group(g)) p.value.set_requires_grad(true);
  }
  TrainableScope(const TrainableScope&) = delete;
  TrainableScope& operator=(const TrainableScope&) = delete;

 private:
  PartitionedModel& model_;
};

// Counts checksum violations of the update discipline: inner and test steps
// may touch only the head, outer steps only the extractor.
struct DisciplineMonitor {
  std::size_t inner_checks = 0;
  std::size_t outer_checks = 0;
  std::size_t violations = 0;
};

namespace detail {

inline std::vector<std::size_t> sample_rows(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  k = std::min(k, n);
  std::vector<std::size_t> all(n), out;
  std::iota(all.begin(), all.end(), 0);
  out.reserve(k);
  std::sample(all.begin(), all.end(), std::back_inserter(out), static_cast<std::ptrdiff_t>(k), rng);
  return out;
}

inline void require_finite(double v, const char* phase) {
  if (!std::isfinite(v)) throw NumericError(std::string(phase) + ": non-finite loss");
}

}  // namespace detail

// State carried across the head-adaptation steps of one episode or test run.
struct HeadState {
  Sgd optimizer;
  ClassQueues queues;
  std::mt19937_64 rng;

  HeadState(const MetaConfig& cfg, const ModelConfig& mc, std::uint64_t seed)
      : optimizer(cfg.inner_options()), queues(mc.num_classes, mc.feat_dim, cfg.queue_capacity), rng(seed) {}
};

struct InnerResult {
  LossBreakdown loss;
  std::vector<Tensor> virtual_features;  // per class; empty when L_ood is off
};

// One SGD step on (adapter, classifier) for the time step whose shifted
// samples are `shifted_x`.
inline InnerResult inner_step(PartitionedModel& model, HeadState& state, const Dataset& origin,
                              const Tensor& shifted_x, const MetaConfig& cfg, bool use_mmd, bool use_ood,
                              DisciplineMonitor* monitor = nullptr) {
  const std::uint64_t theta_before = monitor ? model.checksum(Group::Extractor) : 0;
  const auto rows = detail::sample_rows(origin.size(), cfg.origin_batch, state.rng);
  Dataset batch = origin.subset(rows);
  InnerResult res;
  {
    Tape::Pause pause;
    state.queues.update(model.features(batch.x), batch.y);
  }
  if (use_ood) {
    const GaussianStats stats = estimate_stats(state.queues);
    for (std::size_t c = 0; c < stats.num_classes(); ++c) {
      Tensor z = Tensor::zeros({cfg.virtual_per_class, stats.dim()});
      auto o = z.data();
      for (std::size_t k = 0; k < cfg.virtual_per_class; ++k) {
        const VirtualSample s = sample_virtual_ood(stats, c, cfg.pool_size, cfg.pool_rank, state.rng);
        for (std::size_t j = 0; j < stats.dim(); ++j) o[k * stats.dim() + j] = s.point(static_cast<Eigen::Index>(j));
      }
      res.virtual_features.push_back(std::move(z));
    }
  }
  {
    TrainableScope trainable(model, {Group::Adapter, Group::Classifier});
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor lo = model.forward(batch.x);
    const Tensor ls = model.forward(shifted_x);
    Tensor total = cross_entropy(lo, batch.y);
    res.loss.ce = total.item();
    if (use_mmd) {
      const Tensor d = mmd2(lo, ls);
      res.loss.d = d.item();
      total = add(total, d);
    }
    if (use_ood) {
      const Tensor o = loss_uncertainty(model, res.virtual_features, ls);
      res.loss.ood = o.item();
      total = add(total, scale(o, cfg.lambda));
    }
    res.loss.total = total.item();
    detail::require_finite(res.loss.total, "inner_step");
    tape.backward(total);
    state.optimizer.step(model.group(Group::Adapter));
    state.optimizer.step(model.group(Group::Classifier));
  }
  zero_grad(model.group(Group::Adapter));
  zero_grad(model.group(Group::Classifier));
  if (monitor) {
    ++monitor->inner_checks;
    if (model.checksum(Group::Extractor) != theta_before) ++monitor->violations;
  }
  return res;
}

// Per-time-step material from the inner loop that the outer step reuses.
struct TrajectoryStep {
  double t = 0.0;
  Tensor query_x;
  std::vector<Tensor> virtual_features;
};

// Assembles L_meta and its parts; differentiable through whichever groups
// currently require gradients.
struct MetaLoss {
  Tensor total;
  LossBreakdown parts;
};

inline MetaLoss meta_loss(const PartitionedModel& model, const Tensor& origin_x, std::span<const int> origin_y,
                          std::span<const TrajectoryStep> steps, double lambda, bool use_ood) {
  if (steps.empty()) throw ArgumentError("meta_loss: empty trajectory");
  MetaLoss m;
  const Tensor lo = model.forward(origin_x);
  Tensor total = cross_entropy(lo, origin_y);
  m.parts.ce = total.item();
  std::vector<Tensor> ql;
  for (const auto& s : steps) ql.push_back(model.forward(s.query_x));
  if (ql.size() >= 2) {
    const Tensor q = loss_qry(ql);
    m.parts.qry = q.item();
    total = add(total, q);
  }
  Tensor avg = Tensor::scalar(0.0);
  double d_sum = 0.0, o_sum = 0.0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    Tensor term = mmd2(lo, ql[i]);
    d_sum += term.item();
    if (use_ood && !steps[i].virtual_features.empty()) {
      const Tensor o = loss_uncertainty(model, steps[i].virtual_features, ql[i]);
      o_sum += o.item();
      term = add(term, scale(o, lambda));
    }
    avg = add(avg, term);
  }
  const double inv = 1.0 / static_cast<double>(steps.size());
  total = add(total, scale(avg, inv));
  m.parts.d = d_sum * inv;
  m.parts.ood = o_sum * inv;
  m.parts.total = total.item();
  m.total = total;
  return m;
}

// First-order SGD step on the extractor only.
inline LossBreakdown outer_step(PartitionedModel& model, Sgd& theta_opt, const Dataset& origin,
                                std::span<const TrajectoryStep> steps, const MetaConfig& cfg, bool use_ood,
                                std::mt19937_64& rng, DisciplineMonitor* monitor = nullptr) {
  const std::uint64_t phi_before = monitor ? model.checksum(Group::Adapter) : 0;
  const std::uint64_t w_before = monitor ? model.checksum(Group::Classifier) : 0;
  const auto rows = detail::sample_rows(origin.size(), cfg.origin_batch, rng);
  const Dataset batch = origin.subset(rows);
  LossBreakdown parts;
  {
    TrainableScope trainable(model, {Group::Extractor});
    Tape tape;
    Tape::Scope scope(tape);
    const MetaLoss m = meta_loss(model, batch.x, batch.y, steps, cfg.lambda, use_ood);
    parts = m.parts;
    detail::require_finite(parts.total, "outer_step");
    tape.backward(m.total);
    theta_opt.step(model.group(Group::Extractor));
  }
  zero_grad(model.group(Group::Extractor));
  if (monitor) {
    ++monitor->outer_checks;
    if (model.checksum(Group::Adapter) != phi_before || model.checksum(Group::Classifier) != w_before) {
      ++monitor->violations;
    }
  }
  return parts;
}

struct TrainResult {
  std::vector<LogRecord> log;
  Sgd theta_optimizer;
  DisciplineMonitor monitor;
};

inline std::uint64_t episode_seed(std::uint64_t seed, std::size_t episode) {
  return detail::mix_seed(seed, 0xe915, episode);
}

// Episodic meta-training over the training window of `stream`.
inline TrainResult meta_train(PartitionedModel& model, const ShiftStream& stream, const MetaConfig& cfg) {
  cfg.validate();
  TrainResult res{{}, Sgd(cfg.outer_options()), {}};
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0x7a11));
  const std::size_t l = std::min(cfg.trajectory_length, stream.length());
  const auto start = static_cast<double>(cfg.episodes) * cfg.reg_start;
  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    const bool use_ood = cfg.lambda > 0.0 && static_cast<double>(ep) >= start;
    model.reinit_group(Group::Adapter, episode_seed(cfg.seed, ep));
    model.reinit_group(Group::Classifier, episode_seed(cfg.seed, ep));
    HeadState head(cfg, model.config(), episode_seed(cfg.seed ^ 0x5eed, ep));
    const Trajectory tr = sample_trajectory(stream, l, cfg.spt_per_t, cfg.qry_per_t, rng);
    std::vector<TrajectoryStep> steps;
    for (std::size_t i = 0; i < tr.steps.size(); ++i) {
      LossBreakdown acc;
      InnerResult last;
      const std::size_t k_steps = std::max<std::size_t>(cfg.inner_steps, 1);
      for (std::size_t k = 0; k < k_steps; ++k) {
        last = inner_step(model, head, stream.origin, tr.spt[i].x, cfg, true, use_ood, &res.monitor);
        acc.ce += last.loss.ce / static_cast<double>(k_steps);
        acc.d += last.loss.d / static_cast<double>(k_steps);
        acc.ood += last.loss.ood / static_cast<double>(k_steps);
        acc.total += last.loss.total / static_cast<double>(k_steps);
      }
      const double t = stream.grid[tr.steps[i]];
      res.log.push_back({"inner", ep, t, acc});
      steps.push_back({t, tr.qry[i].x, std::move(last.virtual_features)});
    }
    const LossBreakdown outer = outer_step(model, res.theta_optimizer, stream.origin, steps, cfg, use_ood, rng,
                                           &res.monitor);
    res.log.push_back({"outer", ep, -1.0, outer});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Test-time adaptation and evaluation.

struct AdaptOptions {
  bool reinit_head = true;
  bool use_mmd = true;
  bool use_ood = true;
  std::size_t steps_per_t = 20;
  std::size_t passes = 1;
  ScoreKind score = ScoreKind::Energy;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<double> scores_of(const PartitionedModel& model, const Tensor& x, ScoreKind kind,
                                     const std::optional<GaussianStats>& stats) {
  Tape::Pause pause;
  const auto acts = model.forward_all(x);
  Tensor s;
  switch (kind) {
    case ScoreKind::Energy:
      s = energy_score(acts.logits);
      break;
    case ScoreKind::Msp:
      s = msp_score(acts.logits);
      break;
    case ScoreKind::Mahalanobis:
      s = mahalanobis_score(acts.features, *stats);
      break;
  }
  return {s.data().begin(), s.data().end()};
}

}  // namespace detail

// Scores one test time step with a threshold calibrated on its ID split.
inline EvalRecord evaluate_step(const PartitionedModel& model, const TestStep& step, ScoreKind kind,
                                const Dataset& origin) {
  std::optional<GaussianStats> stats;
  if (kind == ScoreKind::Mahalanobis) {
    Tape::Pause pause;
    stats.emplace(estimate_stats(model.features(origin.x), origin.y, model.config().num_classes));
  }
  const auto calib = detail::scores_of(model, step.calib.x, kind, stats);
  const auto id = detail::scores_of(model, step.eval_id.x, kind, stats);
  const auto ood = detail::scores_of(model, step.eval_ood.x, kind, stats);
  std::size_t correct = 0;
  {
    Tape::Pause pause;
    correct = count_correct(model.forward(step.eval_id.x), step.eval_id.y);
  }
  return evaluate_scores(step.t, calib, id, ood, correct);
}

struct TestResult {
  std::vector<EvalRecord> records;  // records of the final pass, one per test time step
  DisciplineMonitor monitor;
};

// Adapts the head along the test window, never touching the extractor, and
// evaluates after each time step.
inline TestResult meta_test(PartitionedModel& model, const Dataset& origin, std::span<const TestStep> stream,
                            const MetaConfig& cfg, const AdaptOptions& opt) {
  TestResult res;
  if (opt.reinit_head) {
    model.reinit_group(Group::Adapter, detail::mix_seed(opt.seed, 0x7e5));
    model.reinit_group(Group::Classifier, detail::mix_seed(opt.seed, 0x7e5));
  }
  const bool prev_frozen = model.extractor_frozen();
  model.freeze_extractor(true);
  HeadState head(cfg, model.config(), detail::mix_seed(opt.seed, 0xada));
  const bool use_ood = opt.use_ood && cfg.lambda > 0.0;
  for (std::size_t pass = 0; pass < std::max<std::size_t>(opt.passes, 1); ++pass) {
    res.records.clear();
    for (const auto& step : stream) {
      for (std::size_t k = 0; k < opt.steps_per_t; ++k)
        inner_step(model, head, origin, step.adapt.x, cfg, opt.use_mmd, use_ood, &res.monitor);
      res.records.push_back(evaluate_step(model, step, opt.score, origin));
    }
  }
  model.freeze_extractor(prev_frozen);
  return res;
}

}  // namespace caood
