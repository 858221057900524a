// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration, baseline strategies, persistence and the CLI.

#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "caood/autodiff.hpp"
#include "caood/mmd.hpp"
#include "caood/mol.hpp"
#include "caood/net.hpp"
#include "caood/oodscore.hpp"
#include "caood/shiftbench.hpp"
#include "caood/virtual_ood.hpp"

namespace caood {

inline constexpr const char* kCodeVersion = "caood 1.0.0";
inline constexpr const char* kCheckpointFormat = "caood-checkpoint";
inline constexpr int kCheckpointVersion = 1;

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration.

enum class Baseline { Direct, SimpleAdaptive, DomainAdaptation, Mol };

inline const char* baseline_name(Baseline b) {
  switch (b) {
    case Baseline::Direct:
      return "direct";
    case Baseline::SimpleAdaptive:
      return "simple_adaptive";
    case Baseline::DomainAdaptation:
      return "domain_adaptation";
    case Baseline::Mol:
      return "mol";
  }
  return "?";
}

inline Baseline baseline_from_name(const std::string& s) {
  if (s == "direct") return Baseline::Direct;
  if (s == "simple_adaptive") return Baseline::SimpleAdaptive;
  if (s == "domain_adaptation") return Baseline::DomainAdaptation;
  if (s == "mol") return Baseline::Mol;
  throw ArgumentError("baseline: unknown name '" + s + "'");
}

// Supervised training of all groups used by the non-meta baselines.
struct PretrainConfig {
  std::size_t steps = 1500;
  double lr = 0.05;
  std::size_t batch = 128;
};

inline void to_json(Json& j, const PretrainConfig& c) { j = {{"steps", c.steps}, {"lr", c.lr}, {"batch", c.batch}}; }

inline void from_json(const Json& j, PretrainConfig& c) {
  if (!j.is_object()) throw ArgumentError("pretrain: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "steps") c.steps = it->get<std::size_t>();
    else if (it.key() == "lr") c.lr = it->get<double>();
    else if (it.key() == "batch") c.batch = it->get<std::size_t>();
    else throw ArgumentError("pretrain: unknown key '" + it.key() + "'");
  }
}

inline void to_json(Json& j, const ModelConfig& c) {
  j = {{"input_dim", c.input_dim},   {"extractor_widths", c.extractor_widths}, {"feat_dim", c.feat_dim},
       {"adapter_widths", c.adapter_widths}, {"num_classes", c.num_classes}, {"seed", c.seed}};
}

inline void from_json(const Json& j, ModelConfig& c) {
  if (!j.is_object()) throw ArgumentError("model: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k == "input_dim") c.input_dim = it->get<std::size_t>();
    else if (k == "extractor_widths") c.extractor_widths = it->get<std::vector<std::size_t>>();
    else if (k == "feat_dim") c.feat_dim = it->get<std::size_t>();
    else if (k == "adapter_widths") c.adapter_widths = it->get<std::vector<std::size_t>>();
    else if (k == "num_classes") c.num_classes = it->get<std::size_t>();
    else if (k == "seed") c.seed = it->get<std::uint64_t>();
    else throw ArgumentError("model: unknown key '" + k + "'");
  }
}

struct ExperimentConfig {
  std::string benchmark = "synthetic";
  SyntheticConfig synthetic;
  ModelConfig model;
  MetaConfig meta;
  PretrainConfig pretrain;
  Baseline baseline = Baseline::Mol;
  ScoreKind score = ScoreKind::Energy;
  std::string out = "out";
  std::uint64_t seed = 0;

  // Propagates the experiment seed into every component.
  ExperimentConfig with_seed(std::uint64_t s) const {
    ExperimentConfig c = *this;
    c.seed = s;
    c.synthetic.seed = detail::mix_seed(s, 1);
    c.model.seed = detail::mix_seed(s, 2);
    c.meta.seed = detail::mix_seed(s, 3);
    return c;
  }

  void validate() const {
    if (benchmark != "synthetic") throw ArgumentError("benchmark: only 'synthetic' is generated in-process");
    synthetic.validate();
    model.validate();
    meta.validate();
    if (model.input_dim != 2) throw ArgumentError("model.input_dim: the synthetic benchmark is 2-D");
    if (model.num_classes != synthetic.num_classes) {
      throw ArgumentError("model.num_classes: must equal synthetic.num_classes");
    }
    if (pretrain.batch < 1) throw ArgumentError("pretrain.batch: must be >= 1");
  }
};

inline void to_json(Json& j, const ExperimentConfig& c) {
  j = {{"benchmark", c.benchmark},
       {"synthetic", c.synthetic},
       {"model", c.model},
       {"meta", c.meta},
       {"pretrain", c.pretrain},
       {"baseline", baseline_name(c.baseline)},
       {"score", score_kind_name(c.score)},
       {"out", c.out},
       {"seed", c.seed}};
}

// Unknown keys and wrongly typed values are rejected with the field name.
inline ExperimentConfig parse_config(const Json& j) {
  if (!j.is_object()) throw ArgumentError("config: expected a JSON object");
  ExperimentConfig c;
  bool seed_given = false;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    try {
      if (k == "benchmark") c.benchmark = it->get<std::string>();
      else if (k == "synthetic") c.synthetic = it->get<SyntheticConfig>();
      else if (k == "model") c.model = it->get<ModelConfig>();
      else if (k == "meta") c.meta = it->get<MetaConfig>();
      else if (k == "pretrain") c.pretrain = it->get<PretrainConfig>();
      else if (k == "baseline") c.baseline = baseline_from_name(it->get<std::string>());
      else if (k == "score") c.score = score_kind_from_name(it->get<std::string>());
      else if (k == "out") c.out = it->get<std::string>();
      else if (k == "seed") c.seed = it->get<std::uint64_t>(), seed_given = true;
      else throw ArgumentError("config: unknown key '" + k + "'");
    } catch (const Json::exception& e) {
      throw ArgumentError("config: field '" + k + "': " + e.what());
    }
  }
  if (seed_given) c = c.with_seed(c.seed);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("config: cannot open '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ArgumentError(std::string("config: malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// Hash of the canonical (key-sorted, compact) JSON form of the config,
// excluding the output directory.
inline std::string config_hash(const ExperimentConfig& c) {
  Json j = c;
  j.erase("out");
  return hex64(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Baselines.

// Cross-entropy on S over all groups, optionally with an MMD term aligning
// the logits of S to a pooled target set.
inline Sgd pretrain_supervised(PartitionedModel& model, const Dataset& origin, const PretrainConfig& pc,
                               const MetaConfig& mc, std::uint64_t seed, const Dataset* target = nullptr) {
  Sgd opt({pc.lr, mc.momentum, mc.weight_decay});
  std::mt19937_64 rng(detail::mix_seed(seed, 0x9e7));
  for (std::size_t s = 0; s < pc.steps; ++s) {
    const Dataset batch = origin.subset(detail::sample_rows(origin.size(), pc.batch, rng));
    {
      Tape tape;
      Tape::Scope scope(tape);
      const Tensor lo = model.forward(batch.x);
      Tensor loss = cross_entropy(lo, batch.y);
      if (target && target->size() > 0) {
        const Dataset tb = target->subset(detail::sample_rows(target->size(), pc.batch, rng));
        loss = add(loss, mmd2(lo, model.forward(tb.x)));
      }
      detail::require_finite(loss.item(), "pretrain");
      tape.backward(loss);
      for (Group g : {Group::Extractor, Group::Adapter, Group::Classifier}) opt.step(model.group(g));
    }
    for (Group g : {Group::Extractor, Group::Adapter, Group::Classifier}) zero_grad(model.group(g));
  }
  return opt;
}

// Concatenation of every training-window set.
inline Dataset pooled_targets(const ShiftStream& stream) {
  Dataset out;
  if (stream.sets.empty()) return out;
  std::vector<Tensor> parts;
  for (const auto& s : stream.sets) parts.push_back(s.x);
  Tape::Pause pause;
  out.x = concat_rows(parts);
  return out;
}

inline AdaptOptions adapt_options(Baseline b, const ExperimentConfig& c) {
  AdaptOptions o;
  o.score = c.score;
  o.seed = c.meta.seed;
  o.passes = c.meta.test_passes;
  o.steps_per_t = c.meta.test_steps;
  switch (b) {
    case Baseline::Direct:
      o.reinit_head = false;
      o.use_mmd = false;
      o.use_ood = false;
      o.steps_per_t = 0;
      break;
    case Baseline::SimpleAdaptive:
    case Baseline::DomainAdaptation:
      o.reinit_head = false;
      o.use_mmd = true;
      o.use_ood = false;
      break;
    case Baseline::Mol:
      o.reinit_head = true;
      o.use_mmd = true;
      o.use_ood = true;
      break;
  }
  return o;
}

inline std::vector<EvalRecord> run_direct_test(PartitionedModel& model, const SyntheticBenchmark& b,
                                               const ExperimentConfig& c) {
  return meta_test(model, b.origin, b.test, c.meta, adapt_options(Baseline::Direct, c)).records;
}

inline std::vector<EvalRecord> run_simple_adaptive(PartitionedModel& model, const SyntheticBenchmark& b,
                                                   const ExperimentConfig& c) {
  return meta_test(model, b.origin, b.test, c.meta, adapt_options(Baseline::SimpleAdaptive, c)).records;
}

inline std::vector<EvalRecord> run_domain_adaptation(PartitionedModel& model, const SyntheticBenchmark& b,
                                                     const ExperimentConfig& c) {
  return meta_test(model, b.origin, b.test, c.meta, adapt_options(Baseline::DomainAdaptation, c)).records;
}

// Model plus optimizer state after the training phase.
struct TrainedState {
  PartitionedModel model;
  std::map<std::string, Sgd> optimizers;
  std::vector<LogRecord> log;
  DisciplineMonitor monitor;
};

inline TrainedState train_phase(const ExperimentConfig& c, const SyntheticBenchmark& b) {
  TrainedState s{PartitionedModel(c.model), {}, {}, {}};
  switch (c.baseline) {
    case Baseline::Direct:
    case Baseline::SimpleAdaptive:
      s.optimizers.emplace("pretrain", pretrain_supervised(s.model, b.origin, c.pretrain, c.meta, c.meta.seed));
      break;
    case Baseline::DomainAdaptation: {
      const Dataset pool = pooled_targets(b.train);
      s.optimizers.emplace("pretrain", pretrain_supervised(s.model, b.origin, c.pretrain, c.meta, c.meta.seed, &pool));
      break;
    }
    case Baseline::Mol: {
      TrainResult r = meta_train(s.model, b.train, c.meta);
      s.optimizers.emplace("outer", std::move(r.theta_optimizer));
      s.log = std::move(r.log);
      s.monitor = r.monitor;
      break;
    }
  }
  return s;
}

inline TestResult adapt_phase(const ExperimentConfig& c, const SyntheticBenchmark& b, PartitionedModel& model) {
  return meta_test(model, b.origin, b.test, c.meta, adapt_options(c.baseline, c));
}

struct ExperimentResult {
  std::vector<EvalRecord> records;
  std::vector<LogRecord> log;
  DisciplineMonitor train_monitor;
  DisciplineMonitor test_monitor;
  std::map<std::string, double> seconds;
};

inline ExperimentResult run_experiment(const ExperimentConfig& c) {
  using clock = std::chrono::steady_clock;
  ExperimentResult r;
  auto t0 = clock::now();
  const SyntheticBenchmark b = make_synthetic_caood(c.synthetic);
  auto t1 = clock::now();
  TrainedState s = train_phase(c, b);
  auto t2 = clock::now();
  TestResult tr = adapt_phase(c, b, s.model);
  auto t3 = clock::now();
  r.records = std::move(tr.records);
  r.log = std::move(s.log);
  r.train_monitor = s.monitor;
  r.test_monitor = tr.monitor;
  r.seconds["gen"] = std::chrono::duration<double>(t1 - t0).count();
  r.seconds["train"] = std::chrono::duration<double>(t2 - t1).count();
  r.seconds["adapt"] = std::chrono::duration<double>(t3 - t2).count();
  return r;
}

// ---------------------------------------------------------------------------
// Summaries.

struct Summary {
  double id_acc = 0.0;
  double auroc = 0.0;
  double aupr = 0.0;
  double fpr95 = 0.0;
  double auroc_slope = 0.0;  // least-squares slope of AUROC against t
};

inline double ls_slope(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  if (x.size() < 2) return 0.0;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0.0 ? sxy / sxx : 0.0;
}

namespace detail {

// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

}  // namespace detail

// Spearman rank correlation; 0 when either side is constant.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("spearman: length mismatch");
  const auto rx = detail::average_ranks(x), ry = detail::average_ranks(y);
  const auto n = static_cast<double>(x.size());
  const double m = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - m) * (ry[i] - m);
    sxx += (rx[i] - m) * (rx[i] - m);
    syy += (ry[i] - m) * (ry[i] - m);
  }
  return sxx > 0.0 && syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

inline Summary summarize(std::span<const EvalRecord> recs) {
  Summary s;
  if (recs.empty()) return s;
  std::vector<double> t, au;
  for (const auto& r : recs) {
    s.id_acc += r.id_acc;
    s.auroc += r.auroc;
    s.aupr += r.aupr;
    s.fpr95 += r.fpr95;
    t.push_back(r.t);
    au.push_back(r.auroc);
  }
  const auto n = static_cast<double>(recs.size());
  s.id_acc /= n;
  s.auroc /= n;
  s.aupr /= n;
  s.fpr95 /= n;
  s.auroc_slope = ls_slope(t, au);
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace detail {

inline Json group_json(const ParameterGroup& g) {
  Json arr = Json::array();
  for (const auto& p : g) arr.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"data", p.value.values()}});
  return arr;
}

inline Json optimizer_json(const Sgd& o) {
  Json v = Json::object();
  for (const auto& [k, buf] : o.velocity()) v[k] = buf;
  return {{"lr", o.options().lr},
          {"momentum", o.options().momentum},
          {"weight_decay", o.options().weight_decay},
          {"velocity", v}};
}

}  // namespace detail

struct Checkpoint {
  ModelConfig model_config;
  std::string baseline;
  std::string config_hash;
  Json groups;      // name -> parameter arrays
  Json optimizers;  // name -> optimizer state
};

inline Json checkpoint_payload(const PartitionedModel& model, const std::map<std::string, Sgd>& optimizers,
                               const std::string& baseline, const std::string& cfg_hash) {
  Json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["model_config"] = model.config();
  j["baseline"] = baseline;
  j["config_hash"] = cfg_hash;
  for (Group g : {Group::Extractor, Group::Adapter, Group::Classifier}) {
    j["groups"][group_name(g)] = {{"params", detail::group_json(model.group(g))}, {"checksum", hex64(model.checksum(g))}};
  }
  j["optimizers"] = Json::object();
  for (const auto& [name, opt] : optimizers) j["optimizers"][name] = detail::optimizer_json(opt);
  return j;
}

// Compact JSON with a trailing FNV-1a checksum of the payload.
inline std::string serialize_checkpoint(const PartitionedModel& model, const std::map<std::string, Sgd>& optimizers,
                                        const std::string& baseline, const std::string& cfg_hash) {
  Json j = checkpoint_payload(model, optimizers, baseline, cfg_hash);
  const std::string body = j.dump();
  j["checksum"] = hex64(fnv1a(body));
  return j.dump() + "\n";
}

inline void save_checkpoint(const std::string& path, const PartitionedModel& model,
                            const std::map<std::string, Sgd>& optimizers, const std::string& baseline = "",
                            const std::string& cfg_hash = "") {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("checkpoint: cannot write '" + path + "'");
  out << serialize_checkpoint(model, optimizers, baseline, cfg_hash);
}

struct LoadedCheckpoint {
  PartitionedModel model;
  std::map<std::string, Sgd> optimizers;
  std::string baseline;
  std::string config_hash;
};

inline LoadedCheckpoint parse_checkpoint(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ParseError(std::string("checkpoint: malformed JSON: ") + e.what(), 0);
  }
  if (j.value("format", std::string()) != kCheckpointFormat) throw StateError("checkpoint: not a caood checkpoint");
  const int version = j.value("version", -1);
  if (version != kCheckpointVersion) {
    throw StateError("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  }
  const std::string stored = j.value("checksum", std::string());
  Json body = j;
  body.erase("checksum");
  if (hex64(fnv1a(body.dump())) != stored) throw StateError("checkpoint: checksum mismatch");
  LoadedCheckpoint c{PartitionedModel(j.at("model_config").get<ModelConfig>()), {}, j.value("baseline", ""),
                     j.value("config_hash", "")};
  for (Group g : {Group::Extractor, Group::Adapter, Group::Classifier}) {
    const Json& arr = j.at("groups").at(group_name(g)).at("params");
    auto& group = c.model.group(g);
    if (arr.size() != group.size()) throw StateError("checkpoint: group '" + std::string(group_name(g)) + "' layout differs");
    for (std::size_t i = 0; i < group.size(); ++i) {
      const auto data = arr[i].at("data").get<std::vector<double>>();
      if (arr[i].at("name").get<std::string>() != group[i].name || data.size() != group[i].value.numel()) {
        throw StateError("checkpoint: parameter '" + group[i].name + "' does not match the model");
      }
      std::copy(data.begin(), data.end(), group[i].value.data().begin());
    }
    if (hex64(c.model.checksum(g)) != j["groups"][group_name(g)].value("checksum", "")) {
      throw StateError("checkpoint: group checksum mismatch for '" + std::string(group_name(g)) + "'");
    }
  }
  for (auto it = j.at("optimizers").begin(); it != j.at("optimizers").end(); ++it) {
    const Json& o = *it;
    Sgd opt({o.at("lr").get<double>(), o.at("momentum").get<double>(), o.at("weight_decay").get<double>()});
    std::map<std::string, std::vector<double>> vel;
    for (auto v = o.at("velocity").begin(); v != o.at("velocity").end(); ++v) vel[v.key()] = v->get<std::vector<double>>();
    opt.set_velocity(std::move(vel));
    c.optimizers.emplace(it.key(), std::move(opt));
  }
  return c;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("checkpoint: '" + path + "' does not exist; run `train` first");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Run manifest.

inline Json run_manifest(const ExperimentConfig& c, std::span<const EvalRecord> records,
                         const std::map<std::string, double>& seconds, const std::string& checkpoint_path) {
  Json recs = Json::array();
  for (const auto& r : records) {
    recs.push_back({{"t", r.t},         {"id_acc", r.id_acc}, {"auroc", r.auroc}, {"aupr", r.aupr},
                    {"fpr95", r.fpr95}, {"gamma", r.gamma},   {"n_id", r.n_id},   {"n_ood", r.n_ood}});
  }
  return {{"config", c},        {"config_hash", config_hash(c)}, {"code_version", kCodeVersion},
          {"records", recs},    {"wall_clock_seconds", seconds}, {"checkpoint", checkpoint_path}};
}

// ---------------------------------------------------------------------------
// Built-in oracle suite (brute-force references for the core metrics).

struct OracleOutcome {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline std::vector<OracleOutcome> run_oracle_suite(std::uint64_t seed = 0) {
  std::vector<OracleOutcome> out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> size_dist(1, 20);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_matrix = [&](std::size_t n, std::size_t d) {
    std::vector<double> v(n * d);
    for (double& x : v) x = normal(rng);
    return Tensor({n, d}, std::move(v));
  };
  {  // mmd2 against a direct double sum
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      const std::size_t n = size_dist(rng), m = size_dist(rng), d = 1 + k % 4;
      const Tensor x = random_matrix(n, d), y = random_matrix(m, d);
      const KernelBank bank = median_bank(x, y);
      auto kern = [&](const double* a, const double* b) {
        double sq = 0.0;
        for (std::size_t q = 0; q < d; ++q) sq += (a[q] - b[q]) * (a[q] - b[q]);
        double v = 0.0;
        for (std::size_t s = 0; s < bank.sigmas.size(); ++s)
          v += bank.weights[s] * std::exp(-sq / (2 * bank.sigmas[s] * bank.sigmas[s]));
        return v;
      };
      double xx = 0, yy = 0, xy = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) xx += kern(&x.data()[i * d], &x.data()[j * d]);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) yy += kern(&y.data()[i * d], &y.data()[j * d]);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) xy += kern(&x.data()[i * d], &y.data()[j * d]);
      const double ref = std::max(0.0, xx / double(n * n) + yy / double(m * m) - 2 * xy / double(n * m));
      worst = std::max(worst, std::abs(ref - mmd2_value(x, y, bank)));
    }
    out.push_back({"mmd2_double_sum", worst <= 1e-10, "max |diff| = " + std::to_string(worst)});
  }
  {  // AUROC against all pairs
    std::size_t mismatches = 0;
    std::uniform_int_distribution<std::size_t> sz(1, 200);
    std::uniform_int_distribution<int> level(0, 30);
    for (int k = 0; k < 100; ++k) {
      std::vector<double> a(sz(rng)), b(sz(rng));
      for (double& v : a) v = level(rng) / 3.0;
      for (double& v : b) v = level(rng) / 3.0 - 1.0;
      double wins = 0.0;
      for (double u : a)
        for (double v : b) wins += u > v ? 1.0 : (u == v ? 0.5 : 0.0);
      mismatches += auroc(a, b) != wins / static_cast<double>(a.size() * b.size());
    }
    out.push_back({"auroc_pairwise", mismatches == 0, std::to_string(mismatches) + " mismatches"});
  }
  {  // threshold TPR window
    std::size_t bad = 0;
    std::uniform_int_distribution<std::size_t> sz(20, 500);
    for (int k = 0; k < 100; ++k) {
      std::vector<double> s(sz(rng));
      for (double& v : s) v = normal(rng);
      const double g = select_threshold(s);
      const std::size_t n = s.size();
      const auto kept = static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [&](double v) { return v >= g; }));
      // kept / n in [0.95, 0.95 + 1/n], compared in integers
      bad += !(100 * kept >= 95 * n && 100 * kept <= 95 * n + 100);
    }
    out.push_back({"threshold_tpr_window", bad == 0, std::to_string(bad) + " violations"});
  }
  {  // p = 1 selection against a full sort
    std::size_t bad = 0;
    const std::size_t d = 3;
    std::vector<Eigen::VectorXd> mu{Eigen::VectorXd::Zero(d)};
    Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(d, d);
    cov(0, 1) = cov(1, 0) = 0.3;
    const GaussianStats stats(mu, {1}, cov);
    for (int k = 0; k < 100; ++k) {
      std::mt19937_64 a(seed + 1000 + static_cast<std::uint64_t>(k)), b = a;
      const SamplePool pool = draw_pool(stats, 0, 1000, a);
      std::vector<std::pair<double, std::size_t>> sorted;
      for (std::size_t i = 0; i < pool.log_density.size(); ++i) {
        const Eigen::VectorXd z = stats.transform(pool.eps.col(static_cast<Eigen::Index>(i)), 0);
        sorted.emplace_back(stats.log_density(z, 0), i);
      }
      std::sort(sorted.begin(), sorted.end());
      const VirtualSample v = sample_virtual_ood(stats, 0, 1000, 1, b);
      const Eigen::VectorXd expect = stats.transform(pool.eps.col(static_cast<Eigen::Index>(sorted.front().second)), 0);
      bad += !(v.point - expect).isZero(0.0);
    }
    out.push_back({"virtual_p1_argmin", bad == 0, std::to_string(bad) + " mismatches"});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files.

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ArgumentError("cannot write '" + p.string() + "'");
  out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string records_csv(std::span<const EvalRecord> recs) {
  std::ostringstream os;
  write_csv(os, recs);
  return os.str();
}

inline std::string log_jsonl(std::span<const LogRecord> log) {
  std::string s;
  for (const auto& r : log) s += to_json_line(r).dump() + "\n";
  return s;
}

inline std::string dataset_csv(const Dataset& d) {
  std::ostringstream os;
  os << std::setprecision(17);
  const std::size_t p = d.dim();
  for (std::size_t j = 0; j < p; ++j) os << (j ? "," : "") << "x" << j;
  os << (d.y.empty() ? "" : ",y") << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < p; ++j) os << (j ? "," : "") << d.x.at(i, j);
    if (!d.y.empty()) os << ',' << d.y[i];
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Command line.

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Continuously adaptive OOD detection lab", "caood"};
  app.require_subcommand(1, 1);
  std::string config_path, out_dir, baseline, checkpoint;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)");
    sub->add_option("--seed", seed, "experiment seed (overrides the config)");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--baseline", baseline, "direct | simple_adaptive | domain_adaptation | mol");
    sub->add_flag("--quiet", quiet, "suppress progress output");
  };
  auto* gen = app.add_subcommand("gen", "write the stream manifest and origin data");
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  auto* adapt = app.add_subcommand("adapt", "adapt along the test stream and write results");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint without adaptation");
  auto* oracle = app.add_subcommand("oracle", "run the brute-force oracle suite");
  for (auto* s : {gen, train, adapt, eval, oracle}) add_common(s);
  for (auto* s : {adapt, eval}) s->add_option("--checkpoint", checkpoint, "checkpoint path (default OUT/checkpoint.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }
  auto log = [&](const std::string& msg) {
    if (!quiet) out << msg << "\n";
  };

  if (oracle->parsed()) {
    bool all = true;
    for (const auto& o : run_oracle_suite(seed.value_or(0))) {
      out << (o.pass ? "PASS " : "FAIL ") << o.name << " (" << o.detail << ")\n";
      all = all && o.pass;
    }
    return all ? 0 : 1;
  }

  ExperimentConfig cfg;
  std::string phase = "config";
  try {
    if (!config_path.empty()) cfg = load_config(config_path);
    if (seed) cfg = cfg.with_seed(*seed);
    if (!baseline.empty()) cfg.baseline = baseline_from_name(baseline);
    if (!out_dir.empty()) cfg.out = out_dir;
    cfg.validate();
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }
  const std::filesystem::path dir(cfg.out);
  const std::filesystem::path ckpt = checkpoint.empty() ? dir / "checkpoint.json" : std::filesystem::path(checkpoint);
  using clock = std::chrono::steady_clock;
  auto secs = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };

  try {
    std::filesystem::create_directories(dir);
    phase = "gen";
    auto t0 = clock::now();
    const SyntheticBenchmark bench = make_synthetic_caood(cfg.synthetic);
    auto t1 = clock::now();
    std::map<std::string, double> seconds{{"gen", secs(t0, t1)}};

    if (gen->parsed()) {
      write_text(dir / "manifest.json", stream_manifest(bench).dump(2) + "\n");
      write_text(dir / "origin.csv", dataset_csv(bench.origin));
      log("wrote " + (dir / "manifest.json").string());
      return 0;
    }
    if (train->parsed()) {
      phase = "train";
      TrainedState s = train_phase(cfg, bench);
      auto t2 = clock::now();
      seconds["train"] = secs(t1, t2);
      const std::string text = serialize_checkpoint(s.model, s.optimizers, baseline_name(cfg.baseline), config_hash(cfg));
      write_text(ckpt, text);
      if (!s.log.empty()) write_text(dir / "train_log.jsonl", log_jsonl(s.log));
      write_text(dir / "train_manifest.json", run_manifest(cfg, {}, seconds, ckpt.string()).dump(2) + "\n");
      log("wrote " + ckpt.string() + " checksum " + hex64(fnv1a(text)));
      if (s.monitor.violations) {
        err << "train: " << s.monitor.violations << " group-update violations\n";
        return 1;
      }
      return 0;
    }
    phase = "load";
    if (!std::filesystem::exists(ckpt)) {
      err << "error: checkpoint '" << ckpt.string() << "' not found; run `train` first\n";
      return 2;
    }
    LoadedCheckpoint loaded = load_checkpoint(ckpt.string());
    if (loaded.config_hash != config_hash(cfg)) {
      err << "error: checkpoint was trained with a different config (hash " << loaded.config_hash << ")\n";
      return 2;
    }
    auto t2 = clock::now();
    seconds["load"] = secs(t1, t2);
    if (adapt->parsed()) {
      phase = "adapt";
      const TestResult r = adapt_phase(cfg, bench, loaded.model);
      auto t3 = clock::now();
      seconds["adapt"] = secs(t2, t3);
      write_text(dir / "results.csv", records_csv(r.records));
      write_text(dir / "run_manifest.json", run_manifest(cfg, r.records, seconds, ckpt.string()).dump(2) + "\n");
      const Summary sm = summarize(r.records);
      log("mean id_acc " + std::to_string(sm.id_acc) + " auroc " + std::to_string(sm.auroc));
      if (r.monitor.violations) {
        err << "adapt: " << r.monitor.violations << " group-update violations\n";
        return 1;
      }
      return 0;
    }
    if (eval->parsed()) {
      phase = "eval";
      std::vector<EvalRecord> recs;
      for (const auto& step : bench.test) recs.push_back(evaluate_step(loaded.model, step, cfg.score, bench.origin));
      write_text(dir / "eval.csv", records_csv(recs));
      const Summary sm = summarize(recs);
      log("mean id_acc " + std::to_string(sm.id_acc) + " auroc " + std::to_string(sm.auroc));
      return 0;
    }
  } catch (const NumericError& e) {
    err << phase << ": numeric failure: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    err << phase << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << phase << ": " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace caood
