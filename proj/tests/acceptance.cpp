// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

// One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

#include "caood/harness.hpp"

namespace {

using namespace caood;
using clock_type = std::chrono::steady_clock;

int failures = 0;

void report(const std::string& id, bool pass, const std::string& detail) {
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", id.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. Gradient checks.

Tensor uniform(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
               double avoid = 0.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) {
    do v = u(rng);
    while (std::abs(v) < avoid);
  }
  return t;
}

void criterion_gradients() {
  using Fn = std::function<Tensor(std::span<Tensor>)>;
  struct Case {
    std::string name;
    std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
    Fn fn;
  };
  const std::vector<int> labels{2, 0, 1, 2};
  std::vector<Case> cases{
      {"add", [](auto& r) { return std::vector{uniform({3, 4}, r), uniform({4}, r)}; },
       [](std::span<Tensor> v) { return sum(mul(add(v[0], v[1]), v[0])); }},
      {"sub", [](auto& r) { return std::vector{uniform({3, 4}, r), uniform({3, 4}, r)}; },
       [](std::span<Tensor> v) { return sum(mul(sub(v[0], v[1]), v[1])); }},
      {"mul", [](auto& r) { return std::vector{uniform({2, 5}, r), uniform({2, 5}, r)}; },
       [](std::span<Tensor> v) { return sum(mul(v[0], v[1])); }},
      {"scale", [](auto& r) { return std::vector{uniform({4, 3}, r)}; },
       [](std::span<Tensor> v) { return sum(mul(scale(v[0], -1.7), v[0])); }},
      {"relu", [](auto& r) { return std::vector{uniform({4, 4}, r, -2, 2, 1e-3)}; },
       [](std::span<Tensor> v) { return sum(mul(relu(v[0]), v[0])); }},
      {"exp", [](auto& r) { return std::vector{uniform({3, 3}, r)}; },
       [](std::span<Tensor> v) { return sum(exp(v[0])); }},
      {"log", [](auto& r) { return std::vector{uniform({3, 3}, r, 0.2, 2.0)}; },
       [](std::span<Tensor> v) { return sum(mul(log(v[0]), v[0])); }},
      {"softplus", [](auto& r) { return std::vector{uniform({3, 4}, r)}; },
       [](std::span<Tensor> v) { return sum(mul(softplus(v[0]), v[0])); }},
      {"matmul", [](auto& r) { return std::vector{uniform({3, 4}, r), uniform({4, 2}, r)}; },
       [](std::span<Tensor> v) { return sum(mul(matmul(v[0], v[1]), matmul(v[0], v[1]))); }},
      {"transpose", [](auto& r) { return std::vector{uniform({3, 2}, r)}; },
       [](std::span<Tensor> v) { return sum(matmul(transpose(v[0]), v[0])); }},
      {"sq_distances", [](auto& r) { return std::vector{uniform({3, 2}, r), uniform({4, 2}, r)}; },
       [](std::span<Tensor> v) { return sum(exp(scale(sq_distances(v[0], v[1]), -0.3))); }},
      {"mean_axis", [](auto& r) { return std::vector{uniform({4, 3}, r)}; },
       [](std::span<Tensor> v) { return sum(mul(sum(v[0], 0), mean(v[0]))); }},
      {"logsumexp", [](auto& r) { return std::vector{uniform({4, 5}, r)}; },
       [](std::span<Tensor> v) { return sum(mul(logsumexp(v[0], 1), logsumexp(v[0], 1))); }},
      {"gather_concat", [](auto& r) { return std::vector{uniform({4, 2}, r), uniform({2, 2}, r)}; },
       [](std::span<Tensor> v) {
         const std::vector<std::size_t> rows{3, 0, 3};
         const std::vector<Tensor> parts{gather_rows(v[0], rows), v[1]};
         return sum(mul(concat_rows(parts), concat_rows(parts)));
       }},
      {"maximum", [](auto& r) { return std::vector{uniform({2, 2}, r), uniform({3}, r)}; },
       [](std::span<Tensor> v) {
         const std::vector<Tensor> parts{sum(mul(v[0], v[0])), sum(exp(v[1]))};
         return maximum(parts);
       }},
      {"cross_entropy", [](auto& r) { return std::vector{uniform({4, 3}, r)}; },
       [&](std::span<Tensor> v) { return cross_entropy(v[0], labels); }},
      {"energy_softplus",
       [](auto& r) { return std::vector{uniform({5, 4}, r)}; },
       [](std::span<Tensor> v) {
         return add(mean(softplus(energy_score(v[0]))), mean(softplus(neg(energy_score(v[0])))));
       }},
  };

  const auto t0 = clock_type::now();
  double worst = 0.0;
  std::string worst_name = "-";
  std::size_t checks = 0;
  for (const auto& c : cases) {
    std::mt19937_64 rng(std::hash<std::string>{}(c.name) & 0xffff);
    for (int k = 0; k < 50; ++k) {
      const auto r = gradient_check(c.fn, c.inputs(rng), 1e-5);
      ++checks;
      if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = c.name;
    }
  }
  {  // mmd2 with bandwidths held fixed; the median rule is not differentiated
    std::mt19937_64 rng(99);
    for (int k = 0; k < 50; ++k) {
      const Tensor x = uniform({5, 3}, rng), y = uniform({4, 3}, rng);
      const KernelBank bank = median_bank(x, y);
      const auto r = gradient_check([&](std::span<Tensor> v) { return mmd2(v[0], v[1], bank); }, {x, y}, 1e-5);
      ++checks;
      if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = "mmd2";
    }
  }
  const double secs = seconds_since(t0);
  report("1 gradient checks", worst < 1e-4 && secs < 30.0,
         std::to_string(checks) + " checks, max rel err " + fmt("%.2e", worst) + " (" + worst_name + "), " +
             fmt("%.1f s", secs));
}

// ---------------------------------------------------------------------------
// 2. Oracles.

void criterion_oracles() {
  bool all = true;
  std::string detail;
  for (const auto& o : run_oracle_suite(20261014)) {
    all = all && o.pass;
    detail += (detail.empty() ? "" : "; ") + o.name + (o.pass ? " ok" : " FAILED") + " (" + o.detail + ")";
  }
  report("2 metric oracles", all, detail);
}

// ---------------------------------------------------------------------------
// 3. Closed forms.

void criterion_closed_forms() {
  ModelConfig mc;
  mc.feat_dim = 8;
  mc.extractor_widths = {8};
  mc.adapter_widths = {8};
  PartitionedModel m(mc);
  m.zero_group(Group::Classifier);
  std::mt19937_64 rng(3);
  const Tensor x = uniform({16, 2}, rng);
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3};
  Tape::Pause pause;
  const double ce = cross_entropy(m.forward(x), y).item();
  const double ce_err = std::abs(ce - std::log(4.0));
  for (auto& p : m.group(Group::Classifier))
    if (p.value.rank() == 1)
      for (double& v : p.value.data()) v = -std::log(4.0);
  std::vector<Tensor> virt{uniform({3, 8}, rng), uniform({3, 8}, rng), uniform({3, 8}, rng), uniform({3, 8}, rng)};
  const double ood = loss_uncertainty(m, virt, m.forward(x)).item();
  const double ood_err = std::abs(ood - 2 * std::numbers::ln2);
  double shift_err = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Tensor lo = uniform({6, 5}, rng, -5, 5);
    const double c = std::uniform_real_distribution<double>(-10, 10)(rng);
    const Tensor a = energy_score(lo), b = energy_score(add_scalar(lo, c));
    for (std::size_t i = 0; i < a.numel(); ++i) shift_err = std::max(shift_err, std::abs(b.at(i) - a.at(i) - c));
  }
  report("3 closed forms", ce_err < 1e-9 && ood_err < 1e-9 && shift_err < 1e-9,
         fmt("|L_ce - ln C| = %.1e, |L_ood - 2 ln 2| = %.1e, energy shift err = %.1e", ce_err, ood_err, shift_err));
}

// ---------------------------------------------------------------------------
// 4-8. Synthetic benchmark experiments.

std::filesystem::path config_path() { return std::filesystem::path(CAOOD_SOURCE_DIR) / "configs" / "synthetic.json"; }

struct MethodStats {
  std::vector<Summary> runs;
  double seconds = 0.0;
  std::size_t violations = 0;
  double mean_of(double Summary::*f) const {
    double s = 0.0;
    for (const auto& r : runs) s += r.*f;
    return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
  }
};

MethodStats run_method(const ExperimentConfig& base, Baseline b, double lambda, int seeds) {
  MethodStats m;
  const auto t0 = clock_type::now();
  for (int s = 0; s < seeds; ++s) {
    ExperimentConfig c = base.with_seed(static_cast<std::uint64_t>(s));
    c.baseline = b;
    if (lambda >= 0.0) c.meta.lambda = lambda;
    const ExperimentResult r = run_experiment(c);
    m.runs.push_back(summarize(r.records));
    m.violations += r.train_monitor.violations + r.test_monitor.violations;
  }
  m.seconds = seconds_since(t0);
  return m;
}

std::string per_seed(const MethodStats& m) {
  std::string s;
  for (const auto& r : m.runs) s += fmt(" %.3f", r.id_acc);
  return s;
}

void criteria_benchmark() {
  const ExperimentConfig base = load_config(config_path().string());
  constexpr int kSeeds = 5;
  const MethodStats direct = run_method(base, Baseline::Direct, -1, kSeeds);
  const MethodStats sa = run_method(base, Baseline::SimpleAdaptive, -1, kSeeds);
  const MethodStats mol = run_method(base, Baseline::Mol, -1, kSeeds);
  const MethodStats nood = run_method(base, Baseline::Mol, 0.0, kSeeds);

  std::printf("  direct          acc %.4f auroc %.4f slope %+.5f  per-seed acc%s\n", direct.mean_of(&Summary::id_acc),
              direct.mean_of(&Summary::auroc), direct.mean_of(&Summary::auroc_slope), per_seed(direct).c_str());
  std::printf("  simple_adaptive acc %.4f auroc %.4f slope %+.5f  per-seed acc%s\n", sa.mean_of(&Summary::id_acc),
              sa.mean_of(&Summary::auroc), sa.mean_of(&Summary::auroc_slope), per_seed(sa).c_str());
  std::printf("  mol             acc %.4f auroc %.4f slope %+.5f  per-seed acc%s\n", mol.mean_of(&Summary::id_acc),
              mol.mean_of(&Summary::auroc), mol.mean_of(&Summary::auroc_slope), per_seed(mol).c_str());
  std::printf("  mol (no L_ood)  acc %.4f auroc %.4f slope %+.5f  per-seed acc%s\n", nood.mean_of(&Summary::id_acc),
              nood.mean_of(&Summary::auroc), nood.mean_of(&Summary::auroc_slope), per_seed(nood).c_str());

  const std::size_t violations = direct.violations + sa.violations + mol.violations + nood.violations;
  report("4 group discipline", violations == 0, std::to_string(violations) + " violations over all runs");

  const double d_acc = direct.mean_of(&Summary::id_acc), d_au = direct.mean_of(&Summary::auroc);
  const double s_acc = sa.mean_of(&Summary::id_acc);
  const double m_acc = mol.mean_of(&Summary::id_acc), m_au = mol.mean_of(&Summary::auroc);
  const double secs = direct.seconds + sa.seconds + mol.seconds;
  const bool a = m_acc - d_acc >= 0.10, b = m_au - d_au >= 0.05;
  const bool c = s_acc >= std::min(d_acc, m_acc) && s_acc <= std::max(d_acc, m_acc);
  report("5a MOL accuracy >= Direct + 10 pts", a, fmt("%.4f vs %.4f (delta %+.4f)", m_acc, d_acc, m_acc - d_acc));
  report("5b MOL AUROC >= Direct + 5 pts", b, fmt("%.4f vs %.4f (delta %+.4f)", m_au, d_au, m_au - d_au));
  report("5c Simple Adaptive accuracy between Direct and MOL", c, fmt("%.4f in [%.4f, %.4f]?", s_acc, d_acc, m_acc));
  report("5d runtime < 5 min", secs < 300.0, fmt("%.1f s for 3 methods x 5 seeds", secs));

  const double n_acc = nood.mean_of(&Summary::id_acc), n_au = nood.mean_of(&Summary::auroc);
  report("6a no-L_ood AUROC strictly lower", n_au < m_au, fmt("%.4f vs %.4f", n_au, m_au));
  report("6b no-L_ood |delta accuracy| < 3 pts", std::abs(n_acc - m_acc) < 0.03,
         fmt("%.4f vs %.4f (delta %+.4f)", n_acc, m_acc, n_acc - m_acc));

  const double m_slope = mol.mean_of(&Summary::auroc_slope), d_slope = direct.mean_of(&Summary::auroc_slope);
  report("7 MOL AUROC slope > Direct slope", m_slope > d_slope, fmt("%+.6f vs %+.6f per degree", m_slope, d_slope));
}

void criterion_determinism() {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "caood_acceptance_det";
  fs::remove_all(root);
  std::string csv[2], ckpt[2];
  bool ok = true;
  for (int k = 0; k < 2; ++k) {
    const std::string out = (root / ("run" + std::to_string(k))).string();
    const std::string cfg = config_path().string();
    for (const char* cmd : {"train", "adapt"}) {
      const char* argv[] = {"caood", cmd, "--config", cfg.c_str(), "--out", out.c_str(), "--quiet"};
      std::ostringstream o, e;
      if (run_cli(7, argv, o, e) != 0) {
        ok = false;
        std::printf("  %s failed: %s\n", cmd, e.str().c_str());
      }
    }
    if (!ok) break;
    csv[k] = read_text(fs::path(out) / "results.csv");
    ckpt[k] = read_text(fs::path(out) / "checkpoint.json");
  }
  fs::remove_all(root);
  const bool same = ok && csv[0] == csv[1] && ckpt[0] == ckpt[1];
  report("8 byte-identical reruns", same,
         ok ? std::string("results.csv ") + (csv[0] == csv[1] ? "identical" : "DIFFERS") + ", checkpoint.json " +
                  (ckpt[0] == ckpt[1] ? "identical" : "DIFFERS") + fmt(" (%.0f bytes)", double(ckpt[0].size()))
            : "a run failed");
}

// ---------------------------------------------------------------------------
// 9. Continuity.

void criterion_continuity() {
  SyntheticConfig sc = load_config(config_path().string()).synthetic;
  std::size_t ok = 0;
  double worst_ratio = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    sc.seed = seed;
    std::mt19937_64 rng(detail::mix_seed(seed, 0xc0));
    const Dataset base = draw_clusters(sc, 400, false, rng);
    const auto grid = default_test_angles();
    const auto rep = validate_continuity(make_rotation_stream(base, grid, sc.adapt_per_t), 1.0);
    const std::vector<Dataset> jump{rotate_dataset(base, grid.front() - 90.0), rotate_dataset(base, grid.front())};
    const double big = validate_continuity(jump, 1.0).max;
    ok += rep.max < big;
    worst_ratio = std::max(worst_ratio, rep.max / big);
  }
  report("9 continuity on the 6 degree grid", ok == 10,
         std::to_string(ok) + "/10 seeds below the 90 degree jump, worst ratio " + fmt("%.4f", worst_ratio));
}

}  // namespace

int main() {
  const auto t0 = clock_type::now();
  criterion_gradients();
  criterion_oracles();
  criterion_closed_forms();
  criteria_benchmark();
  criterion_determinism();
  criterion_continuity();
  std::printf("%d failing criteria, %.1f s total\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
