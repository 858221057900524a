// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

// Scores, the thresholded detector and ranking metrics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "caood/autodiff.hpp"
#include "caood/virtual_ood.hpp"

namespace caood {

enum class ScoreKind { Energy, Msp, Mahalanobis };

inline const char* score_kind_name(ScoreKind k) {
  switch (k) {
    case ScoreKind::Energy:
      return "energy";
    case ScoreKind::Msp:
      return "msp";
    case ScoreKind::Mahalanobis:
      return "mahalanobis";
  }
  return "?";
}

inline ScoreKind score_kind_from_name(const std::string& s) {
  if (s == "energy") return ScoreKind::Energy;
  if (s == "msp") return ScoreKind::Msp;
  if (s == "mahalanobis") return ScoreKind::Mahalanobis;
  throw ArgumentError("unknown score kind '" + s + "'");
}

// Per-row logsumexp of the logits. Differentiable.
inline Tensor energy_score(const Tensor& logits) {
  detail::require_matrix(logits, "energy_score");
  return logsumexp(logits, 1);
}

inline Tensor msp_score(const Tensor& logits) {
  detail::require_matrix(logits, "msp_score");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (c == 0) throw DimensionError("msp_score: no classes");
  std::vector<double> out(n);
  auto z = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &z[i * c];
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    out[i] = 1.0 / s;
  }
  return Tensor::vector(std::move(out));
}

// -min_c (z - mu_c)^T Sigma^{-1} (z - mu_c)
inline Tensor mahalanobis_score(const Tensor& features, const GaussianStats& stats) {
  detail::require_matrix(features, "mahalanobis_score");
  const std::size_t n = features.rows(), d = features.cols();
  if (d != stats.dim()) throw DimensionError("mahalanobis_score: feature extent differs from the statistics");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::VectorXd z = Eigen::Map<const Eigen::VectorXd>(&features.data()[i * d], static_cast<Eigen::Index>(d));
    double best = stats.mahalanobis_sq(z, 0);
    for (std::size_t c = 1; c < stats.num_classes(); ++c) best = std::min(best, stats.mahalanobis_sq(z, c));
    out[i] = -best;
  }
  return Tensor::vector(std::move(out));
}

// The ceil(0.05 n)-th smallest score, so that at least 95% of the ID scores
// satisfy s >= gamma.
inline double select_threshold(std::span<const double> id_scores) {
  const std::size_t n = id_scores.size();
  if (n < 20) throw ArgumentError("select_threshold: need at least 20 ID scores, got " + std::to_string(n));
  const std::size_t k = (5 * n + 99) / 100;
  std::vector<double> s(id_scores.begin(), id_scores.end());
  std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k - 1), s.end());
  return s[k - 1];
}

struct Detector {
  ScoreKind kind = ScoreKind::Energy;
  double gamma = 0.0;

  // Ties go to ID.
  bool is_id(double score) const noexcept { return score >= gamma; }
};

inline Detector calibrate_detector(ScoreKind kind, std::span<const double> id_scores) {
  return {kind, select_threshold(id_scores)};
}

namespace detail {

inline void require_both(std::span<const double> id, std::span<const double> ood, const char* op) {
  if (id.empty() || ood.empty()) throw ArgumentError(std::string(op) + ": both score sets must be nonempty");
}

}  // namespace detail

// P(id > ood) + 1/2 P(id == ood), from a merge over sorted scores.
inline double auroc(std::span<const double> id, std::span<const double> ood) {
  detail::require_both(id, ood, "auroc");
  std::vector<double> a(id.begin(), id.end()), b(ood.begin(), ood.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // twice the Mann-Whitney statistic, an exact integer
  std::uint64_t twice_u = 0;
  std::size_t below = 0, upto = 0;
  for (double v : a) {
    while (below < b.size() && b[below] < v) ++below;
    if (upto < below) upto = below;
    while (upto < b.size() && b[upto] <= v) ++upto;
    twice_u += 2 * below + (upto - below);
  }
  return static_cast<double>(twice_u) / static_cast<double>(2 * a.size() * b.size());
}

// Average precision with ID as the positive class: sum over distinct score
// levels, taken high to low, of (recall gain) * precision.
inline double aupr(std::span<const double> id, std::span<const double> ood) {
  detail::require_both(id, ood, "aupr");
  std::vector<std::pair<double, bool>> all;
  all.reserve(id.size() + ood.size());
  for (double v : id) all.emplace_back(v, true);
  for (double v : ood) all.emplace_back(v, false);
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
  const double positives = static_cast<double>(id.size());
  std::size_t tp = 0, fp = 0;
  double ap = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    const std::size_t tp_before = tp;
    std::size_t j = i;
    for (; j < all.size() && all[j].first == all[i].first; ++j) (all[j].second ? tp : fp) += 1;
    if (tp > tp_before) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      ap += static_cast<double>(tp - tp_before) / positives * precision;
    }
    i = j;
  }
  return ap;
}

// Fraction of OOD scores at or above the 95%-TPR threshold.
inline double fpr_at_95tpr(std::span<const double> id, std::span<const double> ood) {
  detail::require_both(id, ood, "fpr_at_95tpr");
  const double gamma = select_threshold(id);
  const auto hits = std::count_if(ood.begin(), ood.end(), [&](double v) { return v >= gamma; });
  return static_cast<double>(hits) / static_cast<double>(ood.size());
}

struct EvalRecord {
  double t = 0.0;
  double id_acc = 0.0;
  double auroc = 0.0;
  double aupr = 0.0;
  double fpr95 = 0.0;
  double gamma = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
};

inline constexpr const char* kEvalCsvHeader = "t,id_acc,auroc,aupr,fpr95,gamma,n_id,n_ood";

inline std::string to_csv_row(const EvalRecord& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << r.t << ',' << r.id_acc << ',' << r.auroc << ',' << r.aupr << ','
     << r.fpr95 << ',' << r.gamma << ',' << r.n_id << ',' << r.n_ood;
  return os.str();
}

inline void write_csv(std::ostream& os, std::span<const EvalRecord> records) {
  os << kEvalCsvHeader << '\n';
  for (const auto& r : records) os << to_csv_row(r) << '\n';
}

// Scores a labeled ID set and an OOD set; gamma comes from a separate ID
// calibration set.
inline EvalRecord evaluate_scores(double t, std::span<const double> calib_id, std::span<const double> id,
                                  std::span<const double> ood, std::size_t correct) {
  if (id.empty()) throw ArgumentError("evaluate: no ID samples");
  EvalRecord r;
  r.t = t;
  r.gamma = select_threshold(calib_id);
  r.id_acc = static_cast<double>(correct) / static_cast<double>(id.size());
  r.auroc = auroc(id, ood);
  r.aupr = aupr(id, ood);
  r.fpr95 = static_cast<double>(std::count_if(ood.begin(), ood.end(), [&](double v) { return v >= r.gamma; })) /
            static_cast<double>(ood.size());
  r.n_id = id.size();
  r.n_ood = ood.size();
  return r;
}

// Counts rows whose arg-max matches the label.
inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  detail::require_matrix(logits, "count_correct");
  const std::size_t c = logits.cols();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = &logits.data()[i * c];
    const auto pred = static_cast<int>(std::max_element(row, row + c) - row);
    hits += pred == labels[i];
  }
  return hits;
}

}  // namespace caood
