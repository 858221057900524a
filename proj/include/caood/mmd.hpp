// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

// Multi-kernel maximum mean discrepancy with a geometric RBF bank.

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "caood/autodiff.hpp"

namespace caood {

struct KernelBank {
  std::vector<double> sigmas;
  std::vector<double> weights;
  std::string rule = "explicit";

  static KernelBank single(double sigma) { return explicit_bank({sigma}); }

  // Uniform weights over the given bandwidths.
  static KernelBank explicit_bank(std::vector<double> sigmas) {
    KernelBank b;
    const std::size_t m = sigmas.size();
    b.sigmas = std::move(sigmas);
    b.weights.assign(m, m ? 1.0 / static_cast<double>(m) : 0.0);
    b.validate();
    return b;
  }

  // sigma0 * 2^j for j = -2..2.
  static KernelBank geometric(double sigma0) {
    KernelBank b = explicit_bank({sigma0 / 4.0, sigma0 / 2.0, sigma0, sigma0 * 2.0, sigma0 * 4.0});
    b.rule = "median*2^[-2..2]";
    return b;
  }

  void validate() const {
    if (sigmas.empty()) throw ArgumentError("kernel bank: no bandwidths");
    if (weights.size() != sigmas.size()) throw ArgumentError("kernel bank: weight count differs from bandwidth count");
    double total = 0.0;
    for (std::size_t k = 0; k < sigmas.size(); ++k) {
      if (!(sigmas[k] > 0.0) || !std::isfinite(sigmas[k])) {
        throw ArgumentError("kernel bank: bandwidth " + std::to_string(sigmas[k]) + " is not positive");
      }
      total += weights[k];
    }
    if (std::abs(total - 1.0) > 1e-12) throw ArgumentError("kernel bank: weights do not sum to 1");
  }
};

namespace detail {

inline void require_samples(const Tensor& x, const Tensor& y, const char* op) {
  if (x.rank() != 2 || y.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected matrices, got " + shape_str(x.shape()) + " and " +
                         shape_str(y.shape()));
  }
  if (x.rows() == 0 || y.rows() == 0) throw ArgumentError(std::string(op) + ": empty sample set");
  if (x.cols() != y.cols()) {
    throw DimensionError(std::string(op) + ": feature extents disagree, " + shape_str(x.shape()) + " vs " +
                         shape_str(y.shape()));
  }
}

// Total order on sample sets used to fix the operand order of the cross term.
inline bool canonical_less(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) return a.rows() < b.rows();
  return std::lexicographical_compare(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
}

// sum_k w_k * mean_ij exp(-D_ij / (2 sigma_k^2))
inline Tensor kernel_mean(const Tensor& dist, const KernelBank& bank) {
  const std::size_t count = dist.numel();
  std::vector<double> inv(bank.sigmas.size());
  for (std::size_t k = 0; k < inv.size(); ++k) inv[k] = 1.0 / (2.0 * bank.sigmas[k] * bank.sigmas[k]);
  double total = 0.0;
  for (std::size_t k = 0; k < inv.size(); ++k) {
    double s = 0.0;
    for (double d : dist.data()) s += std::exp(-d * inv[k]);
    total += bank.weights[k] * s / static_cast<double>(count);
  }
  Tensor out = Tensor::scalar(total);
  if (Tape* tape = recorder({&dist})) {
    out.set_requires_grad();
    std::vector<double> w = bank.weights;
    tape->record([dist, out, inv, w, count]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(count);
      auto d = dist.data();
      auto gd = dist.mutable_grad();
      for (std::size_t i = 0; i < d.size(); ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < inv.size(); ++k) acc -= w[k] * inv[k] * std::exp(-d[i] * inv[k]);
        gd[i] += g * acc;
      }
    });
  }
  return out;
}

}  // namespace detail

// sigma0 with sigma0^2 = median pairwise squared distance of the pooled set / 2.
// Falls back to 1 when every pooled point coincides.
inline double median_heuristic(const Tensor& x, const Tensor& y) {
  detail::require_samples(x, y, "median_heuristic");
  const std::size_t n = x.rows() + y.rows(), d = x.cols();
  if (n < 2) throw ArgumentError("median_heuristic: need at least two pooled points");
  auto row = [&](std::size_t i) { return i < x.rows() ? &x.data()[i * d] : &y.data()[(i - x.rows()) * d]; };
  std::vector<double> sq;
  sq.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double* a = row(i);
      const double* b = row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
      sq.push_back(acc);
    }
  std::sort(sq.begin(), sq.end());
  const std::size_t m = sq.size();
  const double median = m % 2 ? sq[m / 2] : 0.5 * (sq[m / 2 - 1] + sq[m / 2]);
  if (!(median > 0.0)) return 1.0;
  return std::sqrt(median / 2.0);
}

inline KernelBank median_bank(const Tensor& x, const Tensor& y) {
  return KernelBank::geometric(median_heuristic(x, y));
}

// Biased V-statistic sum_k w_k [mean Kxx + mean Kyy - 2 mean Kxy] before clamping.
inline Tensor mmd2_unclamped(const Tensor& x, const Tensor& y, const KernelBank& bank) {
  detail::require_samples(x, y, "mmd2");
  bank.validate();
  const Tensor kxx = detail::kernel_mean(sq_distances(x, x), bank);
  const Tensor kyy = detail::kernel_mean(sq_distances(y, y), bank);
  const bool flip = detail::canonical_less(y, x);
  const Tensor kxy = flip ? detail::kernel_mean(sq_distances(y, x), bank)
                          : detail::kernel_mean(sq_distances(x, y), bank);
  return sub(add(kxx, kyy), scale(kxy, 2.0));
}

inline Tensor mmd2(const Tensor& x, const Tensor& y, const KernelBank& bank) {
  return clamp_min(mmd2_unclamped(x, y, bank), 0.0);
}

// Bandwidths from the median heuristic on the current values (no gradient).
inline Tensor mmd2(const Tensor& x, const Tensor& y) { return mmd2(x, y, median_bank(x, y)); }

inline double mmd2_value(const Tensor& x, const Tensor& y, const KernelBank& bank) {
  Tape::Pause pause;
  return mmd2(x, y, bank).item();
}

inline double mmd2_value(const Tensor& x, const Tensor& y) {
  Tape::Pause pause;
  return mmd2(x, y).item();
}

}  // namespace caood
