// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

// Class-conditional Gaussian estimation over FIFO feature queues and
// low-likelihood virtual outlier sampling.

#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "caood/autodiff.hpp"

namespace caood {

inline constexpr std::size_t kDefaultQueueCapacity = 500;
inline constexpr std::size_t kDefaultPoolSize = 1000;

// One FIFO ring of feature vectors per class.
class ClassQueues {
 public:
  ClassQueues(std::size_t num_classes, std::size_t dim, std::size_t capacity = kDefaultQueueCapacity)
      : dim_(dim), capacity_(capacity), queues_(num_classes) {
    if (num_classes == 0 || dim == 0 || capacity == 0) throw ArgumentError("class queues: extents must be >= 1");
  }

  std::size_t num_classes() const noexcept { return queues_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size(std::size_t c) const { return queues_.at(c).size(); }
  const std::deque<std::vector<double>>& queue(std::size_t c) const { return queues_.at(c); }

  void push(std::size_t c, std::span<const double> z) {
    if (c >= queues_.size()) throw IndexError("class queues: class " + std::to_string(c) + " out of range");
    if (z.size() != dim_) throw DimensionError("class queues: feature has wrong extent");
    auto& q = queues_[c];
    if (q.size() == capacity_) q.pop_front();
    q.emplace_back(z.begin(), z.end());
  }

  // Appends every row of `features` to the queue of its label, in row order.
  void update(const Tensor& features, std::span<const int> labels) {
    if (features.rank() != 2 || features.cols() != dim_) {
      throw DimensionError("class queues: expected [n x " + std::to_string(dim_) + "] features, got " +
                           shape_str(features.shape()));
    }
    if (labels.size() != features.rows()) throw DimensionError("class queues: label count differs from rows");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= queues_.size()) {
        throw IndexError("class queues: label " + std::to_string(y) + " out of range");
      }
    auto data = features.data();
    for (std::size_t i = 0; i < labels.size(); ++i)
      push(static_cast<std::size_t>(labels[i]), data.subspan(i * dim_, dim_));
  }

  void clear() {
    for (auto& q : queues_) q.clear();
  }

 private:
  std::size_t dim_;
  std::size_t capacity_;
  std::vector<std::deque<std::vector<double>>> queues_;
};

// Per-class means with one pooled covariance, plus the Cholesky factor of the
// ridged covariance used for sampling and scoring.
class GaussianStats {
 public:
  GaussianStats(std::vector<Eigen::VectorXd> means, std::vector<std::size_t> counts, Eigen::MatrixXd covariance)
      : means_(std::move(means)), counts_(std::move(counts)), covariance_(std::move(covariance)) {
    const auto d = static_cast<double>(covariance_.rows());
    // The floor keeps a fully degenerate estimate (zero trace) invertible.
    ridge_ = std::max(1e-4 * covariance_.trace() / d, 1e-10);
    const Eigen::MatrixXd ridged =
        covariance_ + ridge_ * Eigen::MatrixXd::Identity(covariance_.rows(), covariance_.cols());
    llt_.compute(ridged);
    if (llt_.info() != Eigen::Success) throw NumericError("gaussian stats: Cholesky failed after ridge");
    const Eigen::MatrixXd l = llt_.matrixL();
    log_det_ = 0.0;
    for (Eigen::Index i = 0; i < l.rows(); ++i) {
      if (!(l(i, i) > 0.0)) throw NumericError("gaussian stats: covariance is singular after ridge");
      log_det_ += 2.0 * std::log(l(i, i));
    }
  }

  std::size_t num_classes() const noexcept { return means_.size(); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(covariance_.rows()); }
  const Eigen::VectorXd& mean(std::size_t c) const { return means_.at(c); }
  std::size_t count(std::size_t c) const { return counts_.at(c); }
  // Pooled covariance before the ridge.
  const Eigen::MatrixXd& covariance() const noexcept { return covariance_; }
  double ridge() const noexcept { return ridge_; }
  double log_det() const noexcept { return log_det_; }
  Eigen::MatrixXd cholesky_factor() const { return llt_.matrixL(); }

  // (z - mu_c)^T (Sigma + ridge I)^{-1} (z - mu_c)
  double mahalanobis_sq(const Eigen::VectorXd& z, std::size_t c) const {
    const Eigen::VectorXd u = llt_.matrixL().solve(z - means_.at(c));
    return u.squaredNorm();
  }

  double log_density_from_quadratic(double q) const {
    return -0.5 * (static_cast<double>(dim()) * std::log(2.0 * std::numbers::pi) + log_det_ + q);
  }

  double log_density(const Eigen::VectorXd& z, std::size_t c) const {
    return log_density_from_quadratic(mahalanobis_sq(z, c));
  }

  // Samples mu_c + L eps.
  Eigen::VectorXd transform(const Eigen::VectorXd& eps, std::size_t c) const {
    return means_.at(c) + llt_.matrixL() * eps;
  }

 private:
  std::vector<Eigen::VectorXd> means_;
  std::vector<std::size_t> counts_;
  Eigen::MatrixXd covariance_;
  double ridge_ = 0.0;
  double log_det_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

namespace detail {

inline GaussianStats pooled_stats(const std::vector<std::vector<const double*>>& by_class, std::size_t d) {
  std::vector<Eigen::VectorXd> means;
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) throw StateError("estimate_stats: class " + std::to_string(c) + " has no samples");
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (const double* z : by_class[c]) mu += Eigen::Map<const Eigen::VectorXd>(z, static_cast<Eigen::Index>(d));
    mu /= static_cast<double>(by_class[c].size());
    means.push_back(std::move(mu));
    counts.push_back(by_class[c].size());
    total += by_class[c].size();
  }
  Eigen::MatrixXd centered(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d));
  Eigen::Index r = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c)
    for (const double* z : by_class[c])
      centered.row(r++) = (Eigen::Map<const Eigen::VectorXd>(z, static_cast<Eigen::Index>(d)) - means[c]).transpose();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(total);
  cov = 0.5 * (cov + cov.transpose());
  return GaussianStats(std::move(means), std::move(counts), std::move(cov));
}

}  // namespace detail

// mu_c = class means; Sigma = (1/n) sum_c sum_{i in c} (z_i - mu_c)(z_i - mu_c)^T.
inline GaussianStats estimate_stats(const ClassQueues& queues) {
  std::vector<std::vector<const double*>> by_class(queues.num_classes());
  for (std::size_t c = 0; c < queues.num_classes(); ++c)
    for (const auto& z : queues.queue(c)) by_class[c].push_back(z.data());
  return detail::pooled_stats(by_class, queues.dim());
}

// Same estimate computed directly from a labeled batch.
inline GaussianStats estimate_stats(const Tensor& features, std::span<const int> labels, std::size_t num_classes) {
  if (features.rank() != 2 || labels.size() != features.rows()) {
    throw DimensionError("estimate_stats: features " + shape_str(features.shape()) + " do not match labels");
  }
  const std::size_t d = features.cols();
  std::vector<std::vector<const double*>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw IndexError("estimate_stats: label " + std::to_string(labels[i]) + " out of range");
    }
    by_class[static_cast<std::size_t>(labels[i])].push_back(&features.data()[i * d]);
  }
  return detail::pooled_stats(by_class, d);
}

// A pool drawn from one class Gaussian. For z = mu + L eps the quadratic form
// equals |eps|^2, so densities come without a triangular solve.
struct SamplePool {
  std::size_t cls = 0;
  Eigen::MatrixXd eps;  // d x N standard normal draws
  std::vector<double> log_density;
};

inline SamplePool draw_pool(const GaussianStats& stats, std::size_t c, std::size_t pool_size, std::mt19937_64& rng) {
  if (c >= stats.num_classes()) throw IndexError("draw_pool: class " + std::to_string(c) + " out of range");
  if (pool_size == 0) throw ArgumentError("draw_pool: pool size must be >= 1");
  const auto d = static_cast<Eigen::Index>(stats.dim());
  std::normal_distribution<double> normal(0.0, 1.0);
  SamplePool pool;
  pool.cls = c;
  pool.eps.resize(d, static_cast<Eigen::Index>(pool_size));
  pool.log_density.resize(pool_size);
  for (Eigen::Index j = 0; j < pool.eps.cols(); ++j) {
    for (Eigen::Index i = 0; i < d; ++i) pool.eps(i, j) = normal(rng);
    pool.log_density[static_cast<std::size_t>(j)] = stats.log_density_from_quadratic(pool.eps.col(j).squaredNorm());
  }
  return pool;
}

// Index of the p-th smallest density (1-based p); ties resolve to the lower index.
inline std::size_t pth_smallest(std::span<const double> density, std::size_t p) {
  if (p < 1 || p > density.size()) {
    throw ArgumentError("pth_smallest: rank " + std::to_string(p) + " outside [1, " + std::to_string(density.size()) +
                        "]");
  }
  std::vector<std::size_t> order(density.size());
  std::iota(order.begin(), order.end(), 0);
  auto less = [&](std::size_t a, std::size_t b) { return density[a] < density[b] || (density[a] == density[b] && a < b); };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(p - 1), order.end(), less);
  return order[p - 1];
}

struct VirtualSample {
  std::size_t cls = 0;
  Eigen::VectorXd point;
  double log_density = 0.0;
};

inline VirtualSample sample_virtual_ood(const GaussianStats& stats, std::size_t c, std::size_t pool_size,
                                        std::size_t p, std::mt19937_64& rng) {
  if (p < 1 || p > pool_size) throw ArgumentError("sample_virtual_ood: require pool_size >= p >= 1");
  const SamplePool pool = draw_pool(stats, c, pool_size, rng);
  const std::size_t k = pth_smallest(pool.log_density, p);
  return {c, stats.transform(pool.eps.col(static_cast<Eigen::Index>(k)), c), pool.log_density[k]};
}

// `per_class` outliers for every class, stacked class-major into a tensor.
inline Tensor sample_virtual_batch(const GaussianStats& stats, std::size_t per_class, std::size_t pool_size,
                                   std::size_t p, std::mt19937_64& rng) {
  const std::size_t d = stats.dim();
  Tensor out = Tensor::zeros({stats.num_classes() * per_class, d});
  auto o = out.data();
  std::size_t r = 0;
  for (std::size_t c = 0; c < stats.num_classes(); ++c)
    for (std::size_t k = 0; k < per_class; ++k, ++r) {
      const VirtualSample s = sample_virtual_ood(stats, c, pool_size, p, rng);
      for (std::size_t j = 0; j < d; ++j) o[r * d + j] = s.point(static_cast<Eigen::Index>(j));
    }
  return out;
}

}  // namespace caood
