// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

// Continuously shifting ID/OOD streams: rotation schedules, severity
// trajectories of point-cloud corruptions, a synthetic rotating-clusters
// generator and an IDX reader.

#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "caood/autodiff.hpp"
#include "caood/mmd.hpp"

namespace caood {

struct Dataset {
  Tensor x;            // [n x d]
  std::vector<int> y;  // empty for unlabeled sets
  std::size_t image_height = 0;  // nonzero when rows are flattened images
  std::size_t image_width = 0;

  std::size_t size() const { return x.numel() ? x.rows() : 0; }
  std::size_t dim() const { return x.rank() == 2 ? x.cols() : 0; }
  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    {
      Tape::Pause pause;
      out.x = gather_rows(x, rows);
    }
    if (!y.empty())
      for (auto r : rows) out.y.push_back(y.at(r));
    out.image_height = image_height;
    out.image_width = image_width;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Transform descriptors and schedules.

struct TransformDescriptor {
  enum class Kind { Identity, Rotation, Severity };
  Kind kind = Kind::Identity;
  double angle = 0.0;  // degrees
  int type = 0;
  int level = 0;

  static TransformDescriptor identity() { return {}; }
  static TransformDescriptor rotation(double degrees) {
    if (!(degrees >= 0.0 && degrees <= 180.0)) {
      throw ArgumentError("rotation: angle " + std::to_string(degrees) + " outside [0, 180]");
    }
    TransformDescriptor d;
    d.kind = Kind::Rotation;
    d.angle = degrees;
    return d;
  }
  static TransformDescriptor severity(int type, int level) {
    if (level < 1 || level > 5) throw ArgumentError("severity: level " + std::to_string(level) + " outside 1..5");
    if (type < 0) throw ArgumentError("severity: negative type index");
    TransformDescriptor d;
    d.kind = Kind::Severity;
    d.type = type;
    d.level = level;
    return d;
  }

  bool operator==(const TransformDescriptor&) const = default;
};

inline void to_json(nlohmann::json& j, const TransformDescriptor& d) {
  switch (d.kind) {
    case TransformDescriptor::Kind::Identity:
      j = {{"kind", "identity"}};
      break;
    case TransformDescriptor::Kind::Rotation:
      j = {{"kind", "rotation"}, {"angle", d.angle}};
      break;
    case TransformDescriptor::Kind::Severity:
      j = {{"kind", "severity"}, {"type", d.type}, {"level", d.level}};
      break;
  }
}

inline void from_json(const nlohmann::json& j, TransformDescriptor& d) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "identity") {
    d = TransformDescriptor::identity();
  } else if (kind == "rotation") {
    d = TransformDescriptor::rotation(j.at("angle").get<double>());
  } else if (kind == "severity") {
    d = TransformDescriptor::severity(j.at("type").get<int>(), j.at("level").get<int>());
  } else {
    throw ArgumentError("transform descriptor: unknown kind '" + kind + "'");
  }
}

// `count` angles first, first + step, ...
inline std::vector<double> angle_grid(double first, double step, std::size_t count) {
  std::vector<double> g(count);
  for (std::size_t i = 0; i < count; ++i) g[i] = first + step * static_cast<double>(i);
  return g;
}

inline std::vector<double> default_test_angles() { return angle_grid(120.0, 6.0, 10); }

// Per type the ramp 1..levels..1, concatenated over types first_type, first_type + 1, ...
inline std::vector<TransformDescriptor> make_severity_trajectory(int num_types, int levels = 5, int first_type = 0) {
  if (num_types < 1) throw ArgumentError("severity trajectory: need at least one type");
  if (levels < 1 || levels > 5) throw ArgumentError("severity trajectory: levels must be in 1..5");
  std::vector<TransformDescriptor> out;
  for (int t = 0; t < num_types; ++t) {
    for (int l = 1; l <= levels; ++l) out.push_back(TransformDescriptor::severity(first_type + t, l));
    for (int l = levels - 1; l >= 1; --l) out.push_back(TransformDescriptor::severity(first_type + t, l));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometric transforms.

// Rotation about the origin in the first two coordinates; 0 degrees is an
// exact copy.
inline Tensor rotate_points(const Tensor& points, double degrees) {
  detail::require_matrix(points, "rotate_points");
  if (points.cols() < 2) throw DimensionError("rotate_points: need at least two coordinates");
  Tensor out = points.detach();
  if (degrees == 0.0) return out;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const std::size_t d = points.cols();
  auto o = out.data();
  for (std::size_t i = 0; i < points.rows(); ++i) {
    const double x = o[i * d], y = o[i * d + 1];
    o[i * d] = c * x - s * y;
    o[i * d + 1] = s * x + c * y;
  }
  return out;
}

// Bilinear rotation of a row-major h x w image about its center; pixels
// sampled outside the frame read as 0.
inline std::vector<double> rotate_image(std::span<const double> img, std::size_t h, std::size_t w, double degrees) {
  if (img.size() != h * w) throw DimensionError("rotate_image: pixel count differs from h*w");
  std::vector<double> out(img.begin(), img.end());
  if (degrees == 0.0) return out;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  auto px = [&](long r, long q) -> double {
    if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(w)) return 0.0;
    return img[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(q)];
  };
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t q = 0; q < w; ++q) {
      // inverse map of the output pixel into the source frame
      const double dx = static_cast<double>(q) - cx, dy = static_cast<double>(r) - cy;
      const double sx = c * dx + s * dy + cx, sy = -s * dx + c * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      out[r * w + q] = (1 - ay) * ((1 - ax) * px(y0, x0) + ax * px(y0, x0 + 1)) +
                       ay * ((1 - ax) * px(y0 + 1, x0) + ax * px(y0 + 1, x0 + 1));
    }
  return out;
}

inline Dataset rotate_dataset(const Dataset& base, double degrees) {
  Dataset out = base;
  if (base.image_height && base.image_width) {
    const std::size_t n = base.size(), p = base.dim();
    std::vector<double> flat;
    flat.reserve(n * p);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = rotate_image(base.x.data().subspan(i * p, p), base.image_height, base.image_width, degrees);
      flat.insert(flat.end(), row.begin(), row.end());
    }
    out.x = Tensor({n, p}, std::move(flat));
  } else {
    out.x = rotate_points(base.x, degrees);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Point-cloud corruptions: seven families, two variants each. Type index k
// selects family k % 7 and variant k / 7. Level 0 is the identity.

inline constexpr int kCorruptionFamilies = 7;
inline constexpr int kCorruptionTypes = 2 * kCorruptionFamilies;

inline const char* corruption_name(int type) {
  static constexpr std::array<const char*, kCorruptionTypes> names{
      "gaussian_noise", "scaling",       "shear_x",     "translate_x",     "salt_dropout",  "knn_blur",  "swap_blend",
      "axis_noise",     "anisotropic_scaling", "shear_y", "translate_diag", "center_dropout", "knn_smear", "mix_blend"};
  if (type < 0 || type >= kCorruptionTypes) throw ArgumentError("corruption: type index out of range");
  return names[static_cast<std::size_t>(type)];
}

namespace detail {

// Mean of the k nearest neighbours of every row (including the row itself).
inline std::vector<double> knn_means(std::span<const double> p, std::size_t n, std::size_t d, std::size_t k) {
  k = std::min(k, n);
  std::vector<double> out(n * d, 0.0);
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += (p[i * d + c] - p[j * d + c]) * (p[i * d + c] - p[j * d + c]);
      dist[j] = {acc, j};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    for (std::size_t m = 0; m < k; ++m)
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += p[dist[m].second * d + c] / static_cast<double>(k);
  }
  return out;
}

}  // namespace detail

inline Tensor apply_severity(const Tensor& points, int type, int level, std::mt19937_64& rng) {
  detail::require_matrix(points, "apply_severity");
  if (type < 0 || type >= kCorruptionTypes) throw ArgumentError("apply_severity: type index out of range");
  if (level < 0 || level > 5) throw ArgumentError("apply_severity: level outside 0..5");
  Tensor out = points.detach();
  if (level == 0) return out;
  const std::size_t n = points.rows(), d = points.cols();
  if (d < 2) throw DimensionError("apply_severity: need at least two coordinates");
  const double L = static_cast<double>(level);
  const bool alt = type >= kCorruptionFamilies;
  auto o = out.data();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  switch (type % kCorruptionFamilies) {
    case 0:  // additive noise, isotropic or along the first axis
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) {
          const double e = normal(rng);
          if (!alt) o[i * d + c] += 0.15 * L * e;
          else if (c == 0) o[i * d + c] += 0.25 * L * e;
        }
      break;
    case 1:  // scaling about the origin
      for (std::size_t i = 0; i < n; ++i) {
        const double sx = alt ? 1.0 + 0.2 * L : 1.0 + 0.12 * L;
        const double sy = alt ? 1.0 / (1.0 + 0.2 * L) : 1.0 + 0.12 * L;
        o[i * d] *= sx;
        o[i * d + 1] *= sy;
      }
      break;
    case 2:  // shear
      for (std::size_t i = 0; i < n; ++i) {
        const double x = o[i * d], y = o[i * d + 1];
        if (!alt) o[i * d] = x + 0.2 * L * y;
        else o[i * d + 1] = y + 0.2 * L * x;
      }
      break;
    case 3:  // translation along the first axis or the diagonal
      for (std::size_t i = 0; i < n; ++i) {
        o[i * d] += (alt ? 0.15 : 0.2) * L;
        if (alt) o[i * d + 1] += 0.15 * L;
      }
      break;
    case 4: {  // replace a fraction of points with uniform clutter or the centroid
      double lo = o[0], hi = o[0];
      for (double v : o) lo = std::min(lo, v), hi = std::max(hi, v);
      std::vector<double> centroid(d, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) centroid[c] += o[i * d + c] / static_cast<double>(n);
      const double rate = 0.08 * L;
      for (std::size_t i = 0; i < n; ++i) {
        const bool hit = unit(rng) < rate;
        for (std::size_t c = 0; c < d; ++c) {
          const double u = lo + (hi - lo) * unit(rng);
          if (hit) o[i * d + c] = alt ? centroid[c] : u;
        }
      }
      break;
    }
    case 5: {  // local averaging over nearest neighbours
      const std::size_t k = alt ? 8 : 1 + 2 * static_cast<std::size_t>(level);
      const auto means = detail::knn_means(points.data(), n, d, k);
      const double a = alt ? 0.18 * L : 1.0;
      for (std::size_t i = 0; i < n * d; ++i) o[i] = (1 - a) * o[i] + a * means[i];
      break;
    }
    case 6: {  // blend toward swapped coordinates or toward a random partner
      const double a = 0.1 * L;
      const auto src = points.data();
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t i = 0; i < n; ++i) {
        if (!alt) {
          const double x = src[i * d], y = src[i * d + 1];
          o[i * d] = (1 - a) * x + a * y;
          o[i * d + 1] = (1 - a) * y + a * x;
        } else {
          const std::size_t j = pick(rng);
          for (std::size_t c = 0; c < d; ++c) o[i * d + c] = (1 - a) * src[i * d + c] + a * src[j * d + c];
        }
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Streams.

struct ShiftStream {
  Dataset origin;
  std::vector<double> grid;                     // strictly increasing time values
  std::vector<TransformDescriptor> schedule;    // one per grid entry
  std::vector<Dataset> sets;                    // S^t, one per grid entry
  std::size_t budget = 0;                       // adaptation samples available per t

  std::size_t length() const noexcept { return grid.size(); }

  void validate() const {
    if (schedule.size() != grid.size() || sets.size() != grid.size()) {
      throw DimensionError("shift stream: grid, schedule and sets have different lengths");
    }
    for (std::size_t i = 1; i < grid.size(); ++i)
      if (!(grid[i] > grid[i - 1])) throw ArgumentError("shift stream: time grid is not strictly increasing");
  }
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace detail

// S^t = rotate(base, angle_t) for every angle in the grid.
inline ShiftStream make_rotation_stream(const Dataset& base, std::span<const double> angles, std::size_t budget) {
  ShiftStream s;
  s.origin = base;
  s.budget = budget;
  for (double a : angles) {
    s.schedule.push_back(TransformDescriptor::rotation(a));
    s.grid.push_back(a);
    s.sets.push_back(rotate_dataset(base, a));
  }
  s.validate();
  return s;
}

// S^t = corrupt(base, type_t, level_t) with time values 1..N.
inline ShiftStream make_severity_stream(const Dataset& base, std::span<const TransformDescriptor> trajectory,
                                        std::size_t budget, std::uint64_t seed) {
  ShiftStream s;
  s.origin = base;
  s.budget = budget;
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    const auto& d = trajectory[i];
    if (d.kind != TransformDescriptor::Kind::Severity) throw ArgumentError("severity stream: non-severity descriptor");
    std::mt19937_64 rng(detail::mix_seed(seed, i, 0x5e7));
    Dataset set = base;
    set.x = apply_severity(base.x, d.type, d.level, rng);
    s.grid.push_back(static_cast<double>(i + 1));
    s.schedule.push_back(d);
    s.sets.push_back(std::move(set));
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic rotating clusters.

struct SyntheticConfig {
  std::size_t num_classes = 4;
  std::size_t origin_samples = 2000;  // labeled origin set size
  double sigma = 0.15;                // cluster standard deviation
  double radius = 2.0;                // circle the clusters sit on
  std::array<double, 2> center{1.0, 0.0};
  // Cluster positions on the circle in degrees; empty means evenly spaced,
  // with OOD clusters halfway between consecutive ID clusters.
  std::vector<double> id_angles;
  std::vector<double> ood_angles;
  // Relative class frequencies; empty means balanced.
  std::vector<double> proportions;
  std::vector<double> train_angles = angle_grid(1.0, 1.0, 60);
  std::vector<double> test_angles = default_test_angles();
  std::size_t train_per_t = 200;      // pool per training t for support/query draws
  std::size_t adapt_per_t = 100;      // n^t at test time
  std::size_t calib_per_t = 100;      // ID calibration split for the threshold
  std::size_t eval_id_per_t = 400;
  std::size_t eval_ood_per_t = 400;
  std::uint64_t seed = 0;

  std::vector<double> resolved_id_angles() const {
    if (!id_angles.empty()) return id_angles;
    std::vector<double> a(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) a[c] = 360.0 * static_cast<double>(c) / static_cast<double>(num_classes);
    return a;
  }
  std::vector<double> resolved_ood_angles() const {
    if (!ood_angles.empty()) return ood_angles;
    auto a = resolved_id_angles();
    for (auto& v : a) v += 180.0 / static_cast<double>(num_classes);
    return a;
  }
  std::vector<double> resolved_proportions() const {
    if (!proportions.empty()) return proportions;
    return std::vector<double>(num_classes, 1.0);
  }

  void validate() const {
    if (num_classes < 2) throw ArgumentError("synthetic: num_classes must be >= 2");
    if (id_angles.size() && id_angles.size() != num_classes) throw ArgumentError("synthetic: id_angles has wrong length");
    if (proportions.size() && proportions.size() != num_classes) {
      throw ArgumentError("synthetic: proportions has wrong length");
    }
    for (double p : proportions)
      if (!(p > 0.0)) throw ArgumentError("synthetic: proportions must be positive");
    if (!(sigma > 0.0)) throw ArgumentError("synthetic: sigma must be positive");
    if (origin_samples < num_classes) throw ArgumentError("synthetic: origin_samples too small");
    if (adapt_per_t * 20 > origin_samples) throw ArgumentError("synthetic: adapt_per_t must be much smaller than n");
    if (calib_per_t < 20) throw ArgumentError("synthetic: calib_per_t must be >= 20");
    for (double a : train_angles)
      if (!(a > 0.0 && a <= 180.0)) throw ArgumentError("synthetic: train angle outside (0, 180]");
    for (double a : test_angles)
      if (!(a >= 0.0 && a <= 180.0)) throw ArgumentError("synthetic: test angle outside [0, 180]");
    for (double a : test_angles)
      if (std::find(train_angles.begin(), train_angles.end(), a) != train_angles.end()) {
        throw ArgumentError("synthetic: train and test windows overlap");
      }
  }
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"num_classes", c.num_classes},     {"origin_samples", c.origin_samples}, {"sigma", c.sigma},
       {"radius", c.radius},               {"center", c.center},                 {"id_angles", c.id_angles},
       {"ood_angles", c.ood_angles},       {"proportions", c.proportions},       {"train_angles", c.train_angles},
       {"test_angles", c.test_angles},     {"train_per_t", c.train_per_t},       {"adapt_per_t", c.adapt_per_t},
       {"calib_per_t", c.calib_per_t},     {"eval_id_per_t", c.eval_id_per_t},   {"eval_ood_per_t", c.eval_ood_per_t},
       {"seed", c.seed}};
}

// Unknown keys are rejected; missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  if (!j.is_object()) throw ArgumentError("synthetic: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    if (k == "num_classes") c.num_classes = v.get<std::size_t>();
    else if (k == "origin_samples") c.origin_samples = v.get<std::size_t>();
    else if (k == "sigma") c.sigma = v.get<double>();
    else if (k == "radius") c.radius = v.get<double>();
    else if (k == "center") c.center = v.get<std::array<double, 2>>();
    else if (k == "id_angles") c.id_angles = v.get<std::vector<double>>();
    else if (k == "ood_angles") c.ood_angles = v.get<std::vector<double>>();
    else if (k == "proportions") c.proportions = v.get<std::vector<double>>();
    else if (k == "train_angles") c.train_angles = v.get<std::vector<double>>();
    else if (k == "test_angles") c.test_angles = v.get<std::vector<double>>();
    else if (k == "train_per_t") c.train_per_t = v.get<std::size_t>();
    else if (k == "adapt_per_t") c.adapt_per_t = v.get<std::size_t>();
    else if (k == "calib_per_t") c.calib_per_t = v.get<std::size_t>();
    else if (k == "eval_id_per_t") c.eval_id_per_t = v.get<std::size_t>();
    else if (k == "eval_ood_per_t") c.eval_ood_per_t = v.get<std::size_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else throw ArgumentError("synthetic: unknown key '" + k + "'");
  }
}

// Fresh unrotated draws; `ood` selects the interleaved OOD clusters, whose
// labels are cluster indices outside the ID label space.
inline Dataset draw_clusters(const SyntheticConfig& cfg, std::size_t n, bool ood, std::mt19937_64& rng) {
  const auto angles = ood ? cfg.resolved_ood_angles() : cfg.resolved_id_angles();
  std::vector<double> weights = ood ? std::vector<double>(angles.size(), 1.0) : cfg.resolved_proportions();
  std::discrete_distribution<int> pick(weights.begin(), weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> flat(2 * n);
  Dataset out;
  out.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = pick(rng);
    const double rad = angles[static_cast<std::size_t>(k)] * std::numbers::pi / 180.0;
    const double ex = normal(rng), ey = normal(rng);
    flat[2 * i] = cfg.center[0] + cfg.radius * std::cos(rad) + cfg.sigma * ex;
    flat[2 * i + 1] = cfg.center[1] + cfg.radius * std::sin(rad) + cfg.sigma * ey;
    out.y[i] = ood ? static_cast<int>(cfg.num_classes) + k : k;
  }
  out.x = Tensor({n, 2}, std::move(flat));
  return out;
}

// Evaluation material for one test time step.
struct TestStep {
  double t = 0.0;
  Dataset adapt;    // unlabeled adaptation samples (labels kept for diagnostics only)
  Dataset calib;    // ID calibration split for the threshold
  Dataset eval_id;
  Dataset eval_ood;
};

struct SyntheticBenchmark {
  SyntheticConfig config;
  Dataset origin;
  ShiftStream train;              // rotations of fresh ID draws over the training window
  std::vector<TestStep> test;     // disjoint fresh draws per test angle
  ShiftStream ood_test;           // the paired OOD stream over the test window
};

inline SyntheticBenchmark make_synthetic_caood(const SyntheticConfig& cfg) {
  cfg.validate();
  SyntheticBenchmark b;
  b.config = cfg;
  {
    std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0x0419));
    b.origin = draw_clusters(cfg, cfg.origin_samples, false, rng);
  }
  b.train.origin = b.origin;
  b.train.budget = cfg.train_per_t;
  for (std::size_t i = 0; i < cfg.train_angles.size(); ++i) {
    std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0x7a1, i));
    const double a = cfg.train_angles[i];
    b.train.grid.push_back(a);
    b.train.schedule.push_back(TransformDescriptor::rotation(a));
    b.train.sets.push_back(rotate_dataset(draw_clusters(cfg, cfg.train_per_t, false, rng), a));
  }
  b.train.validate();
  b.ood_test.origin = b.origin;
  b.ood_test.budget = cfg.adapt_per_t;
  for (std::size_t i = 0; i < cfg.test_angles.size(); ++i) {
    std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0x7e57, i));
    const double a = cfg.test_angles[i];
    TestStep s;
    s.t = a;
    s.adapt = rotate_dataset(draw_clusters(cfg, cfg.adapt_per_t, false, rng), a);
    s.calib = rotate_dataset(draw_clusters(cfg, cfg.calib_per_t, false, rng), a);
    s.eval_id = rotate_dataset(draw_clusters(cfg, cfg.eval_id_per_t, false, rng), a);
    s.eval_ood = rotate_dataset(draw_clusters(cfg, cfg.eval_ood_per_t, true, rng), a);
    b.ood_test.grid.push_back(a);
    b.ood_test.schedule.push_back(TransformDescriptor::rotation(a));
    b.ood_test.sets.push_back(s.eval_ood);
    b.test.push_back(std::move(s));
  }
  b.ood_test.validate();
  return b;
}

// JSON description sufficient to regenerate a synthetic benchmark exactly.
inline nlohmann::json stream_manifest(const SyntheticBenchmark& b) {
  nlohmann::json j;
  j["generator"] = "synthetic_rotating_clusters";
  j["config"] = b.config;
  j["train_grid"] = b.train.grid;
  j["train_schedule"] = b.train.schedule;
  j["test_grid"] = b.ood_test.grid;
  j["test_schedule"] = b.ood_test.schedule;
  j["budgets"] = {{"train_per_t", b.config.train_per_t}, {"adapt_per_t", b.config.adapt_per_t}};
  j["seed"] = b.config.seed;
  return j;
}

inline SyntheticBenchmark regenerate(const nlohmann::json& manifest) {
  if (manifest.value("generator", std::string()) != "synthetic_rotating_clusters") {
    throw ArgumentError("stream manifest: unsupported generator");
  }
  return make_synthetic_caood(manifest.at("config").get<SyntheticConfig>());
}

// ---------------------------------------------------------------------------
// Continuity validation.

struct ContinuityReport {
  std::vector<double> pairs;  // mmd2 between consecutive sets
  double max = 0.0;
  bool within = true;         // max < epsilon
};

inline ContinuityReport validate_continuity(std::span<const Dataset> sets, double epsilon) {
  ContinuityReport r;
  for (std::size_t i = 0; i + 1 < sets.size(); ++i) {
    r.pairs.push_back(mmd2_value(sets[i].x, sets[i + 1].x));
    r.max = std::max(r.max, r.pairs.back());
  }
  r.within = r.max < epsilon;
  return r;
}

inline ContinuityReport validate_continuity(const ShiftStream& stream, double epsilon) {
  return validate_continuity(stream.sets, epsilon);
}

// ---------------------------------------------------------------------------
// Support / query trajectories.

struct Trajectory {
  std::vector<std::size_t> steps;  // indices into the window's time grid, increasing
  std::vector<Dataset> spt;
  std::vector<Dataset> qry;
};

// A sorted random subsequence of `length` time steps; per step, disjoint
// support and query subsets of S^t.
inline Trajectory sample_trajectory(const ShiftStream& stream, std::size_t length, std::size_t spt_count,
                                    std::size_t qry_count, std::mt19937_64& rng) {
  if (length < 1 || length > stream.length()) {
    throw ArgumentError("sample_trajectory: length " + std::to_string(length) + " outside [1, " +
                        std::to_string(stream.length()) + "]");
  }
  Trajectory tr;
  std::vector<std::size_t> all(stream.length());
  std::iota(all.begin(), all.end(), 0);
  std::sample(all.begin(), all.end(), std::back_inserter(tr.steps), static_cast<std::ptrdiff_t>(length), rng);
  for (std::size_t s : tr.steps) {
    const Dataset& set = stream.sets[s];
    if (spt_count + qry_count > set.size()) {
      throw ArgumentError("sample_trajectory: S^t has " + std::to_string(set.size()) + " samples, need " +
                          std::to_string(spt_count + qry_count));
    }
    std::vector<std::size_t> idx(set.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(spt_count));
    std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(spt_count),
                               idx.begin() + static_cast<std::ptrdiff_t>(spt_count + qry_count));
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    tr.spt.push_back(set.subset(a));
    tr.qry.push_back(set.subset(b));
  }
  return tr;
}

// ---------------------------------------------------------------------------
// IDX files.

struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;
};

inline IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw ParseError("idx: truncated header", bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) throw ParseError("idx: bad magic", 0);
  if (bytes[2] != 0x08) throw ParseError("idx: only unsigned-byte payloads are supported", 2);
  const std::size_t rank = bytes[3];
  if (rank == 0) throw ParseError("idx: rank 0", 3);
  if (bytes.size() < 4 + 4 * rank) throw ParseError("idx: truncated dimension list", bytes.size());
  IdxArray a;
  std::size_t total = 1;
  for (std::size_t r = 0; r < rank; ++r) {
    const std::size_t o = 4 + 4 * r;
    const std::size_t v = (static_cast<std::size_t>(bytes[o]) << 24) | (static_cast<std::size_t>(bytes[o + 1]) << 16) |
                          (static_cast<std::size_t>(bytes[o + 2]) << 8) | bytes[o + 3];
    a.dims.push_back(v);
    total *= v;
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() - header < total) throw ParseError("idx: truncated payload", bytes.size());
  if (bytes.size() - header > total) throw ParseError("idx: trailing bytes after payload", header + total);
  a.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return a;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// Images as flat rows scaled to [0, 1]; labels from the companion file.
inline Dataset idx_dataset(const IdxArray& images, const IdxArray& labels) {
  if (images.dims.size() < 2) throw ParseError("idx: image file needs rank >= 2", 3);
  if (labels.dims.size() != 1) throw ParseError("idx: label file must have rank 1", 3);
  const std::size_t n = images.dims[0];
  if (labels.dims[0] != n) throw ParseError("idx: label count differs from image count", 4);
  const std::size_t p = images.data.size() / std::max<std::size_t>(n, 1);
  std::vector<double> flat(images.data.size());
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = images.data[i] / 255.0;
  Dataset d;
  d.x = Tensor({n, p}, std::move(flat));
  for (auto v : labels.data) d.y.push_back(v);
  if (images.dims.size() == 3) {
    d.image_height = images.dims[1];
    d.image_width = images.dims[2];
  }
  return d;
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  return idx_dataset(parse_idx(read_file_bytes(images_path)), parse_idx(read_file_bytes(labels_path)));
}

}  // namespace caood
