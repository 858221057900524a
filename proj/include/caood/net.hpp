// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

// The composed classifier  classifier ∘ adapter ∘ extractor  built from
// small ReLU perceptrons. The three stages own disjoint parameter groups so
// that meta-training can update the extractor and the head independently.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "caood/autodiff.hpp"

namespace caood {

enum class Group { Extractor, Adapter, Classifier };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::Extractor:
      return "extractor";
    case Group::Adapter:
      return "adapter";
    case Group::Classifier:
      return "classifier";
  }
  return "?";
}

inline Group group_from_name(const std::string& name) {
  if (name == "extractor") return Group::Extractor;
  if (name == "adapter") return Group::Adapter;
  if (name == "classifier") return Group::Classifier;
  throw ArgumentError("unknown parameter group '" + name + "'");
}

struct ModelConfig {
  std::size_t input_dim = 2;
  std::vector<std::size_t> extractor_widths{64, 64};
  std::size_t feat_dim = 64;
  // Hidden widths of the adapter; its output width is always feat_dim.
  std::vector<std::size_t> adapter_widths{64};
  std::size_t num_classes = 4;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v < 1) throw ArgumentError(std::string("model config: ") + what + " must be >= 1");
    };
    positive(input_dim, "input_dim");
    positive(feat_dim, "feat_dim");
    positive(num_classes, "num_classes");
    for (auto w : extractor_widths) positive(w, "extractor width");
    for (auto w : adapter_widths) positive(w, "adapter width");
  }
};

// 64-bit FNV-1a over the raw bytes of every scalar in the group.
inline std::uint64_t checksum(const ParameterGroup& group) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : group)
    for (double v : p.value.data()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
      for (std::size_t i = 0; i < sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    }
  return h;
}

class PartitionedModel {
 public:
  // Intermediate activations of one forward pass.
  struct Activations {
    Tensor extracted;  // extractor output
    Tensor features;   // adapter output, the space virtual outliers live in
    Tensor logits;
  };

  explicit PartitionedModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    build(Group::Extractor);
    build(Group::Adapter);
    build(Group::Classifier);
    for (Group g : {Group::Extractor, Group::Adapter, Group::Classifier}) initialize(g, derive_seed(config_.seed, g));
  }

  // Copies own their parameters; moves transfer them.
  PartitionedModel(const PartitionedModel& other)
      : config_(other.config_), extractor_frozen_(other.extractor_frozen_) {
    for (std::size_t g = 0; g < 3; ++g) {
      for (const auto& p : other.groups_[g]) {
        Tensor v = p.value.detach();
        v.set_requires_grad(p.value.requires_grad());
        groups_[g].push_back({p.name, v});
      }
    }
  }
  PartitionedModel& operator=(const PartitionedModel& other) {
    if (this != &other) *this = PartitionedModel(other);
    return *this;
  }
  PartitionedModel(PartitionedModel&&) noexcept = default;
  PartitionedModel& operator=(PartitionedModel&&) noexcept = default;

  const ModelConfig& config() const noexcept { return config_; }

  ParameterGroup& group(Group g) { return groups_[index(g)]; }
  const ParameterGroup& group(Group g) const { return groups_[index(g)]; }

  std::size_t parameter_count() const {
    return caood::parameter_count(groups_[0]) + caood::parameter_count(groups_[1]) +
           caood::parameter_count(groups_[2]);
  }

  std::uint64_t checksum(Group g) const { return caood::checksum(group(g)); }

  Activations forward_all(const Tensor& batch) const {
    if (batch.rank() != 2 || batch.cols() != config_.input_dim) {
      throw DimensionError("forward: expected [n x " + std::to_string(config_.input_dim) + "] batch, got " +
                           shape_str(batch.shape()));
    }
    Activations a;
    a.extracted = run_mlp(groups_[index(Group::Extractor)], batch, true);
    a.features = run_mlp(groups_[index(Group::Adapter)], a.extracted, true);
    a.logits = classify(a.features);
    return a;
  }

  Tensor forward(const Tensor& batch) const { return forward_all(batch).logits; }
  Tensor features(const Tensor& batch) const { return forward_all(batch).features; }
  Tensor extract(const Tensor& batch) const { return forward_all(batch).extracted; }

  // Applies the classifier alone to feature-space points.
  Tensor classify(const Tensor& features) const {
    if (features.rank() != 2 || features.cols() != config_.feat_dim) {
      throw DimensionError("classify: expected [n x " + std::to_string(config_.feat_dim) + "] features, got " +
                           shape_str(features.shape()));
    }
    return run_mlp(groups_[index(Group::Classifier)], features, false);
  }

  // While frozen the extractor cannot be re-initialized.
  void freeze_extractor(bool frozen = true) { extractor_frozen_ = frozen; }
  bool extractor_frozen() const noexcept { return extractor_frozen_; }

  void reinit_group(Group g, std::uint64_t seed) {
    if (g == Group::Extractor && extractor_frozen_) {
      throw UsageError("reinit_group: the extractor is frozen and cannot be re-initialized");
    }
    initialize(g, derive_seed(seed, g));
  }

  // Sets every weight and bias of a group to zero.
  void zero_group(Group g) {
    for (auto& p : group(g))
      for (double& v : p.value.data()) v = 0.0;
  }

 private:
  static std::size_t index(Group g) { return static_cast<std::size_t>(g); }

  static std::uint64_t derive_seed(std::uint64_t seed, Group g) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index(g)) + 0x9e37u};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
  }

  std::vector<std::size_t> dims(Group g) const {
    std::vector<std::size_t> d;
    switch (g) {
      case Group::Extractor:
        d.push_back(config_.input_dim);
        d.insert(d.end(), config_.extractor_widths.begin(), config_.extractor_widths.end());
        d.push_back(config_.feat_dim);
        break;
      case Group::Adapter:
        d.push_back(config_.feat_dim);
        d.insert(d.end(), config_.adapter_widths.begin(), config_.adapter_widths.end());
        d.push_back(config_.feat_dim);
        break;
      case Group::Classifier:
        d = {config_.feat_dim, config_.num_classes};
        break;
    }
    return d;
  }

  void build(Group g) {
    const auto d = dims(g);
    auto& params = groups_[index(g)];
    params.clear();
    for (std::size_t l = 0; l + 1 < d.size(); ++l) {
      const std::string prefix = std::string(group_name(g)) + "." + std::to_string(l);
      params.push_back({prefix + ".weight", Tensor::zeros({d[l], d[l + 1]})});
      params.push_back({prefix + ".bias", Tensor::zeros({d[l + 1]})});
    }
    for (auto& p : params) p.value.set_requires_grad();
  }

  // Kaiming-uniform weights with unit gain, bound sqrt(3 / fan_in), so a
  // layer preserves the second moment of its input; zero biases.
  void initialize(Group g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& p : groups_[index(g)]) {
      p.value.zero_grad();
      auto w = p.value.data();
      if (p.value.rank() == 1) {
        std::fill(w.begin(), w.end(), 0.0);
        continue;
      }
      const double bound = std::sqrt(3.0 / static_cast<double>(p.value.rows()));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : w) v = dist(rng);
    }
  }

  static Tensor run_mlp(const ParameterGroup& params, Tensor x, bool relu_last) {
    for (std::size_t l = 0; l < params.size(); l += 2) {
      x = add(matmul(x, params[l].value), params[l + 1].value);
      const bool last = l + 2 == params.size();
      if (!last || relu_last) x = relu(x);
    }
    return x;
  }

  ModelConfig config_;
  ParameterGroup groups_[3];
  bool extractor_frozen_ = false;
};

}  // namespace caood
