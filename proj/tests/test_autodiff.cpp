// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "caood/autodiff.hpp"

namespace caood {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.at(1, 2), 6.0);
}

TEST(Tensor, GradientIsLazilyAllocatedWithMatchingShape) {
  Tensor t = Tensor::zeros({3, 2});
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW((void)t.grad(), StateError);
  t.set_requires_grad();
  Tape tape;
  {
    Tape::Scope s(tape);
    tape.backward(sum(t));
  }
  ASSERT_TRUE(t.has_grad());
  EXPECT_EQ(t.grad().size(), t.numel());
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const Tensor id = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::matrix({{3, 4}, {5, 6}});
  EXPECT_EQ(matmul(id, b).values(), b.values());
}

TEST(Matmul, RowTimesColumnIsDotProduct) {
  EXPECT_EQ(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})).item(), 11.0);
}

TEST(Matmul, TimesZerosIsZeros) {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor({4, 3}, rng);
  const Tensor p = matmul(a, Tensor::zeros({3, 5}));
  for (double v : p.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MismatchReportsBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Logsumexp, MatchesDirectEvaluation) {
  EXPECT_NEAR(logsumexp(Tensor::zeros({1, 10}), 1).item(), std::log(10.0), 1e-12);
  EXPECT_DOUBLE_EQ(logsumexp(Tensor::matrix({{-7.25}}), 1).item(), -7.25);
  const double direct = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(logsumexp(Tensor::matrix({{1, 2, 3}}), 1).item(), direct, 1e-12);
  EXPECT_NEAR(direct, 3.407606, 1e-6);
}

TEST(Logsumexp, EmptyAxisIsDimensionError) {
  EXPECT_THROW(logsumexp(Tensor::zeros({3, 0}), 1), DimensionError);
}

TEST(Logsumexp, ShiftInvariance) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor v = random_tensor({5, 7}, rng, -30, 30);
    const double c = std::uniform_real_distribution<double>(-100, 100)(rng);
    const Tensor a = logsumexp(v, 1), b = logsumexp(add_scalar(v, c), 1);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(b.at(i), a.at(i) + c, 1e-9);
  }
}

TEST(Logsumexp, StableForLargeInputs) {
  const double v = logsumexp(Tensor::matrix({{1000, 1000}}), 1).item();
  EXPECT_NEAR(v, 1000 + std::log(2.0), 1e-9);
}

TEST(CrossEntropy, GoldenValues) {
  const std::vector<int> y4{0, 1, 2, 3};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({4, 4}), y4).item(), std::log(4.0), 1e-12);
  const std::vector<int> y0{0};
  EXPECT_LT(cross_entropy(Tensor::matrix({{50, 0, 0}}), y0).item(), 1e-20);
  const std::vector<int> y1{1};
  EXPECT_NEAR(cross_entropy(Tensor::matrix({{1, 2}}), y0).item(), std::log1p(std::exp(1.0)), 1e-12);
  EXPECT_NEAR(cross_entropy(Tensor::matrix({{1, 2}}), y1).item(), 0.313262, 1e-6);
}

TEST(CrossEntropy, LabelOutOfRangeIsIndexError) {
  const std::vector<int> bad{2};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 2}), bad), IndexError);
  const std::vector<int> neg{-1};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 2}), neg), IndexError);
}

ParameterGroup one_param(double p, double g) {
  ParameterGroup group{{"p", Tensor::vector({p})}};
  group[0].value.mutable_grad()[0] = g;
  return group;
}

TEST(Sgd, ZeroLearningRateLeavesParameters) {
  ParameterGroup group = one_param(1.5, 3.0);
  Sgd opt({0.0, 0.9, 5e-4});
  opt.step(group);
  EXPECT_EQ(group[0].value.item(), 1.5);
}

TEST(Sgd, PlainGradientStep) {
  ParameterGroup group = one_param(1.0, 2.0);
  Sgd opt({0.1, 0.0, 0.0});
  opt.step(group);
  EXPECT_NEAR(group[0].value.item(), 0.8, 1e-15);
}

TEST(Sgd, MomentumRecursion) {
  ParameterGroup group = one_param(0.0, 1.0);
  Sgd opt({1.0, 0.9, 0.0});
  opt.step(group);
  opt.step(group);
  EXPECT_NEAR(group[0].value.item(), -2.9, 1e-15);
}

TEST(Sgd, WeightDecayEntersVelocity) {
  ParameterGroup group = one_param(2.0, 0.0);
  Sgd opt({0.5, 0.0, 0.1});
  opt.step(group);
  EXPECT_NEAR(group[0].value.item(), 2.0 - 0.5 * 0.2, 1e-15);
}

TEST(Sgd, MissingGradientNamesParameter) {
  ParameterGroup group{{"adapter.0.weight", Tensor::vector({1.0})}};
  Sgd opt;
  try {
    opt.step(group);
    FAIL();
  } catch (const StateError& e) {
    EXPECT_NE(std::string(e.what()).find("adapter.0.weight"), std::string::npos);
  }
}

TEST(Sgd, OnlyTheSteppedGroupMoves) {
  ParameterGroup a = one_param(1.0, 1.0), b = one_param(1.0, 1.0);
  b[0].name = "q";
  Sgd opt({0.1, 0.9, 0.0});
  opt.step(a);
  EXPECT_NE(a[0].value.item(), 1.0);
  EXPECT_EQ(b[0].value.item(), 1.0);
}

TEST(Tape, BackwardOverIndependentSubgraphsConcatenates) {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor({3, 2}, rng), b = random_tensor({4}, rng);
  auto f = [](const Tensor& x) { return sum(mul(x, x)); };
  auto g = [](const Tensor& x) { return sum(exp(x)); };
  auto grad_of = [&](auto fn, Tensor x) {
    x.zero_grad();
    x.set_requires_grad();
    Tape tape;
    Tape::Scope s(tape);
    tape.backward(fn(x));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto ga = grad_of(f, a.detach()), gb = grad_of(g, b.detach());
  a.set_requires_grad();
  b.set_requires_grad();
  {
    Tape tape;
    Tape::Scope s(tape);
    tape.backward(add(f(a), g(b)));
  }
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), ga);
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), gb);
}

TEST(Tape, ReplayIsBitwiseDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(42);
    Tensor w = random_tensor({3, 4}, rng).set_requires_grad();
    const Tensor x = random_tensor({6, 3}, rng);
    Tape tape;
    Tape::Scope s(tape);
    tape.backward(mean(softplus(matmul(x, w))));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, ConsumedTapeRefusesSecondBackward) {
  Tensor x = Tensor::vector({1.0, 2.0}).set_requires_grad();
  Tape tape;
  Tape::Scope s(tape);
  Tensor y = sum(x);
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), StateError);
  tape.clear();
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, PauseStopsRecording) {
  Tensor x = Tensor::vector({1.0}).set_requires_grad();
  Tape tape;
  Tape::Scope s(tape);
  {
    Tape::Pause p;
    (void)exp(x);
  }
  EXPECT_EQ(tape.size(), 0u);
  (void)exp(x);
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Broadcast, RowVectorAddsToEveryRow) {
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::vector({10, 20});
  EXPECT_EQ(add(m, b).values(), (std::vector<double>{11, 22, 13, 24}));
  EXPECT_THROW(add(m, Tensor::vector({1, 2, 3})), DimensionError);
}

// Finite-difference agreement for every op on random inputs in [-2, 2].
struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Tensor(std::span<Tensor>)> fn;
  double lo = -2.0;
};

std::vector<OpCase> op_cases() {
  const std::vector<int> labels{0, 2, 1, 2};
  return {
      {"add", {{3, 4}, {4}}, [](std::span<Tensor> v) { return sum(mul(add(v[0], v[1]), v[0])); }},
      {"sub", {{3, 4}, {3, 4}}, [](std::span<Tensor> v) { return sum(mul(sub(v[0], v[1]), v[1])); }},
      {"mul", {{2, 5}, {2, 5}}, [](std::span<Tensor> v) { return sum(mul(v[0], v[1])); }},
      {"scale", {{6}}, [](std::span<Tensor> v) { return sum(mul(scale(v[0], -1.7), v[0])); }},
      {"relu", {{4, 4}}, [](std::span<Tensor> v) { return sum(mul(relu(v[0]), v[0])); }},
      {"exp", {{3, 3}}, [](std::span<Tensor> v) { return sum(exp(v[0])); }},
      {"log", {{3, 3}}, [](std::span<Tensor> v) { return sum(log(v[0])); }, 0.2},
      {"softplus", {{3, 3}}, [](std::span<Tensor> v) { return sum(mul(softplus(v[0]), v[0])); }},
      {"mean", {{2, 7}}, [](std::span<Tensor> v) { return mean(mul(v[0], v[0])); }},
      {"sum_axis", {{3, 4}}, [](std::span<Tensor> v) { return sum(exp(sum(v[0], 0))); }},
      {"logsumexp", {{4, 5}}, [](std::span<Tensor> v) { return sum(mul(logsumexp(v[0], 1), logsumexp(v[0], 1))); }},
      {"matmul", {{3, 4}, {4, 2}}, [](std::span<Tensor> v) { return sum(exp(scale(matmul(v[0], v[1]), 0.3))); }},
      {"transpose", {{2, 3}, {2, 3}}, [](std::span<Tensor> v) { return sum(exp(matmul(transpose(v[0]), v[1]))); }},
      {"sq_distances", {{4, 3}, {5, 3}}, [](std::span<Tensor> v) { return sum(exp(scale(sq_distances(v[0], v[1]), -0.2))); }},
      {"gather_rows", {{4, 3}}, [](std::span<Tensor> v) {
         const std::vector<std::size_t> r{2, 0, 2};
         return sum(exp(gather_rows(v[0], r)));
       }},
      {"concat_rows", {{2, 3}, {1, 3}}, [](std::span<Tensor> v) {
         const std::vector<Tensor> parts{v[0], v[1]};
         return sum(mul(concat_rows(parts), concat_rows(parts)));
       }},
      {"cross_entropy", {{4, 3}}, [labels](std::span<Tensor> v) { return cross_entropy(v[0], labels); }},
  };
}

TEST(GradientCheck, EveryOpAgreesWithCentralDifferences) {
  std::mt19937_64 rng(2026);
  for (const auto& op : op_cases()) {
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<Tensor> inputs;
      for (const auto& s : op.shapes) inputs.push_back(random_tensor(s, rng, op.lo, 2.0));
      worst = std::max(worst, gradient_check(op.fn, inputs, 1e-5).max_rel_error);
    }
    EXPECT_LT(worst, 1e-4) << op.name;
  }
}

TEST(GradientCheck, MaximumRoutesToTheWinner) {
  Tensor a = Tensor::scalar(1.0).set_requires_grad(), b = Tensor::scalar(3.0).set_requires_grad();
  Tape tape;
  Tape::Scope s(tape);
  const std::vector<Tensor> both{a, b};
  tape.backward(maximum(both));
  EXPECT_FALSE(a.has_grad() && a.grad()[0] != 0.0);
  EXPECT_EQ(b.grad()[0], 1.0);
}

}  // namespace
}  // namespace caood
