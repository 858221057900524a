// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal define-by-run reverse-mode automatic differentiation over dense
// row-major float64 tensors.
//
// A Tensor is a reference-counted handle: copies share storage, detach()
// makes an independent value copy. Operations record a backward closure on
// the thread's active Tape (see Tape::Scope) whenever at least one operand
// requires a gradient. Without an active tape every op is a plain forward
// evaluation, which is how frozen-model evaluation runs.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "caood/errors.hpp"

namespace caood {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) { impl_->shape = {0}; }

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " elements, got " +
                           std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }
  // Rows must all have the same length.
  static Tensor matrix(const std::vector<std::vector<double>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.front().size() : 0;
    std::vector<double> flat;
    flat.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("matrix: ragged rows");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(flat));
  }

  const Shape& shape() const noexcept { return impl_->shape; }
  std::size_t rank() const noexcept { return impl_->shape.size(); }
  std::size_t numel() const noexcept { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("dim: axis out of range for " + shape_str(shape()));
    return impl_->shape[axis];
  }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<double> data() noexcept { return impl_->data; }
  std::span<const double> data() const noexcept { return impl_->data; }
  const std::vector<double>& values() const noexcept { return impl_->data; }

  double item() const {
    if (numel() != 1) throw DimensionError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
  }
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t i, std::size_t j) const { return impl_->data.at(i * cols() + j); }

  bool requires_grad() const noexcept { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const noexcept { return !impl_->grad.empty(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw StateError("grad: tensor " + shape_str(shape()) + " has no gradient");
    return impl_->grad;
  }
  // Allocates a zero gradient on first use. Tensors are handles, so this is
  // available through const copies captured by backward closures.
  std::span<double> mutable_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }
  bool shares_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered log of backward closures. Reverse recording order is a valid
// topological order because an op can only consume already-recorded outputs.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (current() == this) current() = nullptr;
  }

  // Makes a tape the active recorder for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(current()) { current() = &tape; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  // Suspends recording for the current thread.
  class Pause {
   public:
    Pause() : prev_(current()) { current() = nullptr; }
    ~Pause() { current() = prev_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() noexcept { return current(); }

  void record(std::function<void()> backward) {
    consumed_ = false;
    records_.push_back(std::move(backward));
  }

  std::size_t size() const noexcept { return records_.size(); }

  // Seeds d(root)/d(root) = 1 and runs every record once, newest first.
  void backward(Tensor root) {
    if (root.numel() != 1) {
      throw DimensionError("backward: root must be a scalar, got " + shape_str(root.shape()));
    }
    if (consumed_) throw StateError("backward: tape already consumed; clear() before reuse");
    root.mutable_grad()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  // Drops every closure and with them the intermediates they keep alive.
  void clear() {
    records_.clear();
    consumed_ = false;
  }

 private:
  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  std::vector<std::function<void()>> records_;
  bool consumed_ = false;
};

namespace detail {

inline Tape* recorder(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return tape;
  return nullptr;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` aligned to `out`, zero along broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t i = s.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = s[i] == 1 ? 0 : stride;
    stride *= s[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every element of the broadcast result.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  if (sa == out && sb == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const auto st_a = broadcast_strides(sa, out);
  const auto st_b = broadcast_strides(sb, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t k = out.size(); k-- > 0;) {
      ++idx[k];
      ia += st_a[k];
      ib += st_b[k];
      if (idx[k] < out[k]) break;
      ia -= st_a[k] * out[k];
      ib -= st_b[k] * out[k];
      idx[k] = 0;
    }
  }
}

// Elementwise binary op with broadcasting. da/db give the partial
// derivatives w.r.t. each operand from (a, b, out).
template <typename Fwd, typename Da, typename Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da da, Db db) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  Tensor out = Tensor::zeros(out_shape);
  {
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for_each_broadcast(out_shape, a.shape(), b.shape(),
                       [&](std::size_t io, std::size_t ia, std::size_t ib) { o[io] = fwd(x[ia], y[ib]); });
  }
  if (Tape* tape = recorder({&a, &b})) {
    out.set_requires_grad();
    tape->record([a, b, out, da, db]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto x = a.data();
      auto y = b.data();
      auto o = out.data();
      const bool need_a = a.requires_grad();
      const bool need_b = b.requires_grad();
      std::span<double> ga = need_a ? a.mutable_grad() : std::span<double>{};
      std::span<double> gb = need_b ? b.mutable_grad() : std::span<double>{};
      for_each_broadcast(out.shape(), a.shape(), b.shape(),
                         [&](std::size_t io, std::size_t ia, std::size_t ib) {
                           if (need_a) ga[ia] += g[io] * da(x[ia], y[ib], o[io]);
                           if (need_b) gb[ib] += g[io] * db(x[ia], y[ib], o[io]);
                         });
    });
  }
  return out;
}

// Elementwise unary op; d gives the derivative from (input, output).
template <typename Fwd, typename D>
Tensor unary_op(const Tensor& a, Fwd fwd, D d) {
  Tensor out = Tensor::zeros(a.shape());
  {
    auto o = out.data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(x[i]);
  }
  if (Tape* tape = recorder({&a})) {
    out.set_requires_grad();
    tape->record([a, out, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto x = a.data();
      auto o = out.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * d(x[i], o[i]);
    });
  }
  return out;
}

// Splits a shape around `axis` into (outer, extent, inner) for strided reductions.
struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) throw DimensionError(std::string(op) + ": axis out of range for " + shape_str(s));
  AxisSplit sp{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy broadcasting rules).

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// log(1 + e^x), evaluated without overflow.
inline double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

// Gradient passes only where the input exceeds the bound.
inline Tensor clamp_min(const Tensor& a, double lo) {
  return detail::unary_op(
      a, [lo](double x) { return x > lo ? x : lo; }, [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra.

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMatrix> as_matrix(const Tensor& t, std::size_t r, std::size_t c) {
  return {const_cast<double*>(t.data().data()), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

inline Eigen::Map<RowMatrix> as_grad_matrix(const Tensor& t, std::size_t r, std::size_t c) {
  return {t.mutable_grad().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  detail::as_matrix(out, m, n).noalias() = detail::as_matrix(a, m, k) * detail::as_matrix(b, k, n);
  if (Tape* tape = detail::recorder({&a, &b})) {
    out.set_requires_grad();
    tape->record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const auto g = detail::as_grad_matrix(out, m, n);
      if (a.requires_grad()) detail::as_grad_matrix(a, m, k).noalias() += g * detail::as_matrix(b, k, n).transpose();
      if (b.requires_grad()) detail::as_grad_matrix(b, k, n).noalias() += detail::as_matrix(a, m, k).transpose() * g;
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n, m});
  {
    auto o = out.data();
    auto x = a.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) o[j * m + i] = x[i * n + j];
  }
  if (Tape* tape = detail::recorder({&a})) {
    out.set_requires_grad();
    tape->record([a, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

// D[i][j] = ||x_i - y_j||^2, computed from explicit differences so that
// coincident points give exactly zero.
inline Tensor sq_distances(const Tensor& x, const Tensor& y) {
  detail::require_matrix(x, "sq_distances");
  detail::require_matrix(y, "sq_distances");
  if (x.cols() != y.cols()) {
    throw DimensionError("sq_distances: feature extents disagree, " + shape_str(x.shape()) + " vs " +
                         shape_str(y.shape()));
  }
  const std::size_t n = x.rows(), m = y.rows(), d = x.cols();
  Tensor out = Tensor::zeros({n, m});
  {
    auto o = out.data();
    auto a = x.data();
    auto b = y.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = a[i * d + k] - b[j * d + k];
          acc += diff * diff;
        }
        o[i * m + j] = acc;
      }
  }
  if (Tape* tape = detail::recorder({&x, &y})) {
    out.set_requires_grad();
    tape->record([x, y, out, n, m, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto a = x.data();
      auto b = y.data();
      const bool need_x = x.requires_grad(), need_y = y.requires_grad();
      std::span<double> gx = need_x ? x.mutable_grad() : std::span<double>{};
      std::span<double> gy = need_y ? y.mutable_grad() : std::span<double>{};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = 2.0 * g[i * m + j];
          if (gij == 0.0) continue;
          for (std::size_t k = 0; k < d; ++k) {
            const double diff = a[i * d + k] - b[j * d + k];
            if (need_x) gx[i * d + k] += gij * diff;
            if (need_y) gy[j * d + k] -= gij * diff;
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (Tape* tape = detail::recorder({&a})) {
    out.set_requires_grad();
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      for (double& v : a.mutable_grad()) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor sum(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis, "sum");
  Tensor out = Tensor::zeros(detail::drop_axis(a.shape(), axis));
  {
    auto o = out.data();
    auto x = a.data();
    for (std::size_t p = 0; p < sp.outer; ++p)
      for (std::size_t k = 0; k < sp.extent; ++k)
        for (std::size_t q = 0; q < sp.inner; ++q) o[p * sp.inner + q] += x[(p * sp.extent + k) * sp.inner + q];
  }
  if (Tape* tape = detail::recorder({&a})) {
    out.set_requires_grad();
    tape->record([a, out, sp]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t p = 0; p < sp.outer; ++p)
        for (std::size_t k = 0; k < sp.extent; ++k)
          for (std::size_t q = 0; q < sp.inner; ++q) ga[(p * sp.extent + k) * sp.inner + q] += g[p * sp.inner + q];
    });
  }
  return out;
}

// Max-shifted log-sum-exp along `axis`; the axis is removed from the shape.
inline Tensor logsumexp(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis, "logsumexp");
  if (sp.extent == 0) throw DimensionError("logsumexp: empty axis in " + shape_str(a.shape()));
  Tensor out = Tensor::zeros(detail::drop_axis(a.shape(), axis));
  {
    auto o = out.data();
    auto x = a.data();
    for (std::size_t p = 0; p < sp.outer; ++p)
      for (std::size_t q = 0; q < sp.inner; ++q) {
        auto at = [&](std::size_t k) { return x[(p * sp.extent + k) * sp.inner + q]; };
        double hi = at(0);
        for (std::size_t k = 1; k < sp.extent; ++k) hi = std::max(hi, at(k));
        if (std::isinf(hi)) {
          o[p * sp.inner + q] = hi;
          continue;
        }
        double acc = 0.0;
        for (std::size_t k = 0; k < sp.extent; ++k) acc += std::exp(at(k) - hi);
        o[p * sp.inner + q] = hi + std::log(acc);
      }
  }
  if (Tape* tape = detail::recorder({&a})) {
    out.set_requires_grad();
    tape->record([a, out, sp]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto o = out.data();
      auto x = a.data();
      auto ga = a.mutable_grad();
      for (std::size_t p = 0; p < sp.outer; ++p)
        for (std::size_t q = 0; q < sp.inner; ++q) {
          const double gv = g[p * sp.inner + q];
          const double lse = o[p * sp.inner + q];
          for (std::size_t k = 0; k < sp.extent; ++k) {
            const std::size_t i = (p * sp.extent + k) * sp.inner + q;
            ga[i] += gv * std::exp(x[i] - lse);
          }
        }
    });
  }
  return out;
}

// Largest of a list of scalars; the gradient flows to the first maximizer.
inline Tensor maximum(std::span<const Tensor> scalars) {
  if (scalars.empty()) throw ArgumentError("maximum: empty list");
  std::size_t best = 0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].numel() != 1) throw DimensionError("maximum: operands must be scalars");
    if (scalars[i].item() > scalars[best].item()) best = i;
  }
  Tensor out = Tensor::scalar(scalars[best].item());
  Tensor winner = scalars[best];
  if (Tape* tape = detail::recorder({&winner})) {
    out.set_requires_grad();
    tape->record([winner, out]() mutable {
      if (!out.has_grad()) return;
      winner.mutable_grad()[0] += out.grad()[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Indexing.

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  detail::require_matrix(a, "gather_rows");
  const std::size_t c = a.cols();
  Tensor out = Tensor::zeros({rows.size(), c});
  {
    auto o = out.data();
    auto x = a.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] >= a.rows()) throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " out of range");
      std::copy_n(&x[rows[r] * c], c, &o[r * c]);
    }
  }
  if (Tape* tape = detail::recorder({&a})) {
    out.set_requires_grad();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    tape->record([a, out, idx, c]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < c; ++j) ga[idx[r] * c + j] += g[r * c + j];
    });
  }
  return out;
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != c) throw DimensionError("concat_rows: column extents disagree");
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, c});
  {
    auto o = out.data();
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(off));
      off += p.numel();
    }
  }
  Tape* tape = Tape::active();
  const bool any = std::any_of(parts.begin(), parts.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (tape && any) {
    out.set_requires_grad();
    std::vector<Tensor> keep(parts.begin(), parts.end());
    tape->record([keep, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : keep) {
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses.

// Mean over rows of logsumexp(logits_i) - logits_i[label_i].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(n) + " rows but " + std::to_string(labels.size()) +
                         " labels");
  }
  if (n == 0 || c == 0) throw DimensionError("cross_entropy: empty logits " + shape_str(logits.shape()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  const Tensor lse = [&] {
    Tape::Pause pause;
    return logsumexp(logits, 1);
  }();
  double total = 0.0;
  auto z = logits.data();
  for (std::size_t i = 0; i < n; ++i) total += lse.at(i) - z[i * c + static_cast<std::size_t>(labels[i])];
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  if (Tape* tape = detail::recorder({&logits})) {
    out.set_requires_grad();
    std::vector<int> ys(labels.begin(), labels.end());
    tape->record([logits, lse, out, ys, n, c]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(n);
      auto z = logits.data();
      auto gz = logits.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double l = lse.at(i);
        for (std::size_t j = 0; j < c; ++j) gz[i * c + j] += g * std::exp(z[i * c + j] - l);
        gz[i * c + static_cast<std::size_t>(ys[i])] -= g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Compares the tape gradient of a scalar function with central differences.
// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3);
// the floor keeps near-zero components from amplifying round-off.
inline GradCheckResult gradient_check(const std::function<Tensor(std::span<Tensor>)>& fn,
                                      std::vector<Tensor> inputs, double eps = 1e-5) {
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor root = fn(inputs);
    tape.backward(root);
  }
  GradCheckResult res;
  Tape::Pause pause;
  for (auto& t : inputs) {
    std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                : std::vector<double>(t.numel(), 0.0);
    auto x = t.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + eps;
      const double up = fn(inputs).item();
      x[i] = orig - eps;
      const double down = fn(inputs).item();
      x[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      res.max_rel_error = std::max(res.max_rel_error, abs_err / denom);
      ++res.checked;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Parameter groups and SGD with momentum.

struct NamedTensor {
  std::string name;
  Tensor value;
};

using ParameterGroup = std::vector<NamedTensor>;

inline void zero_grad(ParameterGroup& group) {
  for (auto& p : group) p.value.zero_grad();
}

inline std::size_t parameter_count(const ParameterGroup& group) {
  std::size_t n = 0;
  for (const auto& p : group) n += p.value.numel();
  return n;
}

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// v <- momentum * v + g + weight_decay * p ;  p <- p - lr * v
// The velocity buffers are keyed by parameter name.
class Sgd {
 public:
  explicit Sgd(SgdOptions options = {}) : options_(options) {}

  const SgdOptions& options() const noexcept { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

  void step(ParameterGroup& group) {
    for (const auto& p : group)
      if (!p.value.has_grad()) throw StateError("sgd_step: parameter '" + p.name + "' has no gradient");
    for (auto& p : group) {
      auto& v = velocity_[p.name];
      auto w = p.value.data();
      auto g = p.value.grad();
      if (v.size() != w.size()) v.assign(w.size(), 0.0);
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = options_.momentum * v[i] + g[i] + options_.weight_decay * w[i];
        w[i] -= options_.lr * v[i];
      }
    }
  }

  void reset() { velocity_.clear(); }

  const std::map<std::string, std::vector<double>>& velocity() const noexcept { return velocity_; }
  void set_velocity(std::map<std::string, std::vector<double>> v) { velocity_ = std::move(v); }

 private:
  SgdOptions options_;
  std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace caood
