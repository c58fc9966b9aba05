#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "molre/errors.hpp"
#include "molre/flops.hpp"
#include "molre/rng.hpp"

namespace molre {

namespace detail {

// One node of the autodiff graph. Leaves have no op and no backward rule.
// Values are immutable after construction (parameters are leaves whose data
// the optimizer rewrites between graphs); `grad` is the only field mutated
// during a backward sweep. Parent links are fixed at construction, so the
// graph is acyclic by construction.
struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  mutable std::vector<double> grad;  // sized lazily, zeros until touched

  const char* op = nullptr;
  std::vector<std::shared_ptr<TensorData>> parents;
  std::function<void(const TensorData&)> backward;

  std::size_t size() const { return data.size(); }

  std::vector<double>& ensure_grad() const {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

// Thread-local autodiff switch; see NoGradGuard.
inline thread_local bool grad_enabled = true;

// Kink tracing for finite-difference checks. While a trace is installed,
// relu/abs/clamp record the signed distance of every element to their
// breakpoint. Comparing the traces of two perturbed evaluations tells a
// gradient checker whether the perturbation crossed a non-differentiable
// point.
inline thread_local std::vector<double>* kink_trace = nullptr;

inline void trace_kink(double signed_distance) {
  if (kink_trace != nullptr) kink_trace->push_back(signed_distance);
}

}  // namespace detail

namespace testing_hooks {
// When set to an op name, backward() perturbs that op's incoming gradient so
// its analytic gradients stop matching finite differences. Fixture for the
// gradcheck harness's negative path; never set in production code.
inline thread_local std::string corrupt_backward_op;  // NOLINT
}  // namespace testing_hooks

/// Disables graph construction for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Installs a kink trace on the current thread while alive.
class KinkTraceGuard {
 public:
  explicit KinkTraceGuard(std::vector<double>* trace) { detail::kink_trace = trace; }
  ~KinkTraceGuard() { detail::kink_trace = nullptr; }
  KinkTraceGuard(const KinkTraceGuard&) = delete;
  KinkTraceGuard& operator=(const KinkTraceGuard&) = delete;
};

/// Dense row-major tensor of doubles participating in a reverse-mode
/// autodiff graph. Copies share storage (handle semantics).
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorData>()) {}

  /// Internal: wrap an existing node.
  explicit Tensor(std::shared_ptr<detail::TensorData> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(std::vector<std::size_t> shape) { return full(std::move(shape), 0.0); }

  static Tensor full(std::vector<std::size_t> shape, double value) {
    auto impl = std::make_shared<detail::TensorData>();
    impl->data.assign(detail::shape_numel(shape), value);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values) {
    if (detail::shape_numel(shape) != values.size()) {
      throw ShapeError("Tensor::from: shape " + detail::shape_str(shape) + " wants " +
                       std::to_string(detail::shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto impl = std::make_shared<detail::TensorData>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  /// Uniform draws in (-bound, bound).
  static Tensor uniform(std::vector<std::size_t> shape, double bound, Rng& rng) {
    auto t = zeros(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
  }

  /// Fan-in scaled init: uniform with bound 1/sqrt(fan_in).
  static Tensor fan_in_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    if (fan_in == 0) throw ValueError("fan_in_uniform: fan_in must be positive");
    return uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
  }

  static Tensor normal(std::vector<std::size_t> shape, double stddev, Rng& rng) {
    auto t = zeros(std::move(shape));
    for (double& v : t.values()) v = stddev * rng.normal();
    return t;
  }

  bool defined() const { return !impl_->shape.empty(); }
  const std::vector<std::size_t>& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }

  const std::vector<double>& values() const { return impl_->data; }
  /// Mutable data access; used by optimizers between steps and by fillers
  /// right after construction. Never mutate a tensor that is already part
  /// of a graph.
  std::vector<double>& values() { return impl_->data; }

  double item() const {
    if (size() != 1) {
      throw ShapeError("item: tensor has shape " + detail::shape_str(shape()) +
                       ", expected a single element");
    }
    return impl_->data[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) {
      throw ShapeError("at: index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                       std::to_string(rank()));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      flat = flat * impl_->shape[axis] + i;
      ++axis;
    }
    return impl_->data[flat];
  }

  /// Gradient buffer (zeros if backward never reached this tensor).
  const std::vector<double>& grad() const { return impl_->ensure_grad(); }

  void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

  const char* op_name() const { return impl_->op ? impl_->op : "leaf"; }
  bool is_leaf() const { return impl_->op == nullptr; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Reverse-mode sweep from a scalar. Gradients accumulate additively into
  /// every reachable tensor's grad buffer.
  void backward() const {
    if (size() != 1) {
      throw ValueError("backward: loss must be scalar, got shape " + detail::shape_str(shape()));
    }
    std::vector<detail::TensorData*> order = topo_order();
    impl_->ensure_grad()[0] = 1.0;
    const std::string& corrupt = testing_hooks::corrupt_backward_op;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::TensorData* node = *it;
      if (!node->backward) continue;
      if (node->grad.size() != node->data.size()) continue;  // no gradient reached this node
      if (!corrupt.empty() && node->op != nullptr && corrupt == node->op) {
        std::vector<double> saved = node->grad;
        for (double& g : node->grad) g *= 1.25;
        node->backward(*node);
        node->grad = std::move(saved);
      } else {
        node->backward(*node);
      }
    }
  }

  const std::shared_ptr<detail::TensorData>& impl() const { return impl_; }

 private:
  std::vector<detail::TensorData*> topo_order() const {
    std::vector<detail::TensorData*> order;
    std::unordered_set<detail::TensorData*> visited;
    // Iterative post-order: parents land before children, reverse gives the
    // backward sweep order.
    std::vector<std::pair<detail::TensorData*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::TensorData* parent = node->parents[next].get();
        ++next;
        if (visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<detail::TensorData> impl_;
};

namespace detail {

inline Tensor make_result(std::vector<std::size_t> shape, std::vector<double> data, const char* op,
                          std::vector<Tensor> parents,
                          std::function<void(const TensorData&)> backward) {
  auto impl = std::make_shared<TensorData>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (grad_enabled) {
    impl->op = op;
    impl->parents.reserve(parents.size());
    for (const Tensor& p : parents) impl->parents.push_back(p.impl());
    impl->backward = std::move(backward);
  }
  return Tensor(std::move(impl));
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

inline void check_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor argument");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_defined("add", a);
  detail::check_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  flops::detail::add(flops::elementwise(out.size()));
  auto pa = a.impl();
  auto pb = b.impl();
  return detail::make_result(a.shape(), std::move(out), "add", {a, b},
                             [pa, pb](const detail::TensorData& self) {
                               auto& ga = pa->ensure_grad();
                               auto& gb = pb->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 ga[i] += self.grad[i];
                                 gb[i] += self.grad[i];
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_defined("sub", a);
  detail::check_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  flops::detail::add(flops::elementwise(out.size()));
  auto pa = a.impl();
  auto pb = b.impl();
  return detail::make_result(a.shape(), std::move(out), "sub", {a, b},
                             [pa, pb](const detail::TensorData& self) {
                               auto& ga = pa->ensure_grad();
                               auto& gb = pb->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 ga[i] += self.grad[i];
                                 gb[i] -= self.grad[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_defined("mul", a);
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  flops::detail::add(flops::elementwise(out.size()));
  auto pa = a.impl();
  auto pb = b.impl();
  return detail::make_result(a.shape(), std::move(out), "mul", {a, b},
                             [pa, pb](const detail::TensorData& self) {
                               auto& ga = pa->ensure_grad();
                               auto& gb = pb->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 ga[i] += pb->data[i] * self.grad[i];
                                 gb[i] += pa->data[i] * self.grad[i];
                               }
                             });
}

/// Multiply by a compile-time-known constant.
inline Tensor scale(const Tensor& x, double c) {
  detail::check_defined("scale", x);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.values()[i];
  flops::detail::add(flops::elementwise(out.size()));
  auto px = x.impl();
  return detail::make_result(x.shape(), std::move(out), "scale", {x},
                             [px, c](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 gx[i] += c * self.grad[i];
                               }
                             });
}

/// Multiply by a one-element tensor (gradient flows into both arguments);
/// this is how routed expert outputs are weighted by their gates.
inline Tensor scalar_mul(const Tensor& x, const Tensor& s) {
  detail::check_defined("scalar_mul", x);
  if (s.size() != 1) {
    throw ShapeError("scalar_mul: scale tensor has shape " + detail::shape_str(s.shape()) +
                     ", expected a single element");
  }
  const double sv = s.values()[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x.values()[i];
  flops::detail::add(flops::elementwise(out.size()));
  auto px = x.impl();
  auto ps = s.impl();
  return detail::make_result(x.shape(), std::move(out), "scalar_mul", {x, s},
                             [px, ps, sv](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               auto& gs = ps->ensure_grad();
                               double acc = 0.0;
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 gx[i] += sv * self.grad[i];
                                 acc += px->data[i] * self.grad[i];
                               }
                               gs[0] += acc;
                             });
}

inline Tensor relu(const Tensor& x) {
  detail::check_defined("relu", x);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    detail::trace_kink(x.values()[i]);
    out[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  }
  flops::detail::add(flops::elementwise(out.size()));
  auto px = x.impl();
  return detail::make_result(x.shape(), std::move(out), "relu", {x},
                             [px](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 if (px->data[i] > 0.0) gx[i] += self.grad[i];
                               }
                             });
}

inline Tensor abs(const Tensor& x) {
  detail::check_defined("abs", x);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    detail::trace_kink(x.values()[i]);
    out[i] = std::fabs(x.values()[i]);
  }
  flops::detail::add(flops::elementwise(out.size()));
  auto px = x.impl();
  return detail::make_result(x.shape(), std::move(out), "abs", {x},
                             [px](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 const double v = px->data[i];
                                 const double sign = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                                 gx[i] += sign * self.grad[i];
                               }
                             });
}

inline Tensor sigmoid(const Tensor& x) {
  detail::check_defined("sigmoid", x);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  flops::detail::add(flops::sigmoid(out.size()));
  auto px = x.impl();
  return detail::make_result(x.shape(), std::move(out), "sigmoid", {x},
                             [px](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 const double y = self.data[i];
                                 gx[i] += y * (1.0 - y) * self.grad[i];
                               }
                             });
}

inline Tensor log(const Tensor& x) {
  detail::check_defined("log", x);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x.values()[i] > 0.0)) {
      throw ValueError("log: non-positive input " + std::to_string(x.values()[i]) +
                       " at flat index " + std::to_string(i));
    }
    out[i] = std::log(x.values()[i]);
  }
  flops::detail::add(flops::elementwise(out.size()));
  auto px = x.impl();
  return detail::make_result(x.shape(), std::move(out), "log", {x},
                             [px](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 gx[i] += self.grad[i] / px->data[i];
                               }
                             });
}

/// Clamp into [lo, hi]; gradient passes through strictly inside the range and
/// is zero outside (and exactly at the boundary). Boundary proximity is
/// reported to the kink trace.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  detail::check_defined("clamp", x);
  if (!(lo < hi)) throw ValueError("clamp: lo must be < hi");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    detail::trace_kink(v - lo);
    detail::trace_kink(v - hi);
    out[i] = std::min(std::max(v, lo), hi);
  }
  flops::detail::add(flops::elementwise(out.size()));
  auto px = x.impl();
  return detail::make_result(x.shape(), std::move(out), "clamp", {x},
                             [px, lo, hi](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 const double v = px->data[i];
                                 if (v > lo && v < hi) gx[i] += self.grad[i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_defined("matmul", a);
  detail::check_defined("matmul", b);
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 operands, got " + detail::shape_str(a.shape()) +
                     " and " + detail::shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ, " + detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = av[i * k + kk];
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aik * bv[kk * n + j];
    }
  }
  flops::detail::add(flops::matmul(m, k, n));
  auto pa = a.impl();
  auto pb = b.impl();
  return detail::make_result({m, n}, std::move(out), "matmul", {a, b},
                             [pa, pb, m, k, n](const detail::TensorData& self) {
                               auto& ga = pa->ensure_grad();
                               auto& gb = pb->ensure_grad();
                               // dA = dY * B^T, dB = A^T * dY
                               for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                   const double g = self.grad[i * n + j];
                                   if (g == 0.0) continue;
                                   for (std::size_t kk = 0; kk < k; ++kk) {
                                     ga[i * k + kk] += g * pb->data[kk * n + j];
                                     gb[kk * n + j] += g * pa->data[i * k + kk];
                                   }
                                 }
                               }
                             });
}

inline Tensor transpose(const Tensor& x) {
  detail::check_defined("transpose", x);
  if (x.rank() != 2) {
    throw ShapeError("transpose: expects rank 2, got " + detail::shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.values()[i * c + j];
  }
  auto px = x.impl();
  return detail::make_result({c, r}, std::move(out), "transpose", {x},
                             [px, r, c](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t i = 0; i < r; ++i) {
                                 for (std::size_t j = 0; j < c; ++j) {
                                   gx[i * c + j] += self.grad[j * r + i];
                                 }
                               }
                             });
}

/// Add a length-C bias vector to every row of an R x C matrix.
inline Tensor add_bias(const Tensor& m, const Tensor& v) {
  detail::check_defined("add_bias", m);
  if (m.rank() != 2 || v.rank() != 1) {
    throw ShapeError("add_bias: expects matrix + vector, got " + detail::shape_str(m.shape()) +
                     " and " + detail::shape_str(v.shape()));
  }
  const std::size_t rows = m.shape()[0], cols = m.shape()[1];
  if (v.shape()[0] != cols) {
    throw ShapeError("add_bias: bias width " + std::to_string(v.shape()[0]) +
                     " does not match matrix columns " + std::to_string(cols));
  }
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = m.values()[i * cols + j] + v.values()[j];
  }
  flops::detail::add(flops::elementwise(out.size()));
  auto pm = m.impl();
  auto pv = v.impl();
  return detail::make_result(m.shape(), std::move(out), "add_bias", {m, v},
                             [pm, pv, rows, cols](const detail::TensorData& self) {
                               auto& gm = pm->ensure_grad();
                               auto& gv = pv->ensure_grad();
                               for (std::size_t i = 0; i < rows; ++i) {
                                 for (std::size_t j = 0; j < cols; ++j) {
                                   const double g = self.grad[i * cols + j];
                                   gm[i * cols + j] += g;
                                   gv[j] += g;
                                 }
                               }
                             });
}

/// 1-D convolution over a T x C_in sequence with a K x C_in x C_out kernel
/// and a C_out bias; zero padding on both ends. Output is T' x C_out with
/// T' = T + 2*padding - K + 1.
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t padding) {
  detail::check_defined("conv1d", x);
  if (x.rank() != 2 || w.rank() != 3 || b.rank() != 1) {
    throw ShapeError("conv1d: expects x rank 2, w rank 3, b rank 1; got " +
                     detail::shape_str(x.shape()) + ", " + detail::shape_str(w.shape()) + ", " +
                     detail::shape_str(b.shape()));
  }
  const std::size_t t_in = x.shape()[0], c_in = x.shape()[1];
  const std::size_t kernel = w.shape()[0], wc_in = w.shape()[1], c_out = w.shape()[2];
  if (c_in != wc_in) {
    throw ShapeError("conv1d: input channels " + std::to_string(c_in) +
                     " do not match kernel input channels " + std::to_string(wc_in));
  }
  if (b.shape()[0] != c_out) {
    throw ShapeError("conv1d: bias width " + std::to_string(b.shape()[0]) +
                     " does not match output channels " + std::to_string(c_out));
  }
  const std::ptrdiff_t t_out_signed =
      static_cast<std::ptrdiff_t>(t_in) + 2 * static_cast<std::ptrdiff_t>(padding) -
      static_cast<std::ptrdiff_t>(kernel) + 1;
  if (t_out_signed < 1) {
    throw ShapeError("conv1d: output length " + std::to_string(t_out_signed) +
                     " (T=" + std::to_string(t_in) + ", K=" + std::to_string(kernel) +
                     ", padding=" + std::to_string(padding) + ") must be >= 1");
  }
  const std::size_t t_out = static_cast<std::size_t>(t_out_signed);

  std::vector<double> out(t_out * c_out);
  const auto& xv = x.values();
  const auto& wv = w.values();
  for (std::size_t t = 0; t < t_out; ++t) {
    for (std::size_t co = 0; co < c_out; ++co) out[t * c_out + co] = b.values()[co];
    for (std::size_t kk = 0; kk < kernel; ++kk) {
      const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + kk) -
                                static_cast<std::ptrdiff_t>(padding);
      if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(t_in)) continue;
      for (std::size_t ci = 0; ci < c_in; ++ci) {
        const double xval = xv[static_cast<std::size_t>(ti) * c_in + ci];
        if (xval == 0.0) continue;
        const double* wrow = &wv[(kk * c_in + ci) * c_out];
        double* orow = &out[t * c_out];
        for (std::size_t co = 0; co < c_out; ++co) orow[co] += xval * wrow[co];
      }
    }
  }
  flops::detail::add(flops::conv1d(t_out, kernel, c_in, c_out));
  auto px = x.impl();
  auto pw = w.impl();
  auto pb = b.impl();
  return detail::make_result(
      {t_out, c_out}, std::move(out), "conv1d", {x, w, b},
      [px, pw, pb, t_in, c_in, kernel, c_out, t_out, padding](const detail::TensorData& self) {
        auto& gx = px->ensure_grad();
        auto& gw = pw->ensure_grad();
        auto& gb = pb->ensure_grad();
        for (std::size_t t = 0; t < t_out; ++t) {
          const double* grow = &self.grad[t * c_out];
          for (std::size_t co = 0; co < c_out; ++co) gb[co] += grow[co];
          for (std::size_t kk = 0; kk < kernel; ++kk) {
            const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + kk) -
                                      static_cast<std::ptrdiff_t>(padding);
            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(t_in)) continue;
            const std::size_t tu = static_cast<std::size_t>(ti);
            for (std::size_t ci = 0; ci < c_in; ++ci) {
              const double xval = px->data[tu * c_in + ci];
              const double* wrow = &pw->data[(kk * c_in + ci) * c_out];
              double* gwrow = &gw[(kk * c_in + ci) * c_out];
              double acc = 0.0;
              for (std::size_t co = 0; co < c_out; ++co) {
                acc += grow[co] * wrow[co];
                gwrow[co] += grow[co] * xval;
              }
              gx[tu * c_in + ci] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions, shape ops
// ---------------------------------------------------------------------------

/// Numerically stable softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
  detail::check_defined("softmax", x);
  const std::size_t width = x.shape().back();
  if (width == 0) throw ShapeError("softmax: last axis is empty");
  for (double v : x.values()) {
    if (!std::isfinite(v)) throw ValueError("softmax: non-finite input value");
  }
  const std::size_t slices = x.size() / width;
  std::vector<double> out(x.size());
  for (std::size_t s = 0; s < slices; ++s) {
    const double* in = &x.values()[s * width];
    double* o = &out[s * width];
    double maxv = in[0];
    for (std::size_t j = 1; j < width; ++j) maxv = std::max(maxv, in[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      o[j] = std::exp(in[j] - maxv);
      sum += o[j];
    }
    for (std::size_t j = 0; j < width; ++j) o[j] /= sum;
  }
  flops::detail::add(flops::softmax(x.size()));
  auto px = x.impl();
  return detail::make_result(x.shape(), std::move(out), "softmax", {x},
                             [px, slices, width](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t s = 0; s < slices; ++s) {
                                 const double* y = &self.data[s * width];
                                 const double* dy = &self.grad[s * width];
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < width; ++j) dot += y[j] * dy[j];
                                 for (std::size_t j = 0; j < width; ++j) {
                                   gx[s * width + j] += y[j] * (dy[j] - dot);
                                 }
                               }
                             });
}

/// Mean over one axis; the axis disappears from the shape (a rank-1 input
/// collapses to a one-element tensor).
inline Tensor mean(const Tensor& x, std::size_t axis) {
  detail::check_defined("mean", x);
  if (axis >= x.rank()) {
    throw ShapeError("mean: axis " + std::to_string(axis) + " out of range for shape " +
                     detail::shape_str(x.shape()));
  }
  const std::size_t alen = x.shape()[axis];
  if (alen == 0) {
    throw ShapeError("mean: axis " + std::to_string(axis) +
                     " has length 0, pooling undefined for shape " + detail::shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  std::vector<std::size_t> out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.shape()[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t a = 0; a < alen; ++a) {
      const double* in = &x.values()[(o * alen + a) * inner];
      double* dst = &out[o * inner];
      for (std::size_t i = 0; i < inner; ++i) dst[i] += in[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(alen);
  for (double& v : out) v *= inv;
  flops::detail::add(flops::mean(x.size(), outer * inner));
  auto px = x.impl();
  return detail::make_result(std::move(out_shape), std::move(out), "mean", {x},
                             [px, outer, alen, inner, inv](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t a = 0; a < alen; ++a) {
                                   double* dst = &gx[(o * alen + a) * inner];
                                   const double* g = &self.grad[o * inner];
                                   for (std::size_t i = 0; i < inner; ++i) dst[i] += inv * g[i];
                                 }
                               }
                             });
}

/// Sum of all elements, returned as a one-element tensor.
inline Tensor sum(const Tensor& x) {
  detail::check_defined("sum", x);
  double total = 0.0;
  for (double v : x.values()) total += v;
  flops::detail::add(flops::elementwise(x.size()));
  auto px = x.impl();
  return detail::make_result({1}, {total}, "sum", {x}, [px](const detail::TensorData& self) {
    auto& gx = px->ensure_grad();
    for (double& g : gx) g += self.grad[0];
  });
}

/// Per-row normalization of a T x d matrix: (x - mean) / sqrt(var + 1e-5).
/// No affine parameters.
inline Tensor layer_norm(const Tensor& x) {
  detail::check_defined("layer_norm", x);
  if (x.rank() != 2) {
    throw ShapeError("layer_norm: expects rank 2, got " + detail::shape_str(x.shape()));
  }
  constexpr double kEps = 1e-5;
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (cols == 0) throw ShapeError("layer_norm: empty rows");
  std::vector<double> out(x.size());
  std::vector<double> rstds(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = &x.values()[i * cols];
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += in[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(cols);
    const double rstd = 1.0 / std::sqrt(var + kEps);
    rstds[i] = rstd;
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = (in[j] - mu) * rstd;
  }
  flops::detail::add(flops::layer_norm(x.size()));
  auto px = x.impl();
  return detail::make_result(
      x.shape(), std::move(out), "layer_norm", {x},
      [px, rows, cols, rstds](const detail::TensorData& self) {
        auto& gx = px->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i) {
          const double* y = &self.data[i * cols];
          const double* dy = &self.grad[i * cols];
          double dy_mean = 0.0, dyy_mean = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            dy_mean += dy[j];
            dyy_mean += dy[j] * y[j];
          }
          dy_mean /= static_cast<double>(cols);
          dyy_mean /= static_cast<double>(cols);
          for (std::size_t j = 0; j < cols; ++j) {
            gx[i * cols + j] += (dy[j] - dy_mean - y[j] * dyy_mean) * rstds[i];
          }
        }
      });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no parts given");
  const std::size_t rank = parts[0].rank();
  if (axis >= rank) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  std::vector<std::size_t> out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    detail::check_defined("concat", p);
    if (p.rank() != rank) {
      throw ShapeError("concat: mixed ranks " + std::to_string(rank) + " and " +
                       std::to_string(p.rank()));
    }
    for (std::size_t i = 0; i < rank; ++i) {
      if (i != axis && p.shape()[i] != parts[0].shape()[i]) {
        throw ShapeError("concat: shapes " + detail::shape_str(parts[0].shape()) + " and " +
                         detail::shape_str(p.shape()) + " differ off-axis");
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < rank; ++i) inner *= out_shape[i];

  std::vector<double> out(detail::shape_numel(out_shape));
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;  // in axis units
  std::vector<std::size_t> offsets(parts.size());
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    offsets[pi] = offset;
    const std::size_t plen = parts[pi].shape()[axis];
    const auto& pv = parts[pi].values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pv.begin() + static_cast<std::ptrdiff_t>(o * plen * inner),
                pv.begin() + static_cast<std::ptrdiff_t>((o + 1) * plen * inner),
                out.begin() + static_cast<std::ptrdiff_t>(o * out_row + offset * inner));
    }
    offset += plen;
  }
  std::vector<std::shared_ptr<detail::TensorData>> impls;
  impls.reserve(parts.size());
  for (const Tensor& p : parts) impls.push_back(p.impl());
  std::vector<std::size_t> plens(parts.size());
  for (std::size_t pi = 0; pi < parts.size(); ++pi) plens[pi] = parts[pi].shape()[axis];
  return detail::make_result(
      out_shape, std::move(out), "concat", parts,
      [impls, offsets, plens, outer, inner, out_row](const detail::TensorData& self) {
        for (std::size_t pi = 0; pi < impls.size(); ++pi) {
          const std::size_t block = plens[pi] * inner;
          if (block == 0) continue;
          auto& gp = impls[pi]->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = &self.grad[o * out_row + offsets[pi] * inner];
            double* dst = &gp[o * block];
            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
      });
}

/// Contiguous slice [start, stop) along one axis.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop) {
  detail::check_defined("slice", x);
  if (axis >= x.rank()) {
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for shape " +
                     detail::shape_str(x.shape()));
  }
  if (start >= stop || stop > x.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(stop) +
                     ") invalid for axis length " + std::to_string(x.shape()[axis]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t alen = x.shape()[axis];
  const std::size_t slen = stop - start;

  std::vector<std::size_t> out_shape = x.shape();
  out_shape[axis] = slen;
  std::vector<double> out(outer * slen * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(x.values().begin() + static_cast<std::ptrdiff_t>((o * alen + start) * inner),
              x.values().begin() + static_cast<std::ptrdiff_t>((o * alen + stop) * inner),
              out.begin() + static_cast<std::ptrdiff_t>(o * slen * inner));
  }
  auto px = x.impl();
  return detail::make_result(std::move(out_shape), std::move(out), "slice", {x},
                             [px, outer, alen, inner, start, slen](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t o = 0; o < outer; ++o) {
                                 const double* src = &self.grad[o * slen * inner];
                                 double* dst = &gx[(o * alen + start) * inner];
                                 for (std::size_t i = 0; i < slen * inner; ++i) dst[i] += src[i];
                               }
                             });
}

inline Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
  detail::check_defined("reshape", x);
  if (detail::shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + detail::shape_str(x.shape()) + " as " +
                     detail::shape_str(shape));
  }
  auto px = x.impl();
  return detail::make_result(std::move(shape), x.values(), "reshape", {x},
                             [px](const detail::TensorData& self) {
                               auto& gx = px->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 gx[i] += self.grad[i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Composite: scaled dot-product attention
// ---------------------------------------------------------------------------

/// softmax(Q K^T / sqrt(d)) V, single head. Built from primitives, so the
/// backward pass comes for free.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  detail::check_defined("attention", q);
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw ShapeError("attention: expects rank-2 Q, K, V");
  }
  if (q.shape()[1] != k.shape()[1]) {
    throw ShapeError("attention: Q width " + std::to_string(q.shape()[1]) +
                     " does not match K width " + std::to_string(k.shape()[1]));
  }
  if (k.shape()[0] != v.shape()[0]) {
    throw ShapeError("attention: K length " + std::to_string(k.shape()[0]) +
                     " does not match V length " + std::to_string(v.shape()[0]));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  return matmul(softmax(scores), v);
}

// Operator sugar.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }

}  // namespace molre
