#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A BasicTensor is a cheap handle onto a shared graph node. Operations build
// the graph eagerly while gradient recording is enabled; backward() walks it
// once in reverse topological order. Leaf gradients accumulate across calls
// until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "efllm/error.hpp"
#include "efllm/rng.hpp"

namespace efllm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
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

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (numel_of(shape) != data.size()) {
      throw DimensionError("tensor data size " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  static BasicTensor full(Shape shape, T fill, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static BasicTensor scalar(T v, bool requires_grad = false) {
    return BasicTensor({1}, {v}, requires_grad);
  }

  static BasicTensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
    const auto n = numel_of(shape);
    std::vector<T> data(n);
    for (auto& x : data) x = static_cast<T>(rng.normal(0.0, stddev));
    return BasicTensor(std::move(shape), std::move(data), requires_grad);
  }

  static BasicTensor from_node(NodePtr node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.size() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->value; }
  // Direct write access; used by optimizers and initializers on leaf tensors.
  std::span<T> mutable_data() { return node_->value; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T{0}); }

  const char* op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

  // Detached deep copy sharing nothing with this tensor.
  BasicTensor clone(bool requires_grad) const {
    return BasicTensor(shape(), node_->value, requires_grad);
  }

  // Same values in another scalar type (used for double-precision checks).
  template <class U>
  BasicTensor<U> cast(bool requires_grad) const {
    std::vector<U> v(node_->value.begin(), node_->value.end());
    return BasicTensor<U>(shape(), std::move(v), requires_grad);
  }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (const T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <class T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                           std::vector<std::shared_ptr<Node<T>>> parents,
                           std::function<void(Node<T>&)> backward_fn) {
  check_finite(value, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool needs = grad_enabled() &&
                     std::any_of(parents.begin(), parents.end(),
                                 [](const auto& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <class T>
void require_matrix(const BasicTensor<T>& t, const char* op) {
  if (t.dim() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph traversal

// Nodes reachable from `root` that take part in differentiation, ordered so
// every node appears after all of its parents.
template <class T>
std::vector<detail::Node<T>*> topological_order(const BasicTensor<T>& root) {
  std::vector<detail::Node<T>*> order;
  if (!root.requires_grad()) return order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
template <class T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  const auto order = topological_order(loss);
  if (order.empty()) return;
  for (auto* node : order) {
    if (node->backward_fn) node->grad.assign(node->value.size(), T{0});
  }
  loss.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Operations

// a[m x k] * b[k x n]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T{0});
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {pa, pb},
                                [pa, pb, m, k, n](detail::Node<T>& self) {
                                  const T* G = self.grad.data();
                                  if (pa->requires_grad) {
                                    auto& ga = pa->grad_buffer();
                                    const T* Bv = pb->value.data();
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t p = 0; p < k; ++p) {
                                        T s{0};
                                        for (std::size_t j = 0; j < n; ++j)
                                          s += G[i * n + j] * Bv[p * n + j];
                                        ga[i * k + p] += s;
                                      }
                                  }
                                  if (pb->requires_grad) {
                                    auto& gb = pb->grad_buffer();
                                    const T* Av = pa->value.data();
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t p = 0; p < k; ++p) {
                                        const T av = Av[i * k + p];
                                        for (std::size_t j = 0; j < n; ++j)
                                          gb[p * n + j] += av * G[i * n + j];
                                      }
                                  }
                                });
}

// a[m x k] * b[n x k]^T; linear layers store weights as [out x in].
template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s{0};
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      out[i * n + j] = s;
    }
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>("matmul_nt", {m, n}, std::move(out), {pa, pb},
                                [pa, pb, m, k, n](detail::Node<T>& self) {
                                  const T* G = self.grad.data();
                                  if (pa->requires_grad) {
                                    auto& ga = pa->grad_buffer();
                                    const T* Bv = pb->value.data();
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) {
                                        const T g = G[i * n + j];
                                        for (std::size_t p = 0; p < k; ++p)
                                          ga[i * k + p] += g * Bv[j * k + p];
                                      }
                                  }
                                  if (pb->requires_grad) {
                                    auto& gb = pb->grad_buffer();
                                    const T* Av = pa->value.data();
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) {
                                        const T g = G[i * n + j];
                                        for (std::size_t p = 0; p < k; ++p)
                                          gb[j * k + p] += g * Av[i * k + p];
                                      }
                                  }
                                });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  auto pa = a.node();
  return detail::make_result<T>("transpose", {n, m}, std::move(out), {pa},
                                [pa, m, n](detail::Node<T>& self) {
                                  auto& ga = pa->grad_buffer();
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < n; ++j)
                                      ga[i * n + j] += self.grad[j * m + i];
                                });
}

// Elementwise sum of equal shapes, or bias-add of a 1-D tensor over the last axis.
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const bool same = a.shape() == b.shape();
  const bool bias = !same && b.dim() == 1 && b.numel() == a.cols();
  if (!same && !bias) {
    throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " + " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  const std::size_t n = b.numel();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[same ? i : i % n];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>("add", a.shape(), std::move(out), {pa, pb},
                                [pa, pb, same, n](detail::Node<T>& self) {
                                  if (pa->requires_grad) {
                                    auto& ga = pa->grad_buffer();
                                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                                  }
                                  if (pb->requires_grad) {
                                    auto& gb = pb->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      gb[same ? i : i % n] += self.grad[i];
                                  }
                                });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& x : out) x *= s;
  auto pa = a.node();
  return detail::make_result<T>("scale", a.shape(), std::move(out), {pa},
                                [pa, s](detail::Node<T>& self) {
                                  auto& ga = pa->grad_buffer();
                                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
                                });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& x : out) x = x > T{0} ? x : T{0};
  auto pa = a.node();
  return detail::make_result<T>("relu", a.shape(), std::move(out), {pa},
                                [pa](detail::Node<T>& self) {
                                  auto& ga = pa->grad_buffer();
                                  for (std::size_t i = 0; i < ga.size(); ++i)
                                    if (pa->value[i] > T{0}) ga[i] += self.grad[i];
                                });
}

// Sum of all entries, as a one-element tensor.
template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T s{0};
  for (const T x : a.data()) s += x;
  auto pa = a.node();
  return detail::make_result<T>("sum", {1}, {s}, {pa}, [pa](detail::Node<T>& self) {
    auto& ga = pa->grad_buffer();
    for (auto& g : ga) g += self.grad[0];
  });
}

namespace detail {

// View of a shape as [outer, axis, inner] around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Shared softmax backward: g_in = y * (g - sum(g * y)) along each lane.
template <class T>
void softmax_backward(const std::vector<T>& y, const std::vector<T>& g, std::vector<T>& gin,
                      AxisSplit s) {
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T dot{0};
      for (std::size_t i = 0; i < s.len; ++i) dot += g[base + i * s.inner] * y[base + i * s.inner];
      for (std::size_t i = 0; i < s.len; ++i) {
        const std::size_t idx = base + i * s.inner;
        gin[idx] += y[idx] * (g[idx] - dot);
      }
    }
}

}  // namespace detail

// Numerically stabilized softmax along `axis`.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  const T* v = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = v[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, v[base + i * s.inner]);
      T total{0};
      for (std::size_t i = 0; i < s.len; ++i) {
        const T e = std::exp(v[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] /= total;
    }
  auto px = x.node();
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {px},
                                [px, s](detail::Node<T>& self) {
                                  detail::softmax_backward(self.value, self.grad, px->grad_buffer(), s);
                                });
}

// Row-wise softmax of a square score matrix where entry (i, j) with j > i is
// masked out (probability exactly zero).
template <class T>
BasicTensor<T> causal_softmax(const BasicTensor<T>& scores) {
  detail::require_matrix(scores, "causal_softmax");
  const std::size_t n = scores.shape()[0];
  if (scores.shape()[1] != n) throw DimensionError("causal_softmax expects a square matrix");
  std::vector<T> out(n * n, T{0});
  const T* v = scores.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    T mx = v[i * n];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, v[i * n + j]);
    T total{0};
    for (std::size_t j = 0; j <= i; ++j) {
      const T e = std::exp(v[i * n + j] - mx);
      out[i * n + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j <= i; ++j) out[i * n + j] /= total;
  }
  auto ps = scores.node();
  return detail::make_result<T>("causal_softmax", {n, n}, std::move(out), {ps},
                                [ps](detail::Node<T>& self) {
                                  // masked entries have y == 0 so they receive no gradient
                                  detail::softmax_backward(self.value, self.grad, ps->grad_buffer(),
                                                           detail::split_axis(self.shape, 1));
                                });
}

// Row-wise layer normalization over the last axis with affine gamma/beta.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t n = x.cols(), m = x.numel() / n;
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm affine parameters must have width " + std::to_string(n));
  }
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(m);
  const T* v = x.data().data();
  for (std::size_t r = 0; r < m; ++r) {
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += v[r * n + j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) {
      const T d = v[r * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (v[r * n + j] - mean) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](detail::Node<T>& self) {
        const T* G = self.grad.data();
        if (pg->requires_grad || pb->requires_grad) {
          auto& gg = pg->grad_buffer();
          auto& gb = pb->grad_buffer();
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += G[r * n + j] * xhat[r * n + j];
              gb[j] += G[r * n + j];
            }
        }
        if (px->requires_grad) {
          auto& gx = px->grad_buffer();
          const T* gam = pg->value.data();
          for (std::size_t r = 0; r < m; ++r) {
            T mean_dy{0}, mean_dy_xhat{0};
            for (std::size_t j = 0; j < n; ++j) {
              const T dy = G[r * n + j] * gam[j];
              mean_dy += dy;
              mean_dy_xhat += dy * xhat[r * n + j];
            }
            mean_dy /= static_cast<T>(n);
            mean_dy_xhat /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T dy = G[r * n + j] * gam[j];
              gx[r * n + j] += inv_std[r] * (dy - mean_dy - xhat[r * n + j] * mean_dy_xhat);
            }
          }
        }
      });
}

// Gathers rows `ids` of `table` [V x d] into an [ids.size() x d] matrix.
template <class T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::size_t> ids) {
  detail::require_matrix(table, "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<T> out(ids.size() * d);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= vocab) {
      throw IndexError("embedding id " + std::to_string(ids[k]) + " >= vocabulary size " +
                       std::to_string(vocab));
    }
    std::copy_n(table.data().data() + ids[k] * d, d, out.data() + k * d);
  }
  auto pt = table.node();
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return detail::make_result<T>("embedding", {ids.size(), d}, std::move(out), {pt},
                                [pt, idv = std::move(idv), d](detail::Node<T>& self) {
                                  auto& gt = pt->grad_buffer();
                                  for (std::size_t k = 0; k < idv.size(); ++k)
                                    for (std::size_t j = 0; j < d; ++j)
                                      gt[idv[k] * d + j] += self.grad[k * d + j];
                                });
}

// Concatenation of matrices along axis 0 (rows) or 1 (columns).
template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  if (axis > 1) throw DimensionError("concat supports axis 0 or 1");
  for (const auto& p : parts) detail::require_matrix(p, "concat");
  const std::size_t other = axis == 0 ? parts[0].shape()[1] : parts[0].shape()[0];
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t o = axis == 0 ? p.shape()[1] : p.shape()[0];
    if (o != other) throw DimensionError("concat extent mismatch along the fixed axis");
    total += p.shape()[axis];
  }
  const std::size_t m = axis == 0 ? total : other, n = axis == 0 ? other : total;
  std::vector<T> out(m * n);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t pm = p.shape()[0], pn = p.shape()[1];
    for (std::size_t i = 0; i < pm; ++i)
      for (std::size_t j = 0; j < pn; ++j) {
        const std::size_t oi = axis == 0 ? off + i : i, oj = axis == 0 ? j : off + j;
        out[oi * n + oj] = p.data()[i * pn + j];
      }
    off += p.shape()[axis];
  }
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  auto captured = nodes;
  return detail::make_result<T>(
      "concat", {m, n}, std::move(out), std::move(nodes),
      [captured, offsets, axis, n](detail::Node<T>& self) {
        for (std::size_t k = 0; k < captured.size(); ++k) {
          auto& p = captured[k];
          if (!p->requires_grad) continue;
          auto& gp = p->grad_buffer();
          const std::size_t pm = p->shape[0], pn = p->shape[1];
          for (std::size_t i = 0; i < pm; ++i)
            for (std::size_t j = 0; j < pn; ++j) {
              const std::size_t oi = axis == 0 ? offsets[k] + i : i;
              const std::size_t oj = axis == 0 ? j : offsets[k] + j;
              gp[i * pn + j] += self.grad[oi * n + oj];
            }
        }
      });
}

// Half-open range [begin, end) of a matrix along axis 0 or 1.
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice");
  if (axis > 1) throw DimensionError("slice supports axis 0 or 1");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (begin > end || end > x.shape()[axis]) {
    throw IndexError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t om = axis == 0 ? end - begin : m, on = axis == 0 ? n : end - begin;
  std::vector<T> out(om * on);
  for (std::size_t i = 0; i < om; ++i)
    for (std::size_t j = 0; j < on; ++j) {
      const std::size_t si = axis == 0 ? begin + i : i, sj = axis == 0 ? j : begin + j;
      out[i * on + j] = x.data()[si * n + sj];
    }
  auto px = x.node();
  return detail::make_result<T>("slice", {om, on}, std::move(out), {px},
                                [px, axis, begin, om, on, n](detail::Node<T>& self) {
                                  auto& gx = px->grad_buffer();
                                  for (std::size_t i = 0; i < om; ++i)
                                    for (std::size_t j = 0; j < on; ++j) {
                                      const std::size_t si = axis == 0 ? begin + i : i;
                                      const std::size_t sj = axis == 0 ? j : begin + j;
                                      gx[si * n + sj] += self.grad[i * on + j];
                                    }
                                });
}

// Summed negative log-likelihood: -sum_k log softmax(logits)[k, targets[k]].
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::size_t> targets) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " rows");
  }
  std::vector<T> probs(m * vocab);
  T loss{0};
  const T* v = logits.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= vocab) {
      throw IndexError("cross_entropy target " + std::to_string(targets[i]) + " >= " +
                       std::to_string(vocab));
    }
    T mx = v[i * vocab];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, v[i * vocab + j]);
    T total{0};
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[i * vocab + j] = std::exp(v[i * vocab + j] - mx);
      total += probs[i * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] /= total;
    loss -= v[i * vocab + targets[i]] - mx - std::log(total);
  }
  auto pl = logits.node();
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  return detail::make_result<T>("cross_entropy", {1}, {loss}, {pl},
                                [pl, probs = std::move(probs), tv = std::move(tv), vocab](detail::Node<T>& self) {
                                  auto& gl = pl->grad_buffer();
                                  const T g = self.grad[0];
                                  for (std::size_t i = 0; i < tv.size(); ++i) {
                                    for (std::size_t j = 0; j < vocab; ++j)
                                      gl[i * vocab + j] += g * probs[i * vocab + j];
                                    gl[i * vocab + tv[i]] -= g;
                                  }
                                });
}

// ||A B^T||_F^2 for A [out x r], B [in x r], evaluated as trace((A^T A)(B^T B))
// so the full update matrix is never formed.
template <class T>
BasicTensor<T> lowrank_frobenius_sq(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "lowrank_frobenius_sq");
  detail::require_matrix(b, "lowrank_frobenius_sq");
  const std::size_t r = a.shape()[1];
  if (b.shape()[1] != r) throw DimensionError("low-rank factors disagree on rank");
  auto gram = [r](const BasicTensor<T>& x) {
    const std::size_t rows = x.shape()[0];
    std::vector<T> g(r * r, T{0});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t p = 0; p < r; ++p)
        for (std::size_t q = 0; q < r; ++q) g[p * r + q] += x.data()[i * r + p] * x.data()[i * r + q];
    return g;
  };
  const auto ga = gram(a), gb = gram(b);
  T value{0};
  for (std::size_t i = 0; i < r * r; ++i) value += ga[i] * gb[i];  // both symmetric
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>("lowrank_frobenius_sq", {1}, {value}, {pa, pb},
                                [pa, pb, ga, gb, r](detail::Node<T>& self) {
                                  const T g = self.grad[0];
                                  // d/dA = 2 A (B^T B), d/dB = 2 B (A^T A)
                                  auto apply = [&](const std::shared_ptr<detail::Node<T>>& x,
                                                   const std::vector<T>& gram_other) {
                                    if (!x->requires_grad) return;
                                    auto& gx = x->grad_buffer();
                                    const std::size_t rows = x->shape[0];
                                    for (std::size_t i = 0; i < rows; ++i)
                                      for (std::size_t q = 0; q < r; ++q) {
                                        T s{0};
                                        for (std::size_t p = 0; p < r; ++p)
                                          s += x->value[i * r + p] * gram_other[p * r + q];
                                        gx[i * r + q] += T{2} * g * s;
                                      }
                                  };
                                  apply(pa, gb);
                                  apply(pb, ga);
                                });
}

}  // namespace efllm
