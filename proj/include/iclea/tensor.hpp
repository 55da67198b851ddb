#pragma once

// Minimal dense tensors with tape-free reverse-mode differentiation.
//
// Every op result keeps shared pointers to its inputs plus a backward
// closure, so the graph lives exactly as long as the tensors that reference
// it. backward() walks the graph in reverse topological order, keeps
// intermediate gradients in a per-call map and adds leaf gradients into the
// leaves' persistent grad buffers. Reductions accumulate in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iclea/error.hpp"

namespace iclea::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node;

template <class T>
using BackwardFn = std::function<void(const Node<T>& self, std::span<const T> grad_out, std::span<std::vector<T>*> parent_grads)>;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // leaves only
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn<T> backward;

  const std::vector<T>& in(std::size_t i) const { return parents[i]->value; }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size())
      throw ShapeError("tensor shape " + shape_str(shape) + " needs " + std::to_string(numel(shape)) + " values, got " + std::to_string(values.size()));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }
  static Tensor vector(std::vector<T> v, bool requires_grad = false) {
    const auto n = v.size();
    return from({n}, std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v, bool requires_grad = false) {
    return from({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape().back(); }

  std::span<const T> values() const { return node_->value; }
  // Direct write access, meant for leaves (optimizer steps, momentum updates).
  std::span<T> mutable_values() { return node_->value; }
  T item() const {
    if (size() != 1) throw ContractError("item() on a tensor with " + std::to_string(size()) + " elements");
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return !node_->backward; }

  // Empty until the first backward reaches this leaf.
  std::span<const T> grad() const { return node_->grad; }
  std::vector<T>& grad_buffer() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  Tensor detach() const { return from(shape(), node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Creates an op result. The graph edge is recorded only when grad mode is on
// and at least one input requires grad.
template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs, BackwardFn<T> fn) {
  return make_op(std::move(shape), std::move(value), std::vector<Tensor<T>>(inputs), std::move(fn));
}

template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs, BackwardFn<T> fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); })) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor<T>(std::move(node));
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) return;

  using NodeT = Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<NodeT*, std::vector<T>> grads;
  grads[loss.node().get()] = {T(1)};
  std::vector<std::vector<T>*> parent_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    const std::vector<T>& g = found->second;
    if (node->backward) {
      parent_grads.assign(node->parents.size(), nullptr);
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        NodeT* p = node->parents[i].get();
        if (!p->requires_grad) continue;
        auto& pg = grads[p];
        if (pg.empty()) pg.assign(p->value.size(), T(0));
        parent_grads[i] = &pg;
      }
      node->backward(*node, g, parent_grads);
    } else {
      if (node->grad.size() != node->value.size()) node->grad.assign(node->value.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
    }
    grads.erase(found);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and broadcasting arithmetic.

namespace detail {

enum class Broadcast { same, scalar_rhs, row_rhs };

template <class T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar_rhs;
  if (a.rank() == 2 && b.rank() == 1 && b.size() == a.cols()) return Broadcast::row_rhs;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
}

inline std::size_t rhs_index(Broadcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Broadcast::same: return i;
    case Broadcast::scalar_rhs: return 0;
    case Broadcast::row_rhs: return i % cols;
  }
  return i;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() == 1 && b.size() > 1) return add(b, a);
  const auto kind = detail::broadcast_kind(a, b, "add");
  const std::size_t cols = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[detail::rhs_index(kind, i, cols)];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [kind, cols](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[detail::rhs_index(kind, i, cols)] += g[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "sub");
  const std::size_t cols = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[detail::rhs_index(kind, i, cols)];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [kind, cols](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[detail::rhs_index(kind, i, cols)] -= g[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() == 1 && b.size() > 1) return mul(b, a);
  const auto kind = detail::broadcast_kind(a, b, "mul");
  const std::size_t cols = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[detail::rhs_index(kind, i, cols)];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [kind, cols](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const auto& av = self.in(0);
    const auto& bv = self.in(1);
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * bv[detail::rhs_index(kind, i, cols)];
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[detail::rhs_index(kind, i, cols)] += g[i] * av[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= c;
  return make_op<T>(a.shape(), std::move(out), {a}, [c](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += c * g[i];
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v += c;
  return make_op<T>(a.shape(), std::move(out), {a}, [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
  });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

// ---------------------------------------------------------------------------
// Nonlinearities.

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.01)) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] >= T(0) ? a[i] : slope * a[i];
  return make_op<T>(a.shape(), std::move(out), {a}, [slope](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const auto& x = self.in(0);
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += x[i] >= T(0) ? g[i] : slope * g[i];
  });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-a[i]));
  return make_op<T>(a.shape(), std::move(out), {a}, [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * self.value[i] * (T(1) - self.value[i]);
  });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  return make_op<T>(a.shape(), std::move(out), {a}, [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * self.value[i];
  });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a[i]);
  return make_op<T>(a.shape(), std::move(out), {a}, [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const auto& x = self.in(0);
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / x[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions.

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.values()) acc += v;
  return make_op<T>({}, {static_cast<T>(acc)}, {a}, [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (auto& v : *pg[0]) v += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Column means of a matrix: [m, n] -> [n].
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  if (a.rank() != 2 || a.rows() == 0) throw ShapeError("mean_rows expects a non-empty matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> acc(n, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) acc[c] += a[r * n + c];
  std::vector<T> out(n);
  for (std::size_t c = 0; c < n; ++c) out[c] = static_cast<T>(acc[c] / static_cast<double>(m));
  return make_op<T>({n}, std::move(out), {a}, [m, n](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const T w = T(1) / static_cast<T>(m);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) (*pg[0])[r * n + c] += g[c] * w;
  });
}

// Scales each row (or the vector) to unit L2 norm. Rows with norm below eps
// are divided by eps instead.
template <class T>
Tensor<T> normalize_rows(const Tensor<T>& a, double eps = 1e-12) {
  if (a.rank() < 1 || a.rank() > 2) throw ShapeError("normalize_rows expects a vector or matrix");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(a.size());
  std::vector<double> scale(m);
  for (std::size_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) acc += static_cast<double>(a[r * n + c]) * a[r * n + c];
    scale[r] = 1.0 / std::max(std::sqrt(acc), eps);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = static_cast<T>(a[r * n + c] * scale[r]);
  }
  return make_op<T>(a.shape(), std::move(out), {a}, [m, n, scale = std::move(scale)](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    // dx = (g - y (y . g)) / |x|
    const auto& y = self.value;
    for (std::size_t r = 0; r < m; ++r) {
      double yg = 0.0;
      for (std::size_t c = 0; c < n; ++c) yg += static_cast<double>(y[r * n + c]) * g[r * n + c];
      for (std::size_t c = 0; c < n; ++c) (*pg[0])[r * n + c] += static_cast<T>((g[r * n + c] - y[r * n + c] * yg) * scale[r]);
    }
  });
}

template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 1 || a.shape() != b.shape()) throw ShapeError("dot expects two equal-length vectors, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return make_op<T>({}, {static_cast<T>(acc)}, {a, b}, [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const auto& av = self.in(0);
    const auto& bv = self.in(1);
    if (pg[0])
      for (std::size_t i = 0; i < av.size(); ++i) (*pg[0])[i] += g[0] * bv[i];
    if (pg[1])
      for (std::size_t i = 0; i < av.size(); ++i) (*pg[1])[i] += g[0] * av[i];
  });
}

template <class T>
Tensor<T> l2_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 1 || a.shape() != b.shape()) throw ShapeError("l2_distance expects two equal-length vectors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return make_op<T>({}, {static_cast<T>(std::sqrt(acc))}, {a, b}, [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const T dist = self.value[0];
    if (dist == T(0)) return;
    const auto& av = self.in(0);
    const auto& bv = self.in(1);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T d = g[0] * (av[i] - bv[i]) / dist;
      if (pg[0]) (*pg[0])[i] += d;
      if (pg[1]) (*pg[1])[i] -= d;
    }
  });
}

// Softmax of a vector, or of every row of a matrix.
template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() < 1 || a.rank() > 2) throw ShapeError("softmax expects a vector or matrix");
  const std::size_t n = a.cols(), m = a.size() / std::max<std::size_t>(n, 1);
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < m; ++r) {
    T mx = a[r * n];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, a[r * n + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(static_cast<double>(a[r * n + c] - mx));
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = static_cast<T>(std::exp(static_cast<double>(a[r * n + c] - mx)) / z);
  }
  return make_op<T>(a.shape(), std::move(out), {a}, [m, n](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const auto& y = self.value;
    for (std::size_t r = 0; r < m; ++r) {
      double gy = 0.0;
      for (std::size_t c = 0; c < n; ++c) gy += static_cast<double>(g[r * n + c]) * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) (*pg[0])[r * n + c] += y[r * n + c] * (g[r * n + c] - static_cast<T>(gy));
    }
  });
}

// log(sum(exp(x))) of a vector (-> scalar) or of every matrix row (-> vector).
template <class T>
Tensor<T> logsumexp(const Tensor<T>& a) {
  if (a.rank() < 1 || a.rank() > 2 || a.cols() == 0) throw ShapeError("logsumexp expects a non-empty vector or matrix");
  const std::size_t n = a.cols(), m = a.size() / n;
  std::vector<T> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    T mx = a[r * n];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, a[r * n + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(static_cast<double>(a[r * n + c] - mx));
    out[r] = static_cast<T>(static_cast<double>(mx) + std::log(z));
  }
  Shape shape = a.rank() == 1 ? Shape{} : Shape{m};
  return make_op<T>(std::move(shape), std::move(out), {a}, [m, n](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const auto& x = self.in(0);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c)
        (*pg[0])[r * n + c] += g[r] * static_cast<T>(std::exp(static_cast<double>(x[r * n + c]) - static_cast<double>(self.value[r])));
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

// Matrix product with numpy-style vector promotion: a rank-1 left operand is
// a row vector, a rank-1 right operand a column vector; promoted axes are dropped.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || a.rank() > 2 || b.rank() < 1 || b.rank() > 2) throw ShapeError("matmul expects vectors or matrices");
  const std::size_t m = a.rank() == 2 ? a.shape()[0] : 1;
  const std::size_t k = a.shape().back();
  const std::size_t kb = b.shape()[0];
  const std::size_t n = b.rank() == 2 ? b.shape()[1] : 1;
  if (k != kb) throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape shape;
  if (a.rank() == 2) shape.push_back(m);
  if (b.rank() == 2) shape.push_back(n);
  std::vector<T> out(m * n);
  std::vector<double> acc(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double x = av[i * k + l];
      if (x == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) acc[j] += x * bv[l * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<T>(acc[j]);
  }
  return make_op<T>(std::move(shape), std::move(out), {a, b}, [m, k, n](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const auto& A = self.in(0);
    const auto& B = self.in(1);
    if (pg[0]) {  // dA = G B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(g[i * n + j]) * B[l * n + j];
          (*pg[0])[i * k + l] += static_cast<T>(s);
        }
    }
    if (pg[1]) {  // dB = A^T G
      std::vector<double> acc(n);
      for (std::size_t l = 0; l < k; ++l) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          const double x = A[i * k + l];
          for (std::size_t j = 0; j < n; ++j) acc[j] += x * g[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) (*pg[1])[l * n + j] += static_cast<T>(acc[j]);
      }
    }
  });
}

// x W^T + b with W stored [out, in]. x may be a vector [in] or a matrix [m, in].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = Tensor<T>()) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be a matrix");
  const std::size_t out_dim = w.shape()[0], in_dim = w.shape()[1];
  if (x.rank() < 1 || x.rank() > 2 || x.cols() != in_dim)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.size() != out_dim)) throw ShapeError("linear: bias must have " + std::to_string(out_dim) + " entries");
  const std::size_t m = x.rank() == 2 ? x.shape()[0] : 1;
  Shape shape = x.rank() == 2 ? Shape{m, out_dim} : Shape{out_dim};
  std::vector<T> out(m * out_dim);
  const auto xv = x.values();
  const auto wv = w.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t o = 0; o < out_dim; ++o) {
      double s = has_bias ? static_cast<double>(bias[o]) : 0.0;
      const T* xr = xv.data() + i * in_dim;
      const T* wr = wv.data() + o * in_dim;
      for (std::size_t l = 0; l < in_dim; ++l) s += static_cast<double>(xr[l]) * wr[l];
      out[i * out_dim + o] = static_cast<T>(s);
    }
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_op<T>(std::move(shape), std::move(out), inputs, [m, in_dim, out_dim](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const auto& X = self.in(0);
    const auto& W = self.in(1);
    if (pg[0]) {  // dX = G W
      std::vector<double> acc(in_dim);
      for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double gv = g[i * out_dim + o];
          if (gv == 0.0) continue;
          const T* wr = W.data() + o * in_dim;
          for (std::size_t l = 0; l < in_dim; ++l) acc[l] += gv * wr[l];
        }
        for (std::size_t l = 0; l < in_dim; ++l) (*pg[0])[i * in_dim + l] += static_cast<T>(acc[l]);
      }
    }
    if (pg[1]) {  // dW = G^T X
      std::vector<double> acc(in_dim);
      for (std::size_t o = 0; o < out_dim; ++o) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          const double gv = g[i * out_dim + o];
          if (gv == 0.0) continue;
          const T* xr = X.data() + i * in_dim;
          for (std::size_t l = 0; l < in_dim; ++l) acc[l] += gv * xr[l];
        }
        for (std::size_t l = 0; l < in_dim; ++l) (*pg[1])[o * in_dim + l] += static_cast<T>(acc[l]);
      }
    }
    if (pg.size() > 2 && pg[2]) {
      for (std::size_t o = 0; o < out_dim; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += g[i * out_dim + o];
        (*pg[2])[o] += static_cast<T>(s);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structural ops.

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.values().begin(), a.values().end());
  return make_op<T>(std::move(shape), std::move(out), {a}, [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
  });
}

// Concatenation along the last axis: vectors end to end, or matrices side by side.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const std::size_t rank = parts[0].rank();
  if (rank < 1 || rank > 2) throw ShapeError("concat expects vectors or matrices");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank || p.rows() != m) throw ShapeError("concat: incompatible part " + shape_str(p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<T> out(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    for (std::size_t r = 0; r < m; ++r) std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = rank == 1 ? Shape{total} : Shape{m, total};
  return make_op<T>(std::move(shape), std::move(out), parts, [m, total, widths](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (pg[k])
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) (*pg[k])[r * widths[k] + c] += g[r * total + offset + c];
      offset += widths[k];
    }
  });
}

// Stacks equal-length vectors as the rows of a matrix.
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows of nothing");
  const std::size_t n = rows[0].size();
  std::vector<T> out;
  out.reserve(rows.size() * n);
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.size() != n) throw ShapeError("stack_rows: rows must be vectors of equal length");
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  return make_op<T>({rows.size(), n}, std::move(out), rows, [n](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (std::size_t k = 0; k < pg.size(); ++k)
      if (pg[k])
        for (std::size_t c = 0; c < n; ++c) (*pg[k])[c] += g[k * n + c];
  });
}

// Selects elements of a vector or rows of a matrix; indices may repeat.
template <class T>
Tensor<T> gather(const Tensor<T>& a, std::vector<std::size_t> index) {
  if (a.rank() < 1 || a.rank() > 2) throw ShapeError("gather expects a vector or matrix");
  const std::size_t width = a.rank() == 2 ? a.cols() : 1;
  const std::size_t limit = a.rank() == 2 ? a.rows() : a.size();
  std::vector<T> out;
  out.reserve(index.size() * width);
  for (auto i : index) {
    if (i >= limit) throw ShapeError("gather: index " + std::to_string(i) + " out of range " + std::to_string(limit));
    const auto v = a.values().subspan(i * width, width);
    out.insert(out.end(), v.begin(), v.end());
  }
  Shape shape = a.rank() == 2 ? Shape{index.size(), width} : Shape{index.size()};
  return make_op<T>(std::move(shape), std::move(out), {a}, [index = std::move(index), width](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (std::size_t k = 0; k < index.size(); ++k)
      for (std::size_t c = 0; c < width; ++c) (*pg[0])[index[k] * width + c] += g[k * width + c];
  });
}

// Row i of a matrix as a vector.
template <class T>
Tensor<T> row(const Tensor<T>& a, std::size_t i) {
  if (a.rank() != 2) throw ShapeError("row expects a matrix");
  return reshape(gather(a, {i}), Shape{a.cols()});
}

// Element i of a vector as a scalar.
template <class T>
Tensor<T> element(const Tensor<T>& a, std::size_t i) {
  if (a.rank() != 1) throw ShapeError("element expects a vector");
  return reshape(gather(a, {i}), Shape{});
}

// Half-open range [begin, end) along the last axis.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (a.rank() < 1 || a.rank() > 2 || begin > end || end > a.cols()) throw ShapeError("slice out of range");
  const std::size_t m = a.rows(), n = a.cols(), w = end - begin;
  std::vector<T> out(m * w);
  for (std::size_t r = 0; r < m; ++r) std::copy_n(a.values().data() + r * n + begin, w, out.data() + r * w);
  Shape shape = a.rank() == 1 ? Shape{w} : Shape{m, w};
  return make_op<T>(std::move(shape), std::move(out), {a}, [m, n, w, begin](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) (*pg[0])[r * n + begin + c] += g[r * w + c];
  });
}

// Row k of the result is the mean of the rows of `a` listed in segments[k].
// An empty segment yields a zero row.
template <class T>
Tensor<T> segment_mean_rows(const Tensor<T>& a, std::vector<std::vector<std::size_t>> segments) {
  if (a.rank() != 2) throw ShapeError("segment_mean_rows expects a matrix");
  const std::size_t n = a.cols();
  std::vector<T> out(segments.size() * n, T(0));
  std::vector<double> acc(n);
  for (std::size_t k = 0; k < segments.size(); ++k) {
    if (segments[k].empty()) continue;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (auto r : segments[k]) {
      if (r >= a.rows()) throw ShapeError("segment_mean_rows: row index out of range");
      for (std::size_t c = 0; c < n; ++c) acc[c] += a[r * n + c];
    }
    const double inv = 1.0 / static_cast<double>(segments[k].size());
    for (std::size_t c = 0; c < n; ++c) out[k * n + c] = static_cast<T>(acc[c] * inv);
  }
  Shape shape{segments.size(), n};
  return make_op<T>(std::move(shape), std::move(out), {a}, [segments = std::move(segments), n](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (std::size_t k = 0; k < segments.size(); ++k) {
      if (segments[k].empty()) continue;
      const T inv = T(1) / static_cast<T>(segments[k].size());
      for (auto r : segments[k])
        for (std::size_t c = 0; c < n; ++c) (*pg[0])[r * n + c] += g[k * n + c] * inv;
    }
  });
}

}  // namespace iclea::ad
