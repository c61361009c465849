#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mamba_spike/error.hpp"

namespace mamba_spike {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

/// One vertex of the define-by-run differentiation graph. Node ids grow
/// monotonically as the graph is built, so ids are a topological order.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily by backward()
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::size_t size() const { return value.size(); }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Scoped switch that disables graph recording (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Dense row-major f64 tensor participating in a reverse-mode differentiation
/// graph. Values are immutable once constructed; optimizers mutate leaf
/// parameters between graph builds via mutable_data().
class Tensor {
 public:
  Tensor() : Tensor(zeros({1})) {}

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  static Tensor full(Shape shape, double v) {
    check_shape(shape);
    auto n = std::make_shared<detail::Node>();
    n->value.assign(shape_size(shape), v);
    n->shape = std::move(shape);
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from_data(Shape shape, std::vector<double> data) {
    check_shape(shape);
    if (shape_size(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
  }

  /// Leaf tensor that accumulates gradients (a trainable parameter).
  static Tensor param(Shape shape, std::vector<double> data) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor param_full(Shape shape, double v) {
    Tensor t = full(std::move(shape), v);
    t.node_->requires_grad = true;
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::uint64_t id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }

  const std::vector<double>& data() const { return node_->value; }

  /// In-place access for optimizers; only leaves may be mutated.
  std::vector<double>& mutable_data() {
    if (!node_->parents.empty()) {
      throw ContractError("only leaf tensors may be mutated in place");
    }
    return node_->value;
  }

  double item() const {
    if (size() != 1) {
      throw ContractError("item() requires a size-1 tensor, got shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  double operator[](std::size_t flat) const { return node_->value[flat]; }

  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) {
      throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      flat = flat * node_->shape[axis] + i;
      ++axis;
    }
    return node_->value[flat];
  }

  /// Same values, fresh non-tracked leaf.
  Tensor detach() const { return from_data(shape(), data()); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("rank-0 shapes are not supported");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero dimension in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::Node> node_;
};

/// Gradients of a scalar loss w.r.t. parameter leaves, keyed by node id.
class GradientMap {
 public:
  void insert(std::uint64_t id, Tensor grad) { grads_.emplace(id, std::move(grad)); }

  bool contains(const Tensor& p) const { return grads_.count(p.id()) != 0; }

  const Tensor& at(const Tensor& p) const {
    auto it = grads_.find(p.id());
    if (it == grads_.end()) {
      throw ContractError("no gradient recorded for node " + std::to_string(p.id()));
    }
    return it->second;
  }

  /// Gradient for p, or zeros when p never reached the loss.
  Tensor at_or_zero(const Tensor& p) const {
    auto it = grads_.find(p.id());
    if (it == grads_.end()) return Tensor::zeros(p.shape());
    return it->second;
  }

  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

namespace detail {

inline bool any_tracked(std::span<const Tensor> inputs) {
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

/// Creates a graph node for an op result. The backprop callback reads
/// self.grad and the parents (in input order) and accumulates into
/// parent grads that are tracked.
inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::span<const Tensor> inputs,
                      std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = next_node_id();
  if (grad_mode_flag() && any_tracked(inputs)) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backprop = std::move(backprop);
  }
  return Tensor::wrap(std::move(n));
}

inline void ensure_grad(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse-mode accumulation from a scalar loss. Returns gradients for every
/// tracked leaf reachable from the loss. Grad buffers are reset per call, so
/// repeated calls on the same graph give identical results.
inline GradientMap backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  // Iterative reachability walk (graphs can be thousands of nodes deep).
  std::vector<detail::Node*> reachable;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    reachable.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  for (detail::Node* n : reachable) {
    if (n->requires_grad) n->grad.assign(n->value.size(), 0.0);
  }
  // Node ids are assigned in construction order, so descending id order is a
  // valid reverse topological order.
  std::sort(reachable.begin(), reachable.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });
  if (loss.requires_grad()) {
    loss.node()->grad.assign(1, 1.0);
    for (detail::Node* n : reachable) {
      if (n->backprop) n->backprop(*n);
    }
  }
  GradientMap out;
  for (detail::Node* n : reachable) {
    if (n->requires_grad && n->parents.empty()) {
      out.insert(n->id, Tensor::from_data(n->shape, n->grad));
    }
  }
  return out;
}

/// As backward(loss), but guarantees an entry for each listed parameter;
/// parameters the loss never reached get zero gradients.
inline GradientMap backward(const Tensor& loss, std::span<const Tensor> params) {
  GradientMap got = backward(loss);
  GradientMap out;
  for (const auto& p : params) {
    out.insert(p.id(), got.at_or_zero(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// broadcasting elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

/// Supported mixes: identical shapes, scalar against anything, and a shape
/// that is a strict suffix of the other (trailing-dimension expansion).
inline bool broadcasts_onto(const Shape& small, const Shape& big) {
  if (shape_size(small) == 1) return true;
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct BinExpand {
  Shape out_shape;
  std::size_t asize, bsize;  // operand period lengths (out size when not broadcast)
};

inline BinExpand binary_layout(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), a.size(), b.size()};
  if (broadcasts_onto(b.shape(), a.shape())) return {a.shape(), a.size(), b.size()};
  if (broadcasts_onto(a.shape(), b.shape())) return {b.shape(), a.size(), b.size()};
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " are not broadcast-compatible");
}

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  const BinExpand ly = binary_layout(a, b, name);
  const std::size_t n = shape_size(ly.out_shape);
  std::vector<double> out(n);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(av[i % ly.asize], bv[i % ly.bsize]);
  }
  const Tensor inputs[] = {a, b};
  return make_op(ly.out_shape, std::move(out), inputs,
                 [asize = ly.asize, bsize = ly.bsize, bwd](Node& self) {
                   Node& pa = *self.parents[0];
                   Node& pb = *self.parents[1];
                   const bool ga = pa.requires_grad;
                   const bool gb = pb.requires_grad;
                   if (ga) ensure_grad(pa);
                   if (gb) ensure_grad(pb);
                   for (std::size_t i = 0; i < self.size(); ++i) {
                     const double g = self.grad[i];
                     if (g == 0.0) continue;
                     const double x = pa.value[i % asize];
                     const double y = pb.value[i % bsize];
                     double dx, dy;
                     bwd(x, y, g, dx, dy);
                     if (ga) pa.grad[i % asize] += dx;
                     if (gb) pb.grad[i % bsize] += dy;
                   }
                 });
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fwd(av[i]);
  const Tensor inputs[] = {a};
  return make_op(a.shape(), std::move(out), inputs, [bwd](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (std::size_t i = 0; i < self.size(); ++i) {
      p.grad[i] += self.grad[i] * bwd(p.value[i], self.value[i]);
    }
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = g;
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = -g;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& dx, double& dy) {
        dx = g * y;
        dy = g * x;
      });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& dx, double& dy) {
        dx = g / y;
        dy = -g * x / (y * y);
      });
}

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_val(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return sigmoid_val(x); },
      [](double, double y) { return y * (1.0 - y); });
}

inline double softplus_val(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return softplus_val(x); },
      [](double x, double) { return sigmoid_val(x); });
}

/// Sigmoid-weighted linear unit: x * sigmoid(x).
inline Tensor silu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x * sigmoid_val(x); },
      [](double x, double) {
        const double s = sigmoid_val(x);
        return s + x * s * (1.0 - s);
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const Tensor inputs[] = {a};
  return detail::make_op({1}, {acc}, inputs, [](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    const double g = self.grad[0];
    for (double& gp : p.grad) gp += g;
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// structure ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " has " + std::to_string(a.size()) +
                     " elements, target " + shape_str(shape) + " has " +
                     std::to_string(shape_size(shape)));
  }
  const Tensor inputs[] = {a};
  return detail::make_op(std::move(shape), a.data(), inputs, [](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    for (std::size_t i = 0; i < self.size(); ++i) p.grad[i] += self.grad[i];
  });
}

/// Flattens all axes from `axis` onward into one.
inline Tensor flatten_from(const Tensor& a, std::size_t axis) {
  if (axis + 1 >= a.rank()) return a;
  if (axis == 0) return reshape(a, {a.size()});
  Shape s(a.shape().begin(), a.shape().begin() + axis);
  std::size_t tail = 1;
  for (std::size_t i = axis; i < a.rank(); ++i) tail *= a.shape()[i];
  s.push_back(tail);
  return reshape(a, std::move(s));
}

/// Selects index t along axis 0: [T x rest] -> [rest].
inline Tensor row(const Tensor& a, std::size_t t) {
  if (a.rank() < 2) throw ShapeError("row: rank >= 2 required, got " + shape_str(a.shape()));
  const std::size_t T = a.shape()[0];
  if (t >= T) throw ShapeError("row index " + std::to_string(t) + " out of range for " + shape_str(a.shape()));
  const std::size_t stride = a.size() / T;
  Shape out_shape(a.shape().begin() + 1, a.shape().end());
  std::vector<double> out(a.data().begin() + t * stride, a.data().begin() + (t + 1) * stride);
  const Tensor inputs[] = {a};
  return detail::make_op(std::move(out_shape), std::move(out), inputs,
                         [t, stride](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           detail::ensure_grad(p);
                           for (std::size_t i = 0; i < stride; ++i) {
                             p.grad[t * stride + i] += self.grad[i];
                           }
                         });
}

/// Stacks equal-shaped tensors along a new leading axis.
inline Tensor stack0(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("stack0: empty input");
  const Shape& inner = parts.front().shape();
  const std::size_t stride = parts.front().size();
  std::vector<double> out;
  out.reserve(parts.size() * stride);
  for (const auto& p : parts) {
    if (p.shape() != inner) {
      throw ShapeError("stack0: mixed shapes " + shape_str(inner) + " and " + shape_str(p.shape()));
    }
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape out_shape;
  out_shape.push_back(parts.size());
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  return detail::make_op(std::move(out_shape), std::move(out), parts,
                         [stride](detail::Node& self) {
                           for (std::size_t k = 0; k < self.parents.size(); ++k) {
                             detail::Node& p = *self.parents[k];
                             if (!p.requires_grad) continue;
                             detail::ensure_grad(p);
                             for (std::size_t i = 0; i < stride; ++i) {
                               p.grad[i] += self.grad[k * stride + i];
                             }
                           }
                         });
}

/// Concatenates along the last axis; leading dimensions must agree.
inline Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_last: empty input");
  const Shape& s0 = parts.front().shape();
  Shape lead(s0.begin(), s0.end() - 1);
  std::size_t total_last = 0;
  std::vector<std::size_t> lasts;
  for (const auto& p : parts) {
    if (p.rank() != s0.size() ||
        !std::equal(lead.begin(), lead.end(), p.shape().begin())) {
      throw ShapeError("concat_last: leading dims differ: " + shape_str(s0) + " vs " +
                       shape_str(p.shape()));
    }
    lasts.push_back(p.shape().back());
    total_last += p.shape().back();
  }
  const std::size_t rows = shape_size(lead);
  Shape out_shape = lead;
  out_shape.push_back(total_last);
  std::vector<double> out(rows * total_last);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(pv.begin() + r * lasts[k], pv.begin() + (r + 1) * lasts[k],
                out.begin() + r * total_last + off);
    }
    off += lasts[k];
  }
  return detail::make_op(std::move(out_shape), std::move(out), parts,
                         [rows, total_last, lasts](detail::Node& self) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < self.parents.size(); ++k) {
                             detail::Node& p = *self.parents[k];
                             if (p.requires_grad) {
                               detail::ensure_grad(p);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t i = 0; i < lasts[k]; ++i) {
                                   p.grad[r * lasts[k] + i] += self.grad[r * total_last + off + i];
                                 }
                               }
                             }
                             off += lasts[k];
                           }
                         });
}

/// Swaps the first two axes (rank >= 2).
inline Tensor swap_axes01(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("swap_axes01: rank >= 2 required, got " + shape_str(a.shape()));
  const std::size_t A = a.shape()[0];
  const std::size_t B = a.shape()[1];
  const std::size_t inner = a.size() / (A * B);
  Shape out_shape = a.shape();
  std::swap(out_shape[0], out_shape[1]);
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < A; ++i) {
    for (std::size_t j = 0; j < B; ++j) {
      std::copy(av.begin() + (i * B + j) * inner, av.begin() + (i * B + j + 1) * inner,
                out.begin() + (j * A + i) * inner);
    }
  }
  const Tensor inputs[] = {a};
  return detail::make_op(std::move(out_shape), std::move(out), inputs,
                         [A, B, inner](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           detail::ensure_grad(p);
                           for (std::size_t i = 0; i < A; ++i) {
                             for (std::size_t j = 0; j < B; ++j) {
                               const double* g = self.grad.data() + (j * A + i) * inner;
                               double* pg = p.grad.data() + (i * B + j) * inner;
                               for (std::size_t k = 0; k < inner; ++k) pg[k] += g[k];
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: rank-2 operands required, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t M = a.shape()[0], K = a.shape()[1];
  const std::size_t K2 = b.shape()[0], N = b.shape()[1];
  if (K != K2) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(M * N, 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t k = 0; k < K; ++k) {
      const double x = av[m * K + k];
      if (x == 0.0) continue;
      const double* brow = bv + k * N;
      double* orow = out.data() + m * N;
      for (std::size_t n = 0; n < N; ++n) orow[n] += x * brow[n];
    }
  }
  const Tensor inputs[] = {a, b};
  return detail::make_op({M, N}, std::move(out), inputs, [M, K, N](detail::Node& self) {
    detail::Node& pa = *self.parents[0];
    detail::Node& pb = *self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad) {
      detail::ensure_grad(pa);
      const double* bv = pb.value.data();
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          const double* grow = g + m * N;
          const double* brow = bv + k * N;
          for (std::size_t n = 0; n < N; ++n) acc += grow[n] * brow[n];
          pa.grad[m * K + k] += acc;
        }
      }
    }
    if (pb.requires_grad) {
      detail::ensure_grad(pb);
      const double* av = pa.value.data();
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t k = 0; k < K; ++k) {
          const double x = av[m * K + k];
          if (x == 0.0) continue;
          const double* grow = g + m * N;
          double* brow = pb.grad.data() + k * N;
          for (std::size_t n = 0; n < N; ++n) brow[n] += x * grow[n];
        }
      }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 required, got " + shape_str(a.shape()));
  return swap_axes01(a);
}

/// Causal depthwise 1-d convolution. y[t,d] = sum_k kernel[k,d] * x[t-K+1+k,d],
/// with x indexed before t=0 taken as zero; no output depends on future steps.
inline Tensor causal_depthwise_conv1d(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 2 || kernel.rank() != 2) {
    throw ShapeError("causal_depthwise_conv1d: rank-2 operands required, got " +
                     shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  }
  const std::size_t T = x.shape()[0], D = x.shape()[1];
  const std::size_t K = kernel.shape()[0];
  if (kernel.shape()[1] != D) {
    throw ShapeError("causal_depthwise_conv1d: channel mismatch: " + shape_str(x.shape()) +
                     " vs " + shape_str(kernel.shape()));
  }
  std::vector<double> out(T * D, 0.0);
  const auto& xv = x.data();
  const auto& kv = kernel.data();
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k + 1) - static_cast<std::ptrdiff_t>(K);
      if (src < 0) continue;
      for (std::size_t d = 0; d < D; ++d) {
        out[t * D + d] += kv[k * D + d] * xv[static_cast<std::size_t>(src) * D + d];
      }
    }
  }
  const Tensor inputs[] = {x, kernel};
  return detail::make_op({T, D}, std::move(out), inputs, [T, D, K](detail::Node& self) {
    detail::Node& px = *self.parents[0];
    detail::Node& pk = *self.parents[1];
    if (px.requires_grad) detail::ensure_grad(px);
    if (pk.requires_grad) detail::ensure_grad(pk);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k + 1) - static_cast<std::ptrdiff_t>(K);
        if (src < 0) continue;
        const std::size_t s = static_cast<std::size_t>(src);
        for (std::size_t d = 0; d < D; ++d) {
          const double g = self.grad[t * D + d];
          if (g == 0.0) continue;
          if (px.requires_grad) px.grad[s * D + d] += g * pk.value[k * D + d];
          if (pk.requires_grad) pk.grad[k * D + d] += g * px.value[s * D + d];
        }
      }
    }
  });
}

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// 2-d cross-correlation over [B x C x H x W] with kernels [F x C x kh x kw].
inline Tensor conv2d(const Tensor& x, const Tensor& kernels, Conv2dSpec spec = {}) {
  if (x.rank() != 4 || kernels.rank() != 4) {
    throw ShapeError("conv2d: rank-4 operands required, got " + shape_str(x.shape()) + " and " +
                     shape_str(kernels.shape()));
  }
  const std::size_t Bn = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t F = kernels.shape()[0], kh = kernels.shape()[2], kw = kernels.shape()[3];
  if (kernels.shape()[1] != C) {
    throw ShapeError("conv2d: channel mismatch: " + shape_str(x.shape()) + " vs " +
                     shape_str(kernels.shape()));
  }
  const std::size_t s = spec.stride, p = spec.pad;
  if (H + 2 * p < kh || W + 2 * p < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  const std::size_t OH = (H + 2 * p - kh) / s + 1;
  const std::size_t OW = (W + 2 * p - kw) / s + 1;
  std::vector<double> out(Bn * F * OH * OW, 0.0);
  const double* xv = x.data().data();
  const double* kv = kernels.data().data();
  for (std::size_t b = 0; b < Bn; ++b) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t oy = 0; oy < OH; ++oy) {
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(p);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - static_cast<std::ptrdiff_t>(p);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                acc += xv[((b * C + c) * H + iy) * W + ix] * kv[((f * C + c) * kh + ky) * kw + kx];
              }
            }
          }
          out[((b * F + f) * OH + oy) * OW + ox] = acc;
        }
      }
    }
  }
  const Tensor inputs[] = {x, kernels};
  return detail::make_op({Bn, F, OH, OW}, std::move(out), inputs,
                         [Bn, C, H, W, F, kh, kw, s, p, OH, OW](detail::Node& self) {
                           detail::Node& px = *self.parents[0];
                           detail::Node& pk = *self.parents[1];
                           if (px.requires_grad) detail::ensure_grad(px);
                           if (pk.requires_grad) detail::ensure_grad(pk);
                           for (std::size_t b = 0; b < Bn; ++b) {
                             for (std::size_t f = 0; f < F; ++f) {
                               for (std::size_t oy = 0; oy < OH; ++oy) {
                                 for (std::size_t ox = 0; ox < OW; ++ox) {
                                   const double g = self.grad[((b * F + f) * OH + oy) * OW + ox];
                                   if (g == 0.0) continue;
                                   for (std::size_t c = 0; c < C; ++c) {
                                     for (std::size_t ky = 0; ky < kh; ++ky) {
                                       const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(p);
                                       if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                       for (std::size_t kx = 0; kx < kw; ++kx) {
                                         const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - static_cast<std::ptrdiff_t>(p);
                                         if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                         const std::size_t xi = ((b * C + c) * H + iy) * W + ix;
                                         const std::size_t ki = ((f * C + c) * kh + ky) * kw + kx;
                                         if (px.requires_grad) px.grad[xi] += g * pk.value[ki];
                                         if (pk.requires_grad) pk.grad[ki] += g * px.value[xi];
                                       }
                                     }
                                   }
                                 }
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

enum class PoolMode { kMax, kMean };

/// Non-overlapping reduction over fixed windows along axis 0. The last window
/// may be partial; mean mode normalizes by the actual window length.
inline Tensor pool_time(const Tensor& x, std::size_t window, PoolMode mode) {
  if (window == 0) throw ContractError("pool_time: window must be >= 1");
  if (x.rank() < 2) throw ShapeError("pool_time: rank >= 2 required, got " + shape_str(x.shape()));
  const std::size_t T = x.shape()[0];
  const std::size_t stride = x.size() / T;
  const std::size_t L = (T + window - 1) / window;
  Shape out_shape = x.shape();
  out_shape[0] = L;
  std::vector<double> out(L * stride, 0.0);
  std::vector<std::uint32_t> argmax;
  const auto& xv = x.data();
  if (mode == PoolMode::kMax) {
    argmax.assign(L * stride, 0);
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t t0 = l * window;
      const std::size_t t1 = std::min(T, t0 + window);
      for (std::size_t i = 0; i < stride; ++i) {
        double best = xv[t0 * stride + i];
        std::size_t best_t = t0;
        for (std::size_t t = t0 + 1; t < t1; ++t) {
          if (xv[t * stride + i] > best) {
            best = xv[t * stride + i];
            best_t = t;
          }
        }
        out[l * stride + i] = best;
        argmax[l * stride + i] = static_cast<std::uint32_t>(best_t);
      }
    }
  } else {
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t t0 = l * window;
      const std::size_t t1 = std::min(T, t0 + window);
      const double inv = 1.0 / static_cast<double>(t1 - t0);
      for (std::size_t t = t0; t < t1; ++t) {
        for (std::size_t i = 0; i < stride; ++i) out[l * stride + i] += xv[t * stride + i];
      }
      for (std::size_t i = 0; i < stride; ++i) out[l * stride + i] *= inv;
    }
  }
  const Tensor inputs[] = {x};
  return detail::make_op(std::move(out_shape), std::move(out), inputs,
                         [T, stride, L, window, mode, argmax = std::move(argmax)](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           detail::ensure_grad(p);
                           if (mode == PoolMode::kMax) {
                             for (std::size_t j = 0; j < self.size(); ++j) {
                               const std::size_t i = j % stride;
                               p.grad[argmax[j] * stride + i] += self.grad[j];
                             }
                           } else {
                             for (std::size_t l = 0; l < L; ++l) {
                               const std::size_t t0 = l * window;
                               const std::size_t t1 = std::min(T, t0 + window);
                               const double inv = 1.0 / static_cast<double>(t1 - t0);
                               for (std::size_t t = t0; t < t1; ++t) {
                                 for (std::size_t i = 0; i < stride; ++i) {
                                   p.grad[t * stride + i] += self.grad[l * stride + i] * inv;
                                 }
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// normalization, spikes, loss
// ---------------------------------------------------------------------------

/// RMS normalization over the last axis with a learnable gain.
inline Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6) {
  const std::size_t D = x.shape().back();
  if (gain.rank() != 1 || gain.shape()[0] != D) {
    throw ShapeError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match feature dim of " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / D;
  std::vector<double> out(x.size());
  std::vector<double> inv_rms(rows);
  const auto& xv = x.data();
  const auto& gv = gain.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      const double v = xv[r * D + i];
      m += v * v;
    }
    const double inv = 1.0 / std::sqrt(m / static_cast<double>(D) + eps);
    inv_rms[r] = inv;
    for (std::size_t i = 0; i < D; ++i) out[r * D + i] = gv[i] * xv[r * D + i] * inv;
  }
  const Tensor inputs[] = {x, gain};
  return detail::make_op(x.shape(), std::move(out), inputs,
                         [rows, D, inv_rms = std::move(inv_rms)](detail::Node& self) {
                           detail::Node& px = *self.parents[0];
                           detail::Node& pg = *self.parents[1];
                           if (px.requires_grad) detail::ensure_grad(px);
                           if (pg.requires_grad) detail::ensure_grad(pg);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double inv = inv_rms[r];
                             const double* xr = px.value.data() + r * D;
                             const double* gr = self.grad.data() + r * D;
                             if (px.requires_grad) {
                               double dot = 0.0;
                               for (std::size_t i = 0; i < D; ++i) dot += gr[i] * pg.value[i] * xr[i];
                               const double k = dot * inv * inv * inv / static_cast<double>(D);
                               for (std::size_t i = 0; i < D; ++i) {
                                 px.grad[r * D + i] += pg.value[i] * gr[i] * inv - xr[i] * k;
                               }
                             }
                             if (pg.requires_grad) {
                               for (std::size_t i = 0; i < D; ++i) pg.grad[i] += gr[i] * xr[i] * inv;
                             }
                           }
                         });
}

/// Fast-sigmoid surrogate derivative g(u) = 1 / (1 + k|u|)^2.
inline double surrogate_grad_val(double u, double k) {
  const double d = 1.0 + k * std::abs(u);
  return 1.0 / (d * d);
}

/// Elementwise surrogate derivative as a tensor op.
inline Tensor surrogate_grad(const Tensor& u, double k) {
  return detail::unary_op(
      u, [k](double x) { return surrogate_grad_val(x, k); },
      [k](double x, double y) {
        const double sgn = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
        const double d = 1.0 + k * std::abs(x);
        return -2.0 * k * sgn * y / d;
      });
}

/// Hard threshold on the margin u = V - theta: emits 1 where u >= 0.
/// The backward pass substitutes the fast-sigmoid surrogate for d(spike)/du.
inline Tensor spike_hard(const Tensor& u, double slope) {
  return detail::unary_op(
      u, [](double x) { return x >= 0.0 ? 1.0 : 0.0; },
      [slope](double x, double) { return surrogate_grad_val(x, slope); });
}

/// Smooth relaxation of the threshold: sigmoid(slope * u) with its exact
/// derivative, used by gradient checks of the spiking path.
inline Tensor spike_relaxed(const Tensor& u, double slope) {
  return detail::unary_op(
      u, [slope](double x) { return sigmoid_val(slope * x); },
      [slope](double, double y) { return slope * y * (1.0 - y); });
}

/// Mean softmax cross-entropy over a batch of logits [B x C].
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy_mean: logits must be [B x C], got " + shape_str(logits.shape()));
  }
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  if (labels.size() != B) {
    throw ContractError("cross_entropy_mean: " + std::to_string(labels.size()) + " labels for batch " +
                        std::to_string(B));
  }
  std::vector<double> probs(B * C);
  double loss = 0.0;
  const auto& zv = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw ContractError("cross_entropy_mean: label " + std::to_string(y) + " outside [0," +
                          std::to_string(C) + ")");
    }
    double m = zv[b * C];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, zv[b * C + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      probs[b * C + c] = std::exp(zv[b * C + c] - m);
      z += probs[b * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] /= z;
    loss += m + std::log(z) - zv[b * C + y];
  }
  loss /= static_cast<double>(B);
  const Tensor inputs[] = {logits};
  return detail::make_op({1}, {loss}, inputs,
                         [B, C, labels, probs = std::move(probs)](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           detail::ensure_grad(p);
                           const double g = self.grad[0] / static_cast<double>(B);
                           for (std::size_t b = 0; b < B; ++b) {
                             for (std::size_t c = 0; c < C; ++c) {
                               const double onehot = (static_cast<std::size_t>(labels[b]) == c) ? 1.0 : 0.0;
                               p.grad[b * C + c] += g * (probs[b * C + c] - onehot);
                             }
                           }
                         });
}

}  // namespace mamba_spike
