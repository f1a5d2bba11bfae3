#pragma once

// Define-by-run reverse-mode automatic differentiation over Tensor values.
//
// A Var is a handle to a graph node. Operations on Vars build the graph as
// they execute; backward() walks it once in reverse topological order. The
// graph is rebuilt on every forward pass. A graph belongs to one thread.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace gibayes {

class Var;

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // empty shape + size-1 until first accumulation; see has_grad
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Tensor& g) {
    if (!requires_grad) return;
    if (!has_grad) {
      grad = g.reshaped(value.shape());
      has_grad = true;
    } else {
      grad += g;
    }
  }
  void accumulate(Tensor&& g) {
    if (!requires_grad) return;
    if (!has_grad) {
      if (g.shape() != value.shape()) g = g.reshaped(value.shape());
      grad = std::move(g);
      has_grad = true;
    } else {
      grad += g;
    }
  }
};

}  // namespace detail

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  Var(double v) : Var(Tensor::scalar(v)) {}  // NOLINT: scalars convert implicitly

  static Var param(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  double item() const { return node_->value.item(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient from the most recent backward() through this node; zeros if it
  /// was not reached.
  Tensor grad() const {
    if (node_->has_grad) return node_->grad;
    return Tensor::zeros(node_->value.shape());
  }

  /// Replaces the value of a leaf in place (optimiser updates).
  void set_value(Tensor v) {
    if (v.shape() != node_->value.shape())
      throw ShapeError("set_value shape mismatch " + shape_str(v.shape()) + " vs " + shape_str(node_->value.shape()));
    node_->value = std::move(v);
  }
  Tensor& mutable_value() { return node_->value; }
  void clear_grad() {
    node_->has_grad = false;
    node_->grad = Tensor();
  }

  /// A new leaf holding the same value with no history.
  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Var from_op(Tensor value, std::vector<Var> parents, std::function<void(detail::Node&)> backward) {
    Var out(std::move(value));
    bool req = false;
    for (const auto& p : parents) req = req || p.requires_grad();
    if (req) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(parents.size());
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse sweep from a scalar root. Every gradient in the reachable graph is
/// reset first, so afterwards leaf.grad() holds d(root)/d(leaf).
inline void backward(const Var& root) {
  if (root.size() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      detail::Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (auto* n : order) {
    n->has_grad = false;
    n->grad = Tensor();
  }
  root.node()->accumulate(Tensor::ones(root.shape()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->has_grad) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Element strides of `in` when read at the coordinates of `out` (0 along
// broadcast dimensions).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    strides[o] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        Fn&& fn) {
  const std::size_t r = out.size();
  const std::size_t n = shape_size(out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  const Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out(os);
  if (b.size() == 1 && shape_size(os) == a.size()) {
    const double bv = b[0];
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], bv);
    return out;
  }
  if (a.size() == 1 && shape_size(os) == b.size()) {
    const double av = a[0];
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = f(av, b[i]);
    return out;
  }
  for_each_broadcast(os, broadcast_strides(a.shape(), os), broadcast_strides(b.shape(), os),
                     [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = f(a[ia], b[ib]); });
  return out;
}

}  // namespace detail

/// Sums a broadcast gradient back down to `target`.
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out(target);
  if (out.size() == 1) {
    double s = 0.0;
    for (double v : g.data()) s += v;
    out[0] = s;
    return out;
  }
  const auto st = detail::broadcast_strides(target, g.shape());
  const std::vector<std::size_t> zero(g.rank(), 0);
  detail::for_each_broadcast(g.shape(), st, zero, [&](std::size_t o, std::size_t it, std::size_t) { out[it] += g[o]; });
  return out;
}

// ---------------------------------------------------------------------------
// Binary elementwise

inline Var add(const Var& a, const Var& b) {
  return Var::from_op(detail::broadcast_apply(a.value(), b.value(), std::plus<>()), {a, b}, [](detail::Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) pa.accumulate(reduce_to(n.grad, pa.value.shape()));
    if (pb.requires_grad) pb.accumulate(reduce_to(n.grad, pb.value.shape()));
  });
}

inline Var sub(const Var& a, const Var& b) {
  return Var::from_op(detail::broadcast_apply(a.value(), b.value(), std::minus<>()), {a, b}, [](detail::Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) pa.accumulate(reduce_to(n.grad, pa.value.shape()));
    if (pb.requires_grad) {
      Tensor g = reduce_to(n.grad, pb.value.shape());
      for (double& v : g.data()) v = -v;
      pb.accumulate(std::move(g));
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  return Var::from_op(detail::broadcast_apply(a.value(), b.value(), std::multiplies<>()), {a, b},
                      [](detail::Node& n) {
                        auto& pa = *n.parents[0];
                        auto& pb = *n.parents[1];
                        if (pa.requires_grad)
                          pa.accumulate(reduce_to(detail::broadcast_apply(n.grad, pb.value, std::multiplies<>()),
                                                  pa.value.shape()));
                        if (pb.requires_grad)
                          pb.accumulate(reduce_to(detail::broadcast_apply(n.grad, pa.value, std::multiplies<>()),
                                                  pb.value.shape()));
                      });
}

inline Var div(const Var& a, const Var& b) {
  for (double v : b.value().data())
    if (v == 0.0) throw DomainError("division by zero");
  return Var::from_op(detail::broadcast_apply(a.value(), b.value(), std::divides<>()), {a, b}, [](detail::Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad)
      pa.accumulate(reduce_to(detail::broadcast_apply(n.grad, pb.value, std::divides<>()), pa.value.shape()));
    if (pb.requires_grad) {
      // d(a/b)/db = -out/b
      Tensor q = detail::broadcast_apply(n.value, pb.value, std::divides<>());
      Tensor g = detail::broadcast_apply(n.grad, q, [](double x, double y) { return -x * y; });
      pb.accumulate(reduce_to(g, pb.value.shape()));
    }
  });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Unary elementwise

namespace detail {

// df(x, y) is the derivative at input x with output y.
template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Var::from_op(std::move(out), {x}, [df](Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * df(p.value[i], n.value[i]);
    p.accumulate(std::move(g));
  });
}

}  // namespace detail

inline Var neg(const Var& x) {
  return detail::unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
inline Var operator-(const Var& x) { return neg(x); }

inline Var exp(const Var& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(const Var& x) {
  for (double v : x.value().data())
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var sqrt(const Var& x) {
  for (double v : x.value().data())
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  return detail::unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Var square(const Var& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// relu'(0) = 0
inline Var relu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var softplus(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

inline Var scale(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var operator*(const Var& x, double c) { return scale(x, c); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }
inline Var operator+(const Var& x, double c) { return add_scalar(x, c); }
inline Var operator+(double c, const Var& x) { return add_scalar(x, c); }
inline Var operator-(const Var& x, double c) { return add_scalar(x, -c); }
inline Var operator-(double c, const Var& x) { return add_scalar(neg(x), c); }
inline Var operator/(const Var& x, double c) {
  if (c == 0.0) throw DomainError("division by zero");
  return scale(x, 1.0 / c);
}

// ---------------------------------------------------------------------------
// Reductions

namespace detail {

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace detail

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return Var::from_op(Tensor::scalar(s), {x}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    p.accumulate(Tensor(p.value.shape(), n.grad[0]));
  });
}

/// Sum along one axis, keeping it with extent 1.
inline Var sum(const Var& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape os = x.shape();
  os[axis] = 1;
  Tensor out(os);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
  return Var::from_op(std::move(out), {x}, [sp](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.len + l) * sp.inner + i] = n.grad[o * sp.inner + i];
    p.accumulate(std::move(g));
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Var logsumexp(const Var& x) {
  const Tensor& xv = x.value();
  double m = -std::numeric_limits<double>::infinity();
  for (double v : xv.data()) m = std::max(m, v);
  double s = 0.0;
  for (double v : xv.data()) s += std::exp(v - m);
  const double out = std::isfinite(m) ? m + std::log(s) : m;
  return Var::from_op(Tensor::scalar(out), {x}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[0] * std::exp(p.value[i] - n.value[0]);
    p.accumulate(std::move(g));
  });
}

inline Var logsumexp(const Var& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape os = x.shape();
  os[axis] = 1;
  Tensor out(os);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, xv[(o * sp.len + l) * sp.inner + i]);
      double s = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) s += std::exp(xv[(o * sp.len + l) * sp.inner + i] - m);
      out[o * sp.inner + i] = std::isfinite(m) ? m + std::log(s) : m;
    }
  return Var::from_op(std::move(out), {x}, [sp](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t k = (o * sp.len + l) * sp.inner + i;
          g[k] = n.grad[o * sp.inner + i] * std::exp(p.value[k] - n.value[o * sp.inner + i]);
        }
    p.accumulate(std::move(g));
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& x, Shape s) {
  Tensor v = x.value().reshaped(std::move(s));
  return Var::from_op(std::move(v), {x}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    p.accumulate(n.grad.reshaped(p.value.shape()));
  });
}

inline Var transpose(const Var& x) {
  if (x.value().rank() != 2) throw ShapeError("transpose needs a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out({c, r});
  out.mat() = x.value().mat().transpose();
  return Var::from_op(std::move(out), {x}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    g.mat() = n.grad.mat().transpose();
    p.accumulate(std::move(g));
  });
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
inline Var permute(const Var& x, std::vector<std::size_t> perm) {
  const Shape& is = x.shape();
  const std::size_t r = is.size();
  if (perm.size() != r) throw ShapeError("permute rank mismatch");
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = is[perm[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t d = r; d-- > 1;) in_strides[d - 1] = in_strides[d] * is[d];
  std::vector<std::size_t> gather(r);
  for (std::size_t i = 0; i < r; ++i) gather[i] = in_strides[perm[i]];
  const std::vector<std::size_t> zero(r, 0);
  std::vector<std::size_t> map(shape_size(os));
  detail::for_each_broadcast(os, gather, zero, [&](std::size_t o, std::size_t i, std::size_t) { map[o] = i; });
  Tensor out(os);
  for (std::size_t o = 0; o < map.size(); ++o) out[o] = x.value()[map[o]];
  return Var::from_op(std::move(out), {x}, [map = std::move(map)](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t o = 0; o < map.size(); ++o) g[map[o]] = n.grad[o];
    p.accumulate(std::move(g));
  });
}

inline Var broadcast_to(const Var& x, const Shape& s) {
  const Shape os = broadcast_shape(x.shape(), s);
  if (os != s) throw ShapeError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(s));
  Tensor out = detail::broadcast_apply(x.value(), Tensor(s), [](double a, double) { return a; });
  return Var::from_op(std::move(out), {x}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    p.accumulate(reduce_to(n.grad, p.value.shape()));
  });
}

inline Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  Shape os = xs[0].shape();
  std::size_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != os.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != os[d])
        throw ShapeError("concat extent mismatch " + shape_str(s) + " vs " + shape_str(os));
    total += s.at(axis);
  }
  os[axis] = total;
  const auto sp = detail::split_axis(os, axis);
  Tensor out(os);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t len = x.shape()[axis];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i)
          out[(o * sp.len + off + l) * sp.inner + i] = x.value()[(o * len + l) * sp.inner + i];
    off += len;
  }
  return Var::from_op(std::move(out), xs, [sp, offsets](detail::Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = *n.parents[k];
      if (!p.requires_grad) continue;
      const std::size_t plen = p.value.size() / (sp.outer * sp.inner);
      Tensor g(p.value.shape());
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < plen; ++l)
          for (std::size_t i = 0; i < sp.inner; ++i)
            g[(o * plen + l) * sp.inner + i] = n.grad[(o * sp.len + offsets[k] + l) * sp.inner + i];
      p.accumulate(std::move(g));
    }
  });
}

/// Elements [begin, end) along one axis.
inline Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = detail::split_axis(x.shape(), axis);
  if (begin > end || end > sp.len)
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(x.shape()));
  Shape os = x.shape();
  os[axis] = end - begin;
  const std::size_t len = end - begin;
  Tensor out(os);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[(o * len + l) * sp.inner + i] = x.value()[(o * sp.len + begin + l) * sp.inner + i];
  return Var::from_op(std::move(out), {x}, [sp, begin, len](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i)
          g[(o * sp.len + begin + l) * sp.inner + i] = n.grad[(o * len + l) * sp.inner + i];
    p.accumulate(std::move(g));
  });
}

/// Selects rows of a matrix by index (gather along axis 0).
inline Var gather_rows(const Var& x, std::vector<std::size_t> idx) {
  if (x.value().rank() != 2) throw ShapeError("gather_rows needs a matrix");
  const std::size_t c = x.cols();
  Tensor out({idx.size(), c});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.rows()) throw ShapeError("gather_rows index out of range");
    for (std::size_t j = 0; j < c; ++j) out(r, j) = x.value()(idx[r], j);
  }
  return Var::from_op(std::move(out), {x}, [idx = std::move(idx), c](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) g(idx[r], j) += n.grad(r, j);
    p.accumulate(std::move(g));
  });
}

}  // namespace gibayes
