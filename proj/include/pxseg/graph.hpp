#pragma once

#include "pxseg/common.hpp"

#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace pxseg {

/// Handle into a Graph's node list.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Dynamic reverse-mode tape over flat Eigen arrays. Nodes carry an optional
/// shape tag: spatial tensors are (channels, dims) with channel-major layout,
/// plain vectors have channels == size and dims == 1x1x1.
template <class S>
class Graph {
 public:
  struct Shape {
    int channels = 0;
    Dims3 dims{1, 1, 1};
    long size() const { return static_cast<long>(channels) * dims.voxels(); }
    bool operator==(const Shape&) const = default;
  };

  struct Node {
    VecX<S> value;
    VecX<S> grad;  // lazily allocated
    Shape shape;
    bool requires_grad = false;
    std::function<void(Graph&, int)> backward;  // null for leaves/constants
  };

  Var constant(Shape shape, VecX<S> value) { return push(shape, std::move(value), false, nullptr); }

  Var leaf(Shape shape, VecX<S> value) { return push(shape, std::move(value), true, nullptr); }

  Var vector_constant(VecX<S> value) {
    Shape s{static_cast<int>(value.size()), {1, 1, 1}};
    return constant(s, std::move(value));
  }
  Var vector_leaf(VecX<S> value) {
    Shape s{static_cast<int>(value.size()), {1, 1, 1}};
    return leaf(s, std::move(value));
  }

  Var push(Shape shape, VecX<S> value, bool requires_grad,
           std::function<void(Graph&, int)> backward) {
    require(value.size() == shape.size(), "Graph: value size does not match shape");
    Node n;
    n.value = std::move(value);
    n.shape = shape;
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(Var v) { return nodes_.at(v.id); }
  const Node& node(Var v) const { return nodes_.at(v.id); }
  const VecX<S>& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }

  S scalar(Var v) const {
    require(nodes_.at(v.id).value.size() == 1, "Graph: not a scalar node");
    return nodes_.at(v.id).value[0];
  }

  /// Accumulates into a node's grad buffer, allocating on first touch.
  VecX<S>& grad(int id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() == 0) n.grad = VecX<S>::Zero(n.value.size());
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_.at(id).grad.size() != 0; }

  /// Reverse sweep from a scalar root. Nodes are appended in topological
  /// order, so a single backwards pass over ids suffices.
  void backward(Var root) {
    require(nodes_.at(root.id).value.size() == 1, "backward: root must be scalar");
    grad(root.id)[0] += S(1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
      n.backward(*this, id);
    }
  }

  int size() const { return static_cast<int>(nodes_.size()); }

  /// True if any input propagates gradient; derived nodes inherit this.
  bool any_requires(std::initializer_list<Var> vars) const {
    for (Var v : vars)
      if (nodes_.at(v.id).requires_grad) return true;
    return false;
  }

 private:
  std::vector<Node> nodes_;
};

// ---- elementwise ops ----

namespace gradop {

// Adds `delta` into parent `pid`'s grad if it participates in the sweep.
template <class S>
void accumulate(Graph<S>& g, int pid, const VecX<S>& delta) {
  if (g.node(Var{pid}).requires_grad) g.grad(pid) += delta;
}

}  // namespace gradop

template <class S>
Var add(Graph<S>& g, Var a, Var b) {
  require(g.value(a).size() == g.value(b).size(), "add: size mismatch");
  return g.push(g.shape(a), g.value(a) + g.value(b), g.any_requires({a, b}),
                [a, b](Graph<S>& gr, int self) {
                  gradop::accumulate(gr, a.id, gr.grad(self));
                  gradop::accumulate(gr, b.id, gr.grad(self));
                });
}

template <class S>
Var sub(Graph<S>& g, Var a, Var b) {
  require(g.value(a).size() == g.value(b).size(), "sub: size mismatch");
  return g.push(g.shape(a), g.value(a) - g.value(b), g.any_requires({a, b}),
                [a, b](Graph<S>& gr, int self) {
                  gradop::accumulate(gr, a.id, gr.grad(self));
                  gradop::accumulate(gr, b.id, VecX<S>(-gr.grad(self)));
                });
}

template <class S>
Var mul(Graph<S>& g, Var a, Var b) {
  require(g.value(a).size() == g.value(b).size(), "mul: size mismatch");
  return g.push(g.shape(a), g.value(a) * g.value(b), g.any_requires({a, b}),
                [a, b](Graph<S>& gr, int self) {
                  gradop::accumulate(gr, a.id, VecX<S>(gr.grad(self) * gr.value(b)));
                  gradop::accumulate(gr, b.id, VecX<S>(gr.grad(self) * gr.value(a)));
                });
}

template <class S>
Var cdiv(Graph<S>& g, Var a, Var b) {
  require(g.value(a).size() == g.value(b).size(), "cdiv: size mismatch");
  return g.push(g.shape(a), g.value(a) / g.value(b), g.any_requires({a, b}),
                [a, b](Graph<S>& gr, int self) {
                  const VecX<S>& bv = gr.value(b);
                  gradop::accumulate(gr, a.id, VecX<S>(gr.grad(self) / bv));
                  gradop::accumulate(gr, b.id,
                                     VecX<S>(-gr.grad(self) * gr.value(a) / (bv * bv)));
                });
}

template <class S>
Var add_scalar(Graph<S>& g, Var a, S c) {
  return g.push(g.shape(a), g.value(a) + c, g.any_requires({a}),
                [a](Graph<S>& gr, int self) { gradop::accumulate(gr, a.id, gr.grad(self)); });
}

template <class S>
Var mul_scalar(Graph<S>& g, Var a, S c) {
  return g.push(g.shape(a), g.value(a) * c, g.any_requires({a}),
                [a, c](Graph<S>& gr, int self) {
                  gradop::accumulate(gr, a.id, VecX<S>(gr.grad(self) * c));
                });
}

template <class S>
Var relu(Graph<S>& g, Var a) {
  return g.push(g.shape(a), g.value(a).max(S(0)), g.any_requires({a}),
                [a](Graph<S>& gr, int self) {
                  VecX<S> mask = (gr.value(a) > S(0)).template cast<S>();
                  gradop::accumulate(gr, a.id, VecX<S>(gr.grad(self) * mask));
                });
}

/// scale * tanh(x), the bounded flow-head activation.
template <class S>
Var scaled_tanh(Graph<S>& g, Var a, S scale) {
  VecX<S> t = g.value(a).tanh();
  return g.push(g.shape(a), VecX<S>(t * scale), g.any_requires({a}),
                [a, scale, t](Graph<S>& gr, int self) {
                  gradop::accumulate(gr, a.id,
                                     VecX<S>(gr.grad(self) * scale * (S(1) - t * t)));
                });
}

template <class S>
Var sigmoid(Graph<S>& g, Var a) {
  VecX<S> y = (S(1) / (S(1) + (-g.value(a)).exp()));
  return g.push(g.shape(a), y, g.any_requires({a}),
                [a, y](Graph<S>& gr, int self) {
                  gradop::accumulate(gr, a.id, VecX<S>(gr.grad(self) * y * (S(1) - y)));
                });
}

/// log(clamp(x, lo, hi)); gradient passes only inside the clamp band.
template <class S>
Var log_clamped(Graph<S>& g, Var a, S lo, S hi) {
  VecX<S> clamped = g.value(a).max(lo).min(hi);
  return g.push(g.shape(a), clamped.log(), g.any_requires({a}),
                [a, lo, hi, clamped](Graph<S>& gr, int self) {
                  const VecX<S>& x = gr.value(a);
                  VecX<S> mask = ((x > lo) && (x < hi)).template cast<S>();
                  gradop::accumulate(gr, a.id, VecX<S>(gr.grad(self) * mask / clamped));
                });
}

template <class S>
Var abs_diff(Graph<S>& g, Var a, Var b) {
  require(g.value(a).size() == g.value(b).size(), "abs_diff: size mismatch");
  VecX<S> d = g.value(a) - g.value(b);
  return g.push(g.shape(a), d.abs(), g.any_requires({a, b}),
                [a, b, d](Graph<S>& gr, int self) {
                  VecX<S> s = d.sign();
                  gradop::accumulate(gr, a.id, VecX<S>(gr.grad(self) * s));
                  gradop::accumulate(gr, b.id, VecX<S>(-gr.grad(self) * s));
                });
}

template <class S>
Var mean_all(Graph<S>& g, Var a) {
  const long n = g.value(a).size();
  VecX<S> out(1);
  out[0] = g.value(a).mean();
  typename Graph<S>::Shape s{1, {1, 1, 1}};
  return g.push(s, std::move(out), g.any_requires({a}),
                [a, n](Graph<S>& gr, int self) {
                  gradop::accumulate(
                      gr, a.id, VecX<S>(VecX<S>::Constant(n, gr.grad(self)[0] / S(n))));
                });
}

template <class S>
Var sum_all(Graph<S>& g, Var a) {
  const long n = g.value(a).size();
  VecX<S> out(1);
  out[0] = g.value(a).sum();
  typename Graph<S>::Shape s{1, {1, 1, 1}};
  return g.push(s, std::move(out), g.any_requires({a}),
                [a, n](Graph<S>& gr, int self) {
                  gradop::accumulate(gr, a.id,
                                     VecX<S>(VecX<S>::Constant(n, gr.grad(self)[0])));
                });
}

/// bias + sum_i coef_i * scalar_i. The workhorse for combining loss terms.
template <class S>
Var affine_combine(Graph<S>& g, const std::vector<Var>& terms, const std::vector<S>& coefs,
                   S bias = S(0)) {
  require(terms.size() == coefs.size(), "affine_combine: size mismatch");
  S total = bias;
  bool rg = false;
  for (size_t i = 0; i < terms.size(); ++i) {
    require(g.value(terms[i]).size() == 1, "affine_combine: terms must be scalar");
    total += coefs[i] * g.scalar(terms[i]);
    rg = rg || g.node(terms[i]).requires_grad;
  }
  VecX<S> out(1);
  out[0] = total;
  typename Graph<S>::Shape s{1, {1, 1, 1}};
  auto terms_copy = terms;
  auto coefs_copy = coefs;
  return g.push(s, std::move(out), rg,
                [terms_copy, coefs_copy](Graph<S>& gr, int self) {
                  const S go = gr.grad(self)[0];
                  for (size_t i = 0; i < terms_copy.size(); ++i) {
                    VecX<S> d(1);
                    d[0] = go * coefs_copy[i];
                    gradop::accumulate(gr, terms_copy[i].id, d);
                  }
                });
}

/// Reinterprets a flat vector as a spatial tensor (or vice versa).
template <class S>
Var reshape(Graph<S>& g, Var a, typename Graph<S>::Shape shape) {
  require(shape.size() == g.value(a).size(), "reshape: size mismatch");
  return g.push(shape, g.value(a), g.any_requires({a}),
                [a](Graph<S>& gr, int self) { gradop::accumulate(gr, a.id, gr.grad(self)); });
}

}  // namespace pxseg
