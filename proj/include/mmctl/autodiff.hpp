#pragma once

#include <deque>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "mmctl/ops.hpp"
#include "mmctl/tensor.hpp"

namespace mmctl {

// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

// Reverse-mode tape over 2-d matrices. Nodes are appended in evaluation
// order; backward() walks them in reverse. A node stores a backward closure
// only when at least one of its inputs needs a gradient, so a graph built
// with gradients disabled is a plain forward evaluator.
template <typename S>
class Graph {
 public:
  using Mat = Matrix<S>;
  using Backward = std::function<void(Graph&, int)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Mat value) {
    Node n;
    n.own = std::move(value);
    return push(std::move(n));
  }

  // Leaf bound to externally owned storage (a model parameter). The storage
  // must outlive the graph.
  Var parameter(const Mat& value, int param_id, bool trainable) {
    Node n;
    n.ref = &value;
    n.param_id = param_id;
    n.needs_grad = grad_enabled_ && trainable;
    return push(std::move(n));
  }

  Var record(Mat value, std::initializer_list<Var> inputs, Backward fn) {
    Node n;
    n.own = std::move(value);
    if (grad_enabled_) {
      for (Var v : inputs) {
        if (v.valid() && nodes_[idx(v)].needs_grad) n.needs_grad = true;
      }
      if (n.needs_grad) n.back = std::move(fn);
    }
    return push(std::move(n));
  }

  // Variant for ops with a runtime-sized input list.
  Var record(Mat value, std::span<const Var> inputs, Backward fn) {
    Node n;
    n.own = std::move(value);
    if (grad_enabled_) {
      for (Var v : inputs) {
        if (v.valid() && nodes_[idx(v)].needs_grad) n.needs_grad = true;
      }
      if (n.needs_grad) n.back = std::move(fn);
    }
    return push(std::move(n));
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_[idx(v)];
    return n.ref ? *n.ref : n.own;
  }

  bool needs_grad(Var v) const { return v.valid() && nodes_[idx(v)].needs_grad; }

  // Gradient accumulator for `v`, zero-initialised on first access.
  Mat& grad(Var v) {
    Node& n = nodes_[idx(v)];
    if (n.grad.size() == 0) {
      const Mat& val = n.ref ? *n.ref : n.own;
      n.grad = Mat::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  // Adds `e` to the gradient of `v`; the first contribution is assigned, which
  // skips zero-filling the accumulator.
  template <typename E>
  void accumulate(Var v, const E& e) {
    Node& n = nodes_[idx(v)];
    if (n.grad.size() == 0) {
      n.grad = e;
    } else {
      n.grad += e;
    }
  }

  const Mat& grad_of(int id) { return grad(Var{id}); }

  void backward(Var root) {
    const Mat& r = value(root);
    if (r.rows() != 1 || r.cols() != 1) throw DimensionError("backward: root must be a scalar");
    if (!needs_grad(root)) return;
    grad(root)(0, 0) = S(1);
    for (int i = idx(root); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.grad.size() != 0) n.back(*this, i);
    }
  }

  // Calls f(param_id, grad) for every parameter leaf that received a gradient.
  template <typename F>
  void for_each_param_grad(F&& f) const {
    for (const Node& n : nodes_) {
      if (n.param_id >= 0 && n.needs_grad && n.grad.size() != 0) f(n.param_id, n.grad);
    }
  }

 private:
  struct Node {
    Mat own;
    const Mat* ref = nullptr;
    Mat grad;
    bool needs_grad = false;
    int param_id = -1;
    Backward back;
  };

  static std::size_t idx(Var v) { return static_cast<std::size_t>(v.id); }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Each records its forward value and a closure that
// pushes the output gradient into whichever inputs need one.

namespace ad {

template <typename S>
Var matmul(Graph<S>& g, Var a, Var b) {
  return g.record(mul_acc(g.value(a), g.value(b)), {a, b}, [a, b](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    if (g.needs_grad(a)) g.accumulate(a, mul_acc(dy, g.value(b).transpose()));
    if (g.needs_grad(b)) g.accumulate(b, mul_acc(g.value(a).transpose(), dy));
  });
}

// x [n x in] * w [in x out] + b [1 x out]; `b` may be invalid.
template <typename S>
Var linear(Graph<S>& g, Var x, Var w, Var b = {}) {
  Matrix<S> y = mul_acc(g.value(x), g.value(w));
  if (b.valid()) y.rowwise() += g.value(b).row(0);
  return g.record(std::move(y), {x, w, b}, [x, w, b](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    if (g.needs_grad(x)) g.accumulate(x, mul_acc(dy, g.value(w).transpose()));
    if (g.needs_grad(w)) g.accumulate(w, mul_acc(g.value(x).transpose(), dy));
    if (b.valid() && g.needs_grad(b)) g.accumulate(b, dy.colwise().sum());
  });
}

template <typename S>
Var add(Graph<S>& g, Var a, Var b) {
  if (g.value(a).rows() != g.value(b).rows() || g.value(a).cols() != g.value(b).cols()) {
    throw ShapeError("add: operand shapes differ");
  }
  return g.record(g.value(a) + g.value(b), {a, b}, [a, b](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    if (g.needs_grad(a)) g.accumulate(a, dy);
    if (g.needs_grad(b)) g.accumulate(b, dy);
  });
}

// a + gamma * b with a constant gamma.
template <typename S>
Var add_scaled(Graph<S>& g, Var a, Var b, S gamma) {
  if (g.value(a).rows() != g.value(b).rows() || g.value(a).cols() != g.value(b).cols()) {
    throw ShapeError("add_scaled: operand shapes differ");
  }
  return g.record(g.value(a) + gamma * g.value(b), {a, b}, [a, b, gamma](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    if (g.needs_grad(a)) g.accumulate(a, dy);
    if (g.needs_grad(b)) g.accumulate(b, gamma * dy);
  });
}

// x + row (row broadcast over x's rows).
template <typename S>
Var add_row(Graph<S>& g, Var x, Var row) {
  if (g.value(row).rows() != 1 || g.value(row).cols() != g.value(x).cols()) {
    throw ShapeError("add_row: row width differs");
  }
  Matrix<S> y = g.value(x);
  y.rowwise() += g.value(row).row(0);
  return g.record(std::move(y), {x, row}, [x, row](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    if (g.needs_grad(x)) g.accumulate(x, dy);
    if (g.needs_grad(row)) g.accumulate(row, dy.colwise().sum());
  });
}

// x * (1 + scale) + shift, scale/shift broadcast rows.
template <typename S>
Var modulate(Graph<S>& g, Var x, Var shift, Var scale) {
  const Matrix<S>& xv = g.value(x);
  const RowVector<S> sc = g.value(scale).row(0).array() + S(1);
  Matrix<S> y = xv.array().rowwise() * sc.array();
  y.rowwise() += g.value(shift).row(0);
  return g.record(std::move(y), {x, shift, scale}, [x, shift, scale](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    if (g.needs_grad(x)) {
      const RowVector<S> sc = g.value(scale).row(0).array() + S(1);
      g.accumulate(x, Matrix<S>(dy.array().rowwise() * sc.array()));
    }
    if (g.needs_grad(shift)) g.accumulate(shift, dy.colwise().sum());
    if (g.needs_grad(scale)) {
      g.accumulate(scale, dy.cwiseProduct(g.value(x)).colwise().sum());
    }
  });
}

// x + y * (1 + gate), gate broadcast over rows.
template <typename S>
Var gated_residual(Graph<S>& g, Var x, Var y, Var gate) {
  const RowVector<S> gt = g.value(gate).row(0).array() + S(1);
  Matrix<S> out = g.value(x) + Matrix<S>(g.value(y).array().rowwise() * gt.array());
  return g.record(std::move(out), {x, y, gate}, [x, y, gate](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    if (g.needs_grad(x)) g.accumulate(x, dy);
    if (g.needs_grad(y)) {
      const RowVector<S> gt = g.value(gate).row(0).array() + S(1);
      g.accumulate(y, Matrix<S>(dy.array().rowwise() * gt.array()));
    }
    if (g.needs_grad(gate)) g.accumulate(gate, dy.cwiseProduct(g.value(y)).colwise().sum());
  });
}

template <typename S>
Var gelu(Graph<S>& g, Var x) {
  Matrix<S> y = g.value(x).unaryExpr([](S v) { return mmctl::gelu(v); });
  return g.record(std::move(y), {x}, [x](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    g.accumulate(x, Matrix<S>(dy.cwiseProduct(g.value(x).unaryExpr([](S v) { return gelu_grad(v); }))));
  });
}

template <typename S>
Var silu(Graph<S>& g, Var x) {
  Matrix<S> y = g.value(x).unaryExpr([](S v) { return mmctl::silu(v); });
  return g.record(std::move(y), {x}, [x](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    g.accumulate(x, Matrix<S>(dy.cwiseProduct(g.value(x).unaryExpr([](S v) { return silu_grad(v); }))));
  });
}

// Row layer norm; gain/bias may be invalid (no affine tail).
template <typename S>
Var layer_norm(Graph<S>& g, Var x, Var gain, Var bias, double eps = 1e-6) {
  RowVector<S> rstd;
  Matrix<S> xhat = normalize_rows(g.value(x), eps, &rstd);
  Matrix<S> y = xhat;
  if (gain.valid()) y = y.array().rowwise() * g.value(gain).row(0).array();
  if (bias.valid()) y.rowwise() += g.value(bias).row(0);
  return g.record(
      std::move(y), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<S>& g, int self) {
        const auto& dy = g.grad_of(self);
        if (gain.valid() && g.needs_grad(gain)) g.accumulate(gain, dy.cwiseProduct(xhat).colwise().sum());
        if (bias.valid() && g.needs_grad(bias)) g.accumulate(bias, dy.colwise().sum());
        if (!g.needs_grad(x)) return;
        Matrix<S> dxhat = dy;
        if (gain.valid()) dxhat = dxhat.array().rowwise() * g.value(gain).row(0).array();
        const double d = static_cast<double>(xhat.cols());
        auto& dx = g.grad(x);
        for (Index r = 0; r < xhat.rows(); ++r) {
          double m1 = 0, m2 = 0;
          for (Index c = 0; c < xhat.cols(); ++c) {
            m1 += dxhat(r, c);
            m2 += static_cast<double>(dxhat(r, c)) * xhat(r, c);
          }
          m1 /= d;
          m2 /= d;
          for (Index c = 0; c < xhat.cols(); ++c) {
            dx(r, c) += static_cast<S>(rstd(r) * (dxhat(r, c) - m1 - xhat(r, c) * m2));
          }
        }
      });
}

// Multi-head attention; q/k/v already projected.
template <typename S>
Var attention(Graph<S>& g, Var q, Var k, Var v, Index heads, std::vector<std::uint8_t> key_valid = {}) {
  std::vector<Matrix<S>> probs;
  Matrix<S> y = attention_rows(g.value(q), g.value(k), g.value(v), heads,
                               std::span<const std::uint8_t>(key_valid), &probs);
  return g.record(std::move(y), {q, k, v}, [q, k, v, heads, probs = std::move(probs)](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    const Matrix<S>& qv = g.value(q);
    const Matrix<S>& kv = g.value(k);
    const Matrix<S>& vv = g.value(v);
    const Index dh = qv.cols() / heads;
    const Index dv = vv.cols() / heads;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    const bool gq = g.needs_grad(q), gk = g.needs_grad(k), gv = g.needs_grad(v);
    for (Index h = 0; h < heads; ++h) {
      const Matrix<S>& p = probs[static_cast<std::size_t>(h)];
      const auto dyh = dy.middleCols(h * dv, dv);
      if (gv) g.grad(v).middleCols(h * dv, dv) += mul_acc(p.transpose(), dyh);
      if (!gq && !gk) continue;
      Matrix<S> dp = mul_acc(dyh, vv.middleCols(h * dv, dv).transpose());
      // softmax backward: ds = p * (dp - rowsum(dp * p))
      Matrix<S> ds(p.rows(), p.cols());
      for (Index r = 0; r < p.rows(); ++r) {
        double dot = 0;
        for (Index c = 0; c < p.cols(); ++c) dot += static_cast<double>(dp(r, c)) * p(r, c);
        for (Index c = 0; c < p.cols(); ++c) ds(r, c) = static_cast<S>(p(r, c) * (dp(r, c) - dot));
      }
      ds *= scale;
      if (gq) g.grad(q).middleCols(h * dh, dh) += mul_acc(ds, kv.middleCols(h * dh, dh));
      if (gk) g.grad(k).middleCols(h * dh, dh) += mul_acc(ds.transpose(), qv.middleCols(h * dh, dh));
    }
  });
}

template <typename S>
Var concat_rows(Graph<S>& g, const std::vector<Var>& parts) {
  Index rows = 0, cols = -1;
  for (Var p : parts) {
    const auto& m = g.value(p);
    if (cols >= 0 && m.cols() != cols) throw ShapeError("concat_rows: widths differ");
    cols = m.cols();
    rows += m.rows();
  }
  Matrix<S> y(rows, std::max<Index>(cols, 0));
  Index at = 0;
  for (Var p : parts) {
    const auto& m = g.value(p);
    y.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  return g.record(std::move(y), std::span<const Var>(parts), [parts](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    Index at = 0;
    for (Var p : parts) {
      const Index r = g.value(p).rows();
      if (g.needs_grad(p)) g.accumulate(p, dy.middleRows(at, r));
      at += r;
    }
  });
}

template <typename S>
Var concat_cols(Graph<S>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row counts differ");
  Matrix<S> y(av.rows(), av.cols() + bv.cols());
  y.leftCols(av.cols()) = av;
  y.rightCols(bv.cols()) = bv;
  const Index ca = av.cols(), cb = bv.cols();
  return g.record(std::move(y), {a, b}, [a, b, ca, cb](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    if (g.needs_grad(a)) g.accumulate(a, dy.leftCols(ca));
    if (g.needs_grad(b)) g.accumulate(b, dy.rightCols(cb));
  });
}

template <typename S>
Var slice_rows(Graph<S>& g, Var x, Index start, Index count) {
  const auto& xv = g.value(x);
  if (start < 0 || count < 0 || start + count > xv.rows()) throw ShapeError("slice_rows: out of range");
  return g.record(Matrix<S>(xv.middleRows(start, count)), {x}, [x, start, count](Graph<S>& g, int self) {
    g.grad(x).middleRows(start, count) += g.grad_of(self);
  });
}

template <typename S>
Var slice_cols(Graph<S>& g, Var x, Index start, Index count) {
  const auto& xv = g.value(x);
  if (start < 0 || count < 0 || start + count > xv.cols()) throw ShapeError("slice_cols: out of range");
  return g.record(Matrix<S>(xv.middleCols(start, count)), {x}, [x, start, count](Graph<S>& g, int self) {
    g.grad(x).middleCols(start, count) += g.grad_of(self);
  });
}

// Row gather: out[i] = table[ids[i]].
template <typename S>
Var gather_rows(Graph<S>& g, Var table, std::vector<Index> ids) {
  const auto& tv = g.value(table);
  Matrix<S> y(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw ShapeError("gather_rows: index out of range");
    y.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  return g.record(std::move(y), {table}, [table, ids = std::move(ids)](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    auto& dt = g.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += dy.row(static_cast<Index>(i));
  });
}

template <typename S>
Var mean_rows(Graph<S>& g, Var x) {
  const auto& xv = g.value(x);
  const Index n = xv.rows();
  Matrix<S> y = xv.colwise().sum() / static_cast<S>(std::max<Index>(n, 1));
  return g.record(std::move(y), {x}, [x, n](Graph<S>& g, int self) {
    const RowVector<S> d = g.grad_of(self).row(0) / static_cast<S>(std::max<Index>(n, 1));
    g.grad(x).rowwise() += d;
  });
}

// Mean squared error against a constant target; 1x1 result.
template <typename S>
Var mse(Graph<S>& g, Var pred, const Matrix<S>& target) {
  const auto& p = g.value(pred);
  if (p.rows() != target.rows() || p.cols() != target.cols()) throw ShapeError("mse: shape mismatch");
  const Index n = p.size();
  double acc = 0;
  for (Index i = 0; i < n; ++i) {
    const double d = static_cast<double>(p.data()[i]) - target.data()[i];
    acc += d * d;
  }
  Matrix<S> y(1, 1);
  y(0, 0) = static_cast<S>(acc / static_cast<double>(std::max<Index>(n, 1)));
  return g.record(std::move(y), {pred}, [pred, target, n](Graph<S>& g, int self) {
    const S s = g.grad_of(self)(0, 0) * static_cast<S>(2.0 / static_cast<double>(std::max<Index>(n, 1)));
    g.accumulate(pred, s * (g.value(pred) - target));
  });
}

// Weighted sum of 1x1 nodes with constant weights.
template <typename S>
Var weighted_sum(Graph<S>& g, const std::vector<Var>& xs, const std::vector<double>& w) {
  if (xs.size() != w.size()) throw ShapeError("weighted_sum: weight count differs");
  double acc = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) acc += w[i] * static_cast<double>(g.value(xs[i])(0, 0));
  Matrix<S> y(1, 1);
  y(0, 0) = static_cast<S>(acc);
  return g.record(std::move(y), std::span<const Var>(xs), [xs, w](Graph<S>& g, int self) {
    const S d = g.grad_of(self)(0, 0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (g.needs_grad(xs[i])) g.grad(xs[i])(0, 0) += static_cast<S>(w[i]) * d;
    }
  });
}

}  // namespace ad
}  // namespace mmctl
