#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every op records its parents and a backward closure; calling
// backward() on a 1x1 result walks the graph in reverse topological order.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vilseg/errors.hpp"

namespace vilseg::ad {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

template <typename S>
struct Node {
  Matrix<S> value;
  Matrix<S> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  template <typename Expr>
  void accumulate(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(Matrix<S> value, bool requires_grad = false) : node_(std::make_shared<Node<S>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  const Matrix<S>& value() const { return node_->value; }
  Matrix<S>& mutable_value() { return node_->value; }

  /// Gradient after backward(); zeros when nothing reached this node.
  Matrix<S> grad() const {
    if (node_->grad.size() == 0) return Matrix<S>::Zero(rows(), cols());
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  S item() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node<S>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

template <typename S>
Var<S> constant(Matrix<S> value) {
  return Var<S>(std::move(value), false);
}

template <typename S>
Var<S> parameter(Matrix<S> value) {
  return Var<S>(std::move(value), true);
}

template <typename S>
Var<S> scalar_constant(S v) {
  Matrix<S> m(1, 1);
  m(0, 0) = v;
  return constant<S>(std::move(m));
}

namespace detail {

template <typename S, typename Backward>
Var<S> make_op(Matrix<S> value, std::initializer_list<Var<S>> parents, Backward&& backward) {
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Var<S>(std::move(node));
}

template <typename S, typename Backward>
Var<S> make_op(Matrix<S> value, std::span<const Var<S>> parents, Backward&& backward) {
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  node->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const Var<S>& p) { return p.requires_grad(); });
  if (node->requires_grad) {
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Var<S>(std::move(node));
}

template <typename S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InputError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace detail

/// Runs reverse accumulation from a scalar root. Gradients accumulate into
/// every reachable node that requires them (call zero_grad on leaves between steps).
template <typename S>
void backward(const Var<S>& root) {
  if (root.rows() != 1 || root.cols() != 1) throw InputError("backward: root must be 1x1");
  if (!root.requires_grad()) return;

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix<S>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>& node = **it;
    if (node.backward && node.grad.size() != 0) node.backward(node);
  }
  // Interior gradients are no longer needed once propagated.
  for (Node<S>* node : order) {
    if (node->backward) node->grad.resize(0, 0);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  if (a.cols() != b.rows()) throw InputError("matmul: inner dimensions differ");
  return detail::make_op<S>(a.value() * b.value(), {a, b}, [](Node<S>& self) {
    Node<S>& A = *self.parents[0];
    Node<S>& B = *self.parents[1];
    if (A.requires_grad) A.accumulate(self.grad * B.value.transpose());
    if (B.requires_grad) B.accumulate(A.value.transpose() * self.grad);
  });
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
  return detail::make_op<S>(a.value().transpose(), {a}, [](Node<S>& self) {
    self.parents[0]->accumulate(self.grad.transpose());
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::check_same_shape(a, b, "add");
  return detail::make_op<S>(a.value() + b.value(), {a, b}, [](Node<S>& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::check_same_shape(a, b, "sub");
  return detail::make_op<S>(a.value() - b.value(), {a, b}, [](Node<S>& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(-self.grad);
  });
}

/// a + row, with the 1xN row broadcast over every row of a.
template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InputError("add_row: bias shape mismatch");
  Matrix<S> out = a.value().rowwise() + row.value().row(0);
  return detail::make_op<S>(std::move(out), {a, row}, [](Node<S>& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

/// Elementwise product.
template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::check_same_shape(a, b, "mul");
  Matrix<S> out = a.value().cwiseProduct(b.value());
  return detail::make_op<S>(std::move(out), {a, b}, [](Node<S>& self) {
    Node<S>& A = *self.parents[0];
    Node<S>& B = *self.parents[1];
    if (A.requires_grad) A.accumulate(self.grad.cwiseProduct(B.value));
    if (B.requires_grad) B.accumulate(self.grad.cwiseProduct(A.value));
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  return detail::make_op<S>(a.value() * factor, {a}, [factor](Node<S>& self) {
    self.parents[0]->accumulate(self.grad * factor);
  });
}

/// a * s where s is a 1x1 Var.
template <typename S>
Var<S> scale_by(const Var<S>& a, const Var<S>& s) {
  if (s.rows() != 1 || s.cols() != 1) throw InputError("scale_by: factor must be 1x1");
  return detail::make_op<S>(a.value() * s.item(), {a, s}, [](Node<S>& self) {
    Node<S>& A = *self.parents[0];
    Node<S>& F = *self.parents[1];
    const S f = F.value(0, 0);
    if (A.requires_grad) A.accumulate(self.grad * f);
    if (F.requires_grad) {
      Matrix<S> g(1, 1);
      g(0, 0) = self.grad.cwiseProduct(A.value).sum();
      F.accumulate(g);
    }
  });
}

template <typename S>
Var<S> exp(const Var<S>& a) {
  Matrix<S> out = a.value().array().exp().matrix();
  return detail::make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(self.value));
  });
}

template <typename S>
Var<S> reciprocal(const Var<S>& a) {
  if ((a.value().array() == S(0)).any()) throw NumericError("reciprocal: division by zero");
  Matrix<S> out = a.value().array().inverse().matrix();
  return detail::make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    self.parents[0]->accumulate(-self.grad.cwiseProduct(self.value.cwiseProduct(self.value)));
  });
}

/// ln(max(a, floor)); the gradient is zero where the floor is active.
template <typename S>
Var<S> log_floor(const Var<S>& a, S floor) {
  Matrix<S> out = a.value().array().max(floor).log().matrix();
  return detail::make_op<S>(std::move(out), {a}, [floor](Node<S>& self) {
    const Matrix<S>& x = self.parents[0]->value;
    Matrix<S> g = (x.array() > floor).select(self.grad.array() / x.array(), S(0)).matrix();
    self.parents[0]->accumulate(g);
  });
}

/// x * sigmoid(1.702 x), the GELU approximation used by CLIP-style transformers.
template <typename S>
Var<S> quick_gelu(const Var<S>& a) {
  const auto& x = a.value().array();
  Matrix<S> sig = (S(1) / (S(1) + (-S(1.702) * x).exp())).matrix();
  Matrix<S> out = (x * sig.array()).matrix();
  return detail::make_op<S>(std::move(out), {a}, [sig = std::move(sig)](Node<S>& self) {
    const auto& x = self.parents[0]->value.array();
    const auto s = sig.array();
    Matrix<S> d = (s + S(1.702) * x * s * (S(1) - s)).matrix();
    self.parents[0]->accumulate(self.grad.cwiseProduct(d));
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

template <typename S>
Var<S> softmax_rows(const Var<S>& a) {
  Matrix<S> out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return detail::make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    const Matrix<S>& y = self.value;
    Eigen::Matrix<S, Eigen::Dynamic, 1> dot = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix<S> g = y.cwiseProduct((self.grad.colwise() - dot));
    self.parents[0]->accumulate(g);
  });
}

template <typename S>
Var<S> log_softmax_rows(const Var<S>& a) {
  Matrix<S> out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const S m = row.maxCoeff();
    const S lse = m + std::log((row.array() - m).exp().sum());
    row.array() -= lse;
  }
  return detail::make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    Matrix<S> p = self.value.array().exp().matrix();
    Eigen::Matrix<S, Eigen::Dynamic, 1> total = self.grad.rowwise().sum();
    Matrix<S> g = self.grad - (p.array().colwise() * total.array()).matrix();
    self.parents[0]->accumulate(g);
  });
}

/// Row-wise layer normalization with learned 1xN gain and bias.
template <typename S>
Var<S> layer_norm_rows(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5)) {
  const Index n = x.cols();
  if (gain.cols() != n || bias.cols() != n) throw InputError("layer_norm_rows: parameter width mismatch");
  Matrix<S> xhat(x.rows(), n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r).array();
    const S mean = row.mean();
    const S var = (row - mean).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = ((row - mean) * inv_std(r)).matrix();
  }
  Matrix<S> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return detail::make_op<S>(
      std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n](Node<S>& self) {
        Node<S>& X = *self.parents[0];
        Node<S>& G = *self.parents[1];
        Node<S>& B = *self.parents[2];
        if (G.requires_grad) G.accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
        if (B.requires_grad) B.accumulate(self.grad.colwise().sum());
        if (X.requires_grad) {
          Matrix<S> dxhat = (self.grad.array().rowwise() * G.value.row(0).array()).matrix();
          Matrix<S> dx(dxhat.rows(), n);
          for (Index r = 0; r < dxhat.rows(); ++r) {
            const S sum_d = dxhat.row(r).sum();
            const S sum_dx = dxhat.row(r).dot(xhat.row(r));
            dx.row(r) = (inv_std(r) / S(n)) *
                        (S(n) * dxhat.row(r).array() - sum_d - xhat.row(r).array() * sum_dx).matrix();
          }
          X.accumulate(dx);
        }
      });
}

/// Scales each row to unit L2 norm. Zero rows are rejected.
template <typename S>
Var<S> l2_normalize_rows(const Var<S>& a) {
  Eigen::Matrix<S, Eigen::Dynamic, 1> norms = a.value().rowwise().norm();
  if ((norms.array() == S(0)).any()) throw InputError("l2_normalize_rows: zero-norm vector");
  Matrix<S> out = a.value().array().colwise() / norms.array();
  return detail::make_op<S>(std::move(out), {a}, [norms = std::move(norms)](Node<S>& self) {
    const Matrix<S>& y = self.value;
    Eigen::Matrix<S, Eigen::Dynamic, 1> dot = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix<S> g = (self.grad - (y.array().colwise() * dot.array()).matrix()).array().colwise() / norms.array();
    self.parents[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Var<S> sum(const Var<S>& a) {
  Matrix<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    const Matrix<S>& x = self.parents[0]->value;
    self.parents[0]->accumulate(Matrix<S>::Constant(x.rows(), x.cols(), self.grad(0, 0)));
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

/// Column vector of row sums.
template <typename S>
Var<S> row_sums(const Var<S>& a) {
  Matrix<S> out = a.value().rowwise().sum();
  return detail::make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    const Index cols = self.parents[0]->value.cols();
    self.parents[0]->accumulate(self.grad.replicate(1, cols));
  });
}

/// Row vector of column sums.
template <typename S>
Var<S> col_sums(const Var<S>& a) {
  Matrix<S> out = a.value().colwise().sum();
  return detail::make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    const Index rows = self.parents[0]->value.rows();
    self.parents[0]->accumulate(self.grad.replicate(rows, 1));
  });
}

// ---------------------------------------------------------------------------
// Structural

template <typename S>
Var<S> slice_rows(const Var<S>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw InputError("slice_rows: out of range");
  Matrix<S> out = a.value().middleRows(start, count);
  return detail::make_op<S>(std::move(out), {a}, [start, count](Node<S>& self) {
    Node<S>& A = *self.parents[0];
    Matrix<S> g = Matrix<S>::Zero(A.value.rows(), A.value.cols());
    g.middleRows(start, count) = self.grad;
    A.accumulate(g);
  });
}

template <typename S>
Var<S> slice_cols(const Var<S>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw InputError("slice_cols: out of range");
  Matrix<S> out = a.value().middleCols(start, count);
  return detail::make_op<S>(std::move(out), {a}, [start, count](Node<S>& self) {
    Node<S>& A = *self.parents[0];
    Matrix<S> g = Matrix<S>::Zero(A.value.rows(), A.value.cols());
    g.middleCols(start, count) = self.grad;
    A.accumulate(g);
  });
}

template <typename S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  if (parts.empty()) throw InputError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw InputError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<S> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::make_op<S>(std::move(out), parts, [](Node<S>& self) {
    Index offset = 0;
    for (auto& p : self.parents) {
      const Index r = p->value.rows();
      if (p->requires_grad) p->accumulate(self.grad.middleRows(offset, r));
      offset += r;
    }
  });
}

template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  if (parts.empty()) throw InputError("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw InputError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix<S> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make_op<S>(std::move(out), parts, [](Node<S>& self) {
    Index offset = 0;
    for (auto& p : self.parents) {
      const Index c = p->value.cols();
      if (p->requires_grad) p->accumulate(self.grad.middleCols(offset, c));
      offset += c;
    }
  });
}

/// out.row(i) = a.row(indices[i]); repeated indices scatter-add on the way back.
template <typename S>
Var<S> gather_rows(const Var<S>& a, std::vector<Index> indices) {
  Matrix<S> out(static_cast<Index>(indices.size()), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= a.rows()) throw InputError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(indices[i]);
  }
  return detail::make_op<S>(std::move(out), {a}, [indices = std::move(indices)](Node<S>& self) {
    Node<S>& A = *self.parents[0];
    Matrix<S> g = Matrix<S>::Zero(A.value.rows(), A.value.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) g.row(indices[i]) += self.grad.row(static_cast<Index>(i));
    A.accumulate(g);
  });
}

/// Column vector with out(i) = a(i, columns[i]).
template <typename S>
Var<S> pick(const Var<S>& a, std::vector<Index> columns) {
  if (static_cast<Index>(columns.size()) != a.rows()) throw InputError("pick: one column per row required");
  Matrix<S> out(a.rows(), 1);
  for (Index r = 0; r < a.rows(); ++r) {
    if (columns[r] < 0 || columns[r] >= a.cols()) throw InputError("pick: column out of range");
    out(r, 0) = a.value()(r, columns[r]);
  }
  return detail::make_op<S>(std::move(out), {a}, [columns = std::move(columns)](Node<S>& self) {
    Node<S>& A = *self.parents[0];
    Matrix<S> g = Matrix<S>::Zero(A.value.rows(), A.value.cols());
    for (Index r = 0; r < g.rows(); ++r) g(r, columns[r]) = self.grad(r, 0);
    A.accumulate(g);
  });
}

/// Same value, no gradient path.
template <typename S>
Var<S> detach(const Var<S>& a) {
  return constant<S>(a.value());
}

template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
  return add(a, b);
}

template <typename S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
  return sub(a, b);
}

}  // namespace vilseg::ad
