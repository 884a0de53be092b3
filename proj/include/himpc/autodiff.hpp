#pragma once

// Reverse-mode differentiation over dense matrices. Only the operations
// the encoders and contrastive losses need are provided.

#include "himpc/core.hpp"

#include <functional>
#include <span>
#include <vector>

namespace himpc {

struct Var {
  int id = -1;
};

class Tape {
 public:
  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var variable(Matrix value) { return push(std::move(value), true, {}); }

  const Matrix& value(Var v) const { return nodes_[idx(v)].value; }

  /// Gradient of the last backward() root w.r.t. v; zeros if v did not
  /// influence the root.
  Matrix grad(Var v) const {
    const auto& n = nodes_[idx(v)];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool requires_grad(Var v) const { return nodes_[idx(v)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Records a node computed from parents. backward receives the node's
  /// upstream gradient and must call accumulate() on parents.
  Var record(Matrix value, std::initializer_list<Var> parents,
             std::function<void(Tape&, const Matrix&)> backward) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_[idx(p)].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  void accumulate(Var v, const Matrix& g) {
    auto& n = nodes_[idx(v)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void backward(Var root) {
    require(value(root).size() == 1, "backward() needs a scalar root");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[idx(root)].grad = Matrix::Ones(1, 1);
    for (int i = idx(root); i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      const Matrix g = n.grad;
      n.backward(*this, g);
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(Tape&, const Matrix&)> backward;
  };

  std::size_t idx(Var v) const {
    require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), "invalid tape variable");
    return static_cast<std::size_t>(v.id);
  }

  Var push(Matrix value, bool requires_grad, std::function<void(Tape&, const Matrix&)> backward) {
    nodes_.push_back({std::move(value), Matrix(), requires_grad, std::move(backward)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

namespace ops {

inline void check_shape(bool ok, const char* op) {
  if (!ok) throw ValidationError(std::string("shape mismatch in ") + op);
}

/// a * b^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  check_shape(A.cols() == B.cols(), "matmul_nt");
  return t.record(A * B.transpose(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b));
    if (t.requires_grad(b)) t.accumulate(b, g.transpose() * t.value(a));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  check_shape(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(), "add");
  return t.record(t.value(a) + t.value(b), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

/// Adds the 1 x n row b to every row of a.
inline Var add_row(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  check_shape(B.rows() == 1 && B.cols() == A.cols(), "add_row");
  Matrix out = A.rowwise() + B.row(0);
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, g.colwise().sum());
  });
}

inline Var relu(Tape& t, Var a) {
  Matrix out = t.value(a).cwiseMax(0.0);
  return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (t.value(a).array() > 0.0).select(g, 0.0));
  });
}

inline Var scale(Tape& t, Var a, double s) {
  return t.record(t.value(a) * s, {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

inline Var hadamard(Tape& t, Var a, Var b) {
  check_shape(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(), "hadamard");
  Matrix out = t.value(a).cwiseProduct(t.value(b));
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

/// Averages consecutive blocks of `group` rows: (N*group) x n -> N x n.
inline Var mean_groups(Tape& t, Var a, int group) {
  const Matrix& A = t.value(a);
  check_shape(group >= 1 && A.rows() % group == 0, "mean_groups");
  const Eigen::Index n = A.rows() / group;
  Matrix out(n, A.cols());
  for (Eigen::Index i = 0; i < n; ++i) out.row(i) = A.middleRows(i * group, group).colwise().mean();
  return t.record(std::move(out), {a}, [a, group](Tape& t, const Matrix& g) {
    Matrix ga(g.rows() * group, g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      ga.middleRows(i * group, group).rowwise() = g.row(i) / static_cast<double>(group);
    t.accumulate(a, ga);
  });
}

inline Var gather_rows(Tape& t, Var a, std::vector<int> rows) {
  const Matrix& A = t.value(a);
  Matrix out(static_cast<Eigen::Index>(rows.size()), A.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    check_shape(rows[r] >= 0 && rows[r] < A.rows(), "gather_rows");
    out.row(static_cast<Eigen::Index>(r)) = A.row(rows[r]);
  }
  return t.record(std::move(out), {a}, [a, rows = std::move(rows)](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
    for (std::size_t r = 0; r < rows.size(); ++r) ga.row(rows[r]) += g.row(static_cast<Eigen::Index>(r));
    t.accumulate(a, ga);
  });
}

/// Row-wise dot products: N x n, N x n -> N x 1.
inline Var rowwise_dot(Tape& t, Var a, Var b) {
  check_shape(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(), "rowwise_dot");
  Matrix out = t.value(a).cwiseProduct(t.value(b)).rowwise().sum();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, t.value(b).array().colwise() * g.col(0).array());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).array().colwise() * g.col(0).array());
  });
}

/// Softmax within consecutive blocks of `group` entries of a column.
inline Var softmax_groups(Tape& t, Var a, int group) {
  const Matrix& A = t.value(a);
  check_shape(A.cols() == 1 && group >= 1 && A.rows() % group == 0, "softmax_groups");
  Matrix out(A.rows(), 1);
  for (Eigen::Index s = 0; s < A.rows(); s += group) {
    auto x = A.col(0).segment(s, group);
    Vector e = (x.array() - x.maxCoeff()).exp();
    out.col(0).segment(s, group) = e / e.sum();
  }
  Matrix y = out;
  return t.record(std::move(out), {a}, [a, group, y = std::move(y)](Tape& t, const Matrix& g) {
    Matrix ga(y.rows(), 1);
    for (Eigen::Index s = 0; s < y.rows(); s += group) {
      auto ys = y.col(0).segment(s, group);
      auto gs = g.col(0).segment(s, group);
      const double inner = ys.dot(gs);
      ga.col(0).segment(s, group) = ys.cwiseProduct((gs.array() - inner).matrix());
    }
    t.accumulate(a, ga);
  });
}

/// Per-row -log softmax(logits)[target]: N x C -> N x 1.
inline Var cross_entropy_rows(Tape& t, Var logits, std::vector<int> targets) {
  const Matrix& L = t.value(logits);
  check_shape(static_cast<Eigen::Index>(targets.size()) == L.rows(), "cross_entropy_rows");
  Matrix out(L.rows(), 1);
  Matrix probs(L.rows(), L.cols());
  for (Eigen::Index r = 0; r < L.rows(); ++r) {
    const int c = targets[static_cast<std::size_t>(r)];
    check_shape(c >= 0 && c < L.cols(), "cross_entropy_rows target");
    const double mx = L.row(r).maxCoeff();
    Eigen::RowVectorXd e = (L.row(r).array() - mx).exp();
    const double z = e.sum();
    out(r, 0) = std::log(z) + mx - L(r, c);
    probs.row(r) = e / z;
  }
  return t.record(std::move(out), {logits},
                  [logits, targets = std::move(targets), probs = std::move(probs)](Tape& t, const Matrix& g) {
                    Matrix gl = probs;
                    for (Eigen::Index r = 0; r < gl.rows(); ++r) {
                      gl(r, targets[static_cast<std::size_t>(r)]) -= 1.0;
                      gl.row(r) *= g(r, 0);
                    }
                    t.accumulate(logits, gl);
                  });
}

inline Var sum(Tape& t, Var a) {
  Matrix out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0)));
  });
}

}  // namespace ops
}  // namespace himpc
