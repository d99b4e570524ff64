#pragma once

// Reverse-mode differentiation over a dynamically recorded graph of dense
// matrix ops. Vectors are D x 1 column matrices; scalars are 1 x 1.
//
// A Tape owns every node. Nodes are appended in evaluation order, so the
// reverse of insertion order is a valid topological order and backward()
// visits each node exactly once.

#include "abound/numgrad.hpp"

#include <functional>
#include <vector>

namespace abound::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Matrix value);
  /// Non-differentiable input; gradients never flow into it.
  Var constant(Matrix value);
  /// Value-only copy of v: the result carries no linkage to v's history.
  Var detach(const Var& v) { return constant(v.value()); }

  Var record(Matrix value, std::vector<int> parents, Backward backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates adjoints to every node that
  /// was recorded before `loss`. `loss` must be 1 x 1.
  void backward(const Var& loss);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Adds `delta` to the adjoint of node `id` if it participates in differentiation.
  void accumulate(int id, const Matrix& delta);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Elementwise and linear algebra primitives.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // Hadamard
Var div(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var exp(const Var& a);
/// log(max(a, floor)); the gradient is zero where the floor is active.
Var log_floor(const Var& a, double floor = kLogFloor);
/// |a| with subgradient 0 at 0.
Var abs(const Var& a);
Var square(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
/// Frobenius norm (L2 norm for vectors). Gradient at 0 is taken as 0.
Var norm(const Var& a);
Var dot(const Var& a, const Var& b);

/// Row-wise softmax of a / tau with max subtraction.
Var softmax_rows(const Var& a, double tau = 1.0);
Var log_softmax_rows(const Var& a);
/// a / ||a|| (Frobenius). Throws DegenerateInput on zero input.
Var l2_normalize(const Var& a);
Var l2_normalize_rows(const Var& a);
/// x / sqrt(||x||^2 + eps) per row; smooth everywhere, safe on zero rows.
Var soft_normalize_rows(const Var& a, double eps = 1e-6);
/// Cosine similarity of two vectors.
Var cosine(const Var& a, const Var& b);

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var element(const Var& a, Eigen::Index r, Eigen::Index c);
/// Row-major reinterpretation of a into rows x cols.
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }

}  // namespace abound::ad
