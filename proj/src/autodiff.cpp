#include "abound/autodiff.hpp"

#include "abound/errors.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

namespace abound::ad {

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw InvalidParameter("scalar() on a non-scalar node");
  return v(0, 0);
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), true, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, std::vector<int> parents, Backward backward) {
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [this](int p) { return requires_grad(p); });
  nodes_.push_back(Node{std::move(value), Matrix(), needs, needs ? std::move(backward) : nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Matrix& delta) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  n.grad += delta;
}

void Tape::backward(const Var& loss) {
  assert(loss.tape() == this);
  if (loss.rows() != 1 || loss.cols() != 1) throw InvalidParameter("backward() needs a scalar loss");
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    } else {
      n.grad.resize(0, 0);
    }
  }
  if (!nodes_[static_cast<std::size_t>(loss.id())].requires_grad) return;
  nodes_[static_cast<std::size_t>(loss.id())].grad(0, 0) = 1.0;
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.requires_grad && n.backward) n.backward(*this, i);
  }
}

namespace {

Tape& tape_of(const Var& a) {
  assert(a.valid());
  return *a.tape();
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidParameter(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(ib)));
    t.accumulate(ib, t.grad(self).cwiseProduct(t.value(ia)));
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value().cwiseQuotient(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& bv = t.value(ib);
    t.accumulate(ia, t.grad(self).cwiseQuotient(bv));
    if (t.requires_grad(ib)) {
      t.accumulate(ib, -t.grad(self).cwiseProduct(t.value(self)).cwiseQuotient(bv));
    }
  });
}

Var scale(const Var& a, double s) {
  const int ia = a.id();
  return tape_of(a).record(a.value() * s, {ia}, [ia, s](Tape& t, int self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

Var add_scalar(const Var& a, double s) {
  const int ia = a.id();
  return tape_of(a).record(a.value().array() + s, {ia}, [ia](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw InvalidParameter("matmul: inner dimension mismatch");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return tape_of(a).record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.requires_grad(ia)) t.accumulate(ia, t.grad(self) * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * t.grad(self));
  });
}

Var transpose(const Var& a) {
  const int ia = a.id();
  return tape_of(a).record(a.value().transpose(), {ia}, [ia](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

namespace {

// Elementwise op whose derivative is expressible from input x and output y.
template <typename Deriv>
Var unary(const Var& a, Matrix y, Deriv deriv) {
  const int ia = a.id();
  return tape_of(a).record(std::move(y), {ia}, [ia, deriv](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    const Matrix& out = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) d(i) = g(i) * deriv(x(i), out(i));
    t.accumulate(ia, d);
  });
}

double sigmoid_scalar(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Var tanh(const Var& a) {
  return unary(a, a.value().array().tanh().matrix(),
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(a, a.value().unaryExpr(&sigmoid_scalar),
               [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& a) {
  return unary(a, a.value().unaryExpr([](double x) { return x * sigmoid_scalar(x); }),
               [](double x, double) {
                 const double s = sigmoid_scalar(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Var exp(const Var& a) {
  return unary(a, a.value().array().exp().matrix(), [](double, double y) { return y; });
}

Var log_floor(const Var& a, double floor) {
  return unary(a, a.value().unaryExpr([floor](double x) { return std::log(std::max(x, floor)); }),
               [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Var abs(const Var& a) {
  return unary(a, a.value().cwiseAbs(),
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, a.value().array().square().matrix(), [](double x, double) { return 2.0 * x; });
}

Var sum(const Var& a) {
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return tape_of(a).record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), t.grad(self)(0, 0)));
  });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var norm(const Var& a) {
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().norm();
  return tape_of(a).record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const double n = t.value(self)(0, 0);
    if (n == 0.0) return;
    t.accumulate(ia, t.value(ia) * (t.grad(self)(0, 0) / n));
  });
}

Var dot(const Var& a, const Var& b) {
  check_same_shape(a, b, "dot");
  const int ia = a.id(), ib = b.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseProduct(b.value()).sum();
  return tape_of(a).record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    t.accumulate(ia, t.value(ib) * g);
    t.accumulate(ib, t.value(ia) * g);
  });
}

Var softmax_rows(const Var& a, double tau) {
  if (!(tau > 0.0)) throw InvalidParameter("softmax temperature must be > 0");
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    y.row(r) = ((x.row(r).array() - mx) / tau).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  const int ia = a.id();
  return tape_of(a).record(std::move(y), {ia}, [ia, tau](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double inner = g.row(r).dot(y.row(r));
      d.row(r) = (y.row(r).array() * (g.row(r).array() - inner) / tau).matrix();
    }
    t.accumulate(ia, d);
  });
}

Var log_softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    const double lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    y.row(r) = x.row(r).array() - lse;
  }
  const int ia = a.id();
  return tape_of(a).record(std::move(y), {ia}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double gs = g.row(r).sum();
      d.row(r) = g.row(r).array() - y.row(r).array().exp() * gs;
    }
    t.accumulate(ia, d);
  });
}

Var l2_normalize(const Var& a) {
  const double n = a.value().norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateInput("cannot normalize a zero or non-finite vector");
  const int ia = a.id();
  return tape_of(a).record(a.value() / n, {ia}, [ia, n](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    const double inner = y.cwiseProduct(g).sum();
    t.accumulate(ia, (g - y * inner) / n);
  });
}

Var l2_normalize_rows(const Var& a) {
  const Matrix& x = a.value();
  Vector norms = x.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms[r] > 0.0) || !std::isfinite(norms[r])) throw DegenerateInput("cannot normalize a zero row");
  }
  Matrix y = norms.cwiseInverse().asDiagonal() * x;
  const int ia = a.id();
  return tape_of(a).record(std::move(y), {ia}, [ia, norms](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double inner = y.row(r).dot(g.row(r));
      d.row(r) = (g.row(r) - y.row(r) * inner) / norms[r];
    }
    t.accumulate(ia, d);
  });
}

Var soft_normalize_rows(const Var& a, double eps) {
  const Matrix& x = a.value();
  Vector scale = (x.rowwise().squaredNorm().array() + eps).sqrt().matrix();
  Matrix y = scale.cwiseInverse().asDiagonal() * x;
  const int ia = a.id();
  return tape_of(a).record(std::move(y), {ia}, [ia, scale](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    const Matrix& g = t.grad(self);
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double s = scale[r];
      d.row(r) = g.row(r) / s - x.row(r) * (x.row(r).dot(g.row(r)) / (s * s * s));
    }
    t.accumulate(ia, d);
  });
}

Var cosine(const Var& a, const Var& b) {
  return dot(l2_normalize(a), l2_normalize(b));
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw InvalidParameter("slice_rows out of range");
  const int ia = a.id();
  Matrix out = a.value().middleRows(start, count);
  return tape_of(a).record(std::move(out), {ia}, [ia, start, count](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    d.middleRows(start, count) = t.grad(self);
    t.accumulate(ia, d);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidParameter("concat_rows of nothing");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw InvalidParameter("concat_rows: column mismatch");
    offsets.push_back(rows);
    rows += p.rows();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  }
  return tape_of(parts.front()).record(std::move(out), ids, [ids, offsets](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.requires_grad(ids[i])) continue;
      t.accumulate(ids[i], g.middleRows(offsets[i], t.value(ids[i]).rows()));
    }
  });
}

Var element(const Var& a, Eigen::Index r, Eigen::Index c) {
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value()(r, c);
  return tape_of(a).record(std::move(out), {ia}, [ia, r, c](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    d(r, c) = t.grad(self)(0, 0);
    t.accumulate(ia, d);
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& x = a.value();
  if (rows * cols != x.size()) throw InvalidParameter("reshape: size mismatch");
  const Eigen::Index in_cols = x.cols();
  Matrix out(rows, cols);
  for (Eigen::Index k = 0; k < x.size(); ++k) out(k / cols, k % cols) = x(k / in_cols, k % in_cols);
  const int ia = a.id();
  return tape_of(a).record(std::move(out), {ia}, [ia, cols, in_cols](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& x = t.value(ia);
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index k = 0; k < x.size(); ++k) d(k / in_cols, k % in_cols) = g(k / cols, k % cols);
    t.accumulate(ia, d);
  });
}

}  // namespace abound::ad
