#include "abound/gradcheck.hpp"

#include "abound/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace abound {

namespace {

double evaluate(const TapeFunction& f, const Matrix& x) {
  ad::Tape tape;
  const ad::Var in = tape.constant(x);
  const double y = f(tape, in).scalar();
  if (!std::isfinite(y)) throw EvaluationError("function value is not finite");
  return y;
}

}  // namespace

double check_gradient(const TapeFunction& f, const Matrix& x, double h,
                      std::span<const Eigen::Index> coords) {
  if (!(h >= 1e-6 && h <= 1e-3)) throw InvalidParameter("finite-difference step must lie in [1e-6, 1e-3]");

  ad::Tape tape;
  const ad::Var in = tape.leaf(x);
  const ad::Var out = f(tape, in);
  if (!std::isfinite(out.scalar())) throw EvaluationError("function value is not finite");
  tape.backward(out);
  const Matrix analytic = in.grad();

  std::vector<Eigen::Index> all;
  if (coords.empty()) {
    all.resize(static_cast<std::size_t>(x.size()));
    std::iota(all.begin(), all.end(), Eigen::Index{0});
    coords = all;
  }

  double worst = 0.0;
  Matrix probe = x;
  for (const Eigen::Index k : coords) {
    const double saved = probe(k);
    probe(k) = saved + h;
    const double up = evaluate(f, probe);
    probe(k) = saved - h;
    const double down = evaluate(f, probe);
    probe(k) = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic(k);
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace abound
