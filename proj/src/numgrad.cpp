#include "abound/numgrad.hpp"

#include "abound/errors.hpp"

#include <algorithm>
#include <cmath>

namespace abound {

FeatureVector l2_normalize(const FeatureVector& v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw DegenerateInput("cannot normalize a zero or non-finite vector");
  }
  return v / n;
}

double cosine_sim(const FeatureVector& a, const FeatureVector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw DegenerateInput("cosine similarity of a zero vector");
  }
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

Vector softmax_temp(std::span<const double> logits, double tau) {
  if (!(tau > 0.0)) throw InvalidParameter("softmax temperature must be > 0");
  Vector out(static_cast<Eigen::Index>(logits.size()));
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = std::exp((logits[i] - mx) / tau);
    total += out[static_cast<Eigen::Index>(i)];
  }
  return out / total;
}

Vector softmax_temp(const Vector& logits, double tau) {
  return softmax_temp(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())), tau);
}

double entropy(const Vector& probs) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    h -= probs[i] * std::log(std::max(probs[i], kLogFloor));
  }
  return h;
}

bool is_unit_norm(const FeatureVector& v, double tol) {
  return std::abs(v.norm() - 1.0) <= tol;
}

void round_to_float(Matrix& m) {
  m = m.cast<float>().cast<double>();
}

void round_to_float(Vector& v) {
  v = v.cast<float>().cast<double>();
}

}  // namespace abound
