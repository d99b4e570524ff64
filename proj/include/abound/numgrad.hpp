#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>

namespace abound {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Embedding point. Alias rather than a wrapper: every algorithm here works
/// directly on Eigen expressions.
using FeatureVector = Vector;

inline constexpr double kNormTolerance = 1e-6;
inline constexpr double kLogFloor = 1e-12;

/// Returns v / ||v||. Throws DegenerateInput on a zero (or non-finite norm) vector.
FeatureVector l2_normalize(const FeatureVector& v);

/// Cosine similarity clamped to [-1, 1].
double cosine_sim(const FeatureVector& a, const FeatureVector& b);

/// softmax(logits / tau) with max subtraction. Throws InvalidParameter when tau <= 0.
Vector softmax_temp(std::span<const double> logits, double tau);
Vector softmax_temp(const Vector& logits, double tau);

/// Two-class entropy helper with the log floor used by every entropy term.
double entropy(const Vector& probs);

bool is_unit_norm(const FeatureVector& v, double tol = kNormTolerance);

/// Rounds every entry to the nearest float32 value. Used wherever data is
/// about to hit float32 storage so in-memory and on-disk copies agree.
void round_to_float(Matrix& m);
void round_to_float(Vector& v);

}  // namespace abound
