#pragma once

#include "abound/autodiff.hpp"

#include <functional>
#include <span>

namespace abound {

/// A scalar function recorded on a tape: receives the tape and the input node.
using TapeFunction = std::function<ad::Var(ad::Tape&, const ad::Var&)>;

/// Compares the reverse-mode gradient of f at x with central differences.
/// Returns max over checked coordinates of |analytic - numeric| / max(1, |analytic|).
/// `coords` restricts the check to the given linear indices (all when empty).
double check_gradient(const TapeFunction& f, const Matrix& x, double h,
                      std::span<const Eigen::Index> coords = {});

}  // namespace abound
