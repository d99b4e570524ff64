#include "abound/autodiff.hpp"
#include "abound/errors.hpp"
#include "abound/gradcheck.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

using namespace abound;

namespace {

// Reduces any node to a scalar with fixed random weights so every output
// entry contributes a distinct adjoint.
ad::Var weighted(ad::Tape& t, const ad::Var& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(y, t.constant(testing_util::gaussian(y.rows(), y.cols(), rng))));
}

}  // namespace

TEST_CASE("every primitive matches central differences") {
  std::mt19937_64 rng(2024);
  const Matrix c34 = testing_util::gaussian(3, 4, rng);
  const Matrix c43 = testing_util::gaussian(4, 3, rng);
  const Matrix pos = testing_util::gaussian(3, 4, rng).cwiseAbs().array() + 0.5;

  std::vector<std::pair<std::string, TapeFunction>> cases = {
      {"add", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, x + t.constant(c34), 1); }},
      {"sub", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, t.constant(c34) - x, 2); }},
      {"mul", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::mul(x, x), 3); }},
      {"div", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::div(x, t.constant(pos)), 4); }},
      {"div-denominator", [&](ad::Tape& t, const ad::Var& x) {
         return weighted(t, ad::div(t.constant(c34), ad::add_scalar(ad::square(x), 1.0)), 5);
       }},
      {"scale", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, 2.5 * x, 6); }},
      {"matmul-left", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::matmul(x, t.constant(c43)), 7); }},
      {"matmul-right", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::matmul(t.constant(c43), x), 8); }},
      {"transpose", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::transpose(x), 9); }},
      {"tanh", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::tanh(x), 10); }},
      {"sigmoid", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::sigmoid(x), 11); }},
      {"silu", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::silu(x), 12); }},
      {"exp", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::exp(x), 13); }},
      {"log", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::log_floor(ad::add_scalar(ad::square(x), 0.3)), 14); }},
      {"mean", [&](ad::Tape& t, const ad::Var& x) { return ad::mean(ad::mul(x, t.constant(c34))); }},
      {"norm", [&](ad::Tape&, const ad::Var& x) { return ad::norm(x); }},
      {"dot", [&](ad::Tape& t, const ad::Var& x) { return ad::dot(x, t.constant(c34)); }},
      {"softmax_rows", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::softmax_rows(x, 0.3), 15); }},
      {"log_softmax_rows", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::log_softmax_rows(x), 16); }},
      {"l2_normalize", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::l2_normalize(x), 17); }},
      {"l2_normalize_rows", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::l2_normalize_rows(x), 18); }},
      {"soft_normalize_rows", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::soft_normalize_rows(x), 19); }},
      {"cosine", [&](ad::Tape& t, const ad::Var& x) { return ad::cosine(x, t.constant(c34)); }},
      {"slice_rows", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::slice_rows(x, 1, 2), 20); }},
      {"concat_rows", [&](ad::Tape& t, const ad::Var& x) {
         return weighted(t, ad::concat_rows({x, ad::tanh(x), t.constant(c34)}), 21);
       }},
      {"element", [&](ad::Tape&, const ad::Var& x) { return ad::square(ad::element(x, 2, 1)); }},
      {"reshape", [&](ad::Tape& t, const ad::Var& x) {
         return weighted(t, ad::matmul(ad::reshape(x, 4, 3), t.constant(c34)), 22);
       }},
      {"abs", [&](ad::Tape& t, const ad::Var& x) { return weighted(t, ad::abs(ad::add_scalar(x, 10.0)), 23); }},
  };
  for (const auto& [name, f] : cases) {
    CAPTURE(name);
    for (int trial = 0; trial < 3; ++trial) {
      const Matrix x = testing_util::gaussian(3, 4, rng);
      CHECK(check_gradient(f, x, 1e-5) < 1e-6);
    }
  }
}

TEST_CASE("shared subexpressions accumulate adjoints") {
  ad::Tape t;
  const ad::Var x = t.leaf(Matrix::Constant(1, 1, 3.0));
  const ad::Var y = ad::mul(x, x);          // x^2
  const ad::Var z = ad::add(y, ad::mul(y, x));  // x^2 + x^3
  t.backward(z);
  CHECK(z.scalar() == 36.0);
  CHECK(x.grad()(0, 0) == doctest::Approx(2 * 3.0 + 3 * 9.0));
}

TEST_CASE("backward twice gives the same gradients") {
  ad::Tape t;
  const ad::Var x = t.leaf(Matrix::Constant(2, 1, 0.5));
  const ad::Var loss = ad::sum(ad::tanh(x));
  t.backward(loss);
  const Matrix g1 = x.grad();
  t.backward(loss);
  CHECK(g1 == x.grad());
}

TEST_CASE("detach and constants block gradient flow") {
  ad::Tape t;
  const ad::Var x = t.leaf(Matrix::Constant(2, 1, 0.7));
  const ad::Var d = t.detach(ad::scale(x, 3.0));
  const ad::Var loss = ad::sum(ad::mul(d, d));
  t.backward(loss);
  CHECK(x.grad().cwiseAbs().maxCoeff() == 0.0);
  CHECK_FALSE(d.requires_grad());
}

TEST_CASE("subgradients at kinks are zero") {
  ad::Tape t;
  const ad::Var x = t.leaf(Matrix::Zero(3, 1));
  t.backward(ad::add(ad::sum(ad::abs(x)), ad::norm(x)));
  CHECK(x.grad().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("shape errors are reported") {
  ad::Tape t;
  const ad::Var a = t.leaf(Matrix::Ones(2, 3));
  const ad::Var b = t.leaf(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(ad::add(a, b), InvalidParameter);
  CHECK_THROWS_AS(ad::matmul(a, b), InvalidParameter);
  CHECK_THROWS_AS(t.backward(a), InvalidParameter);
  CHECK_THROWS_AS(ad::reshape(a, 4, 2), InvalidParameter);
}
