#include "abound/cbl.hpp"
#include "abound/errors.hpp"
#include "abound/gradcheck.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace abound;
using testing_util::basis;

namespace {

Matrix orthonormal_rows(int n, int d, std::mt19937_64& rng) {
  const Matrix g = testing_util::gaussian(d, n, rng);
  const Eigen::HouseholderQR<Matrix> qr(g);
  return Matrix(qr.householderQ() * Matrix::Identity(d, n)).transpose();
}

}  // namespace

TEST_CASE("psg_text_loss") {
  const FeatureVector mp = basis(4, 0), mn = basis(4, 1);
  CHECK(psg_text_loss(mp, mn, mp, mn) == doctest::Approx(0.0));
  CHECK(psg_text_loss(mn, mp, mp, mn) == doctest::Approx(1.0));
  for (double s : {-0.5, 0.0, 0.3, 0.8}) {
    const FeatureVector m2{{s, std::sqrt(1.0 - s * s), 0.0, 0.0}};
    CHECK(psg_text_loss(mp, m2, mp, m2) == doctest::Approx(s / 2.0).epsilon(1e-12));
  }
  std::mt19937_64 rng(1);
  for (int i = 0; i < 30; ++i) {
    const FeatureVector q1 = testing_util::unit(4, rng), q2 = testing_util::unit(4, rng);
    const double l = psg_text_loss(q1, q2, mp, mn);
    CHECK(l >= -0.5 - 1e-12);
    CHECK(l <= 1.5 + 1e-12);
  }
}

TEST_CASE("psg_finegrained_loss") {
  std::mt19937_64 rng(2);
  SUBCASE("single token is zero") {
    const Matrix t = testing_util::gaussian(1, 6, rng), v = testing_util::gaussian(9, 6, rng);
    CHECK(psg_finegrained_loss(t, t, v) == doctest::Approx(0.0));
  }
  SUBCASE("aligned patches beat unrelated ones") {
    const Matrix t = orthonormal_rows(4, 8, rng);
    const double aligned = psg_finegrained_loss(t, t, t);
    Matrix other = testing_util::gaussian(4, 8, rng);
    other = other.rowwise().normalized();
    CHECK(aligned < psg_finegrained_loss(t, t, other));
    // Token grouping is a weighted sum over all patches, so reordering the
    // patch rows leaves the loss unchanged.
    Matrix perm = t;
    perm.row(0).swap(perm.row(3));
    CHECK(psg_finegrained_loss(t, t, perm) == doctest::Approx(aligned).epsilon(1e-12));
  }
  SUBCASE("not scale invariant") {
    const Matrix t = orthonormal_rows(4, 8, rng);
    const double l1 = psg_finegrained_loss(t, t, t);
    const double l10 = psg_finegrained_loss(10.0 * t, 10.0 * t, t);
    CHECK(std::abs(l1 - l10) > 1e-3);
    CHECK(l10 < l1);
  }
}

TEST_CASE("seg_loss") {
  SUBCASE("exact prediction") {
    const Mask m{1, 0, 0, 1, 1, 0};
    Vector p(6);
    for (int i = 0; i < 6; ++i) p[i] = m[static_cast<std::size_t>(i)];
    CHECK(seg_loss(p, m) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("empty mask and empty prediction") { CHECK(seg_loss(Vector::Zero(4), Mask(4, 0)) == doctest::Approx(0.0)); }
  SUBCASE("uniform one-half on a half mask") {
    const Mask m{1, 1, 0, 0};
    const double ln2 = std::log(2.0);
    // alpha_t = 0.25 on positives, 0.75 on negatives; (1 - p_t)^2 = 0.25.
    const double focal = (2 * 0.25 * 0.25 * ln2 + 2 * 0.75 * 0.25 * ln2) / 4.0;
    const double dice = 1.0 - (2.0 * 1.0 + 1.0) / (2.0 + 2.0 + 1.0);
    CHECK(dice == doctest::Approx(0.4));
    CHECK(seg_loss(Vector::Constant(4, 0.5), m) == doctest::Approx(focal + dice).epsilon(1e-12));
    CHECK(seg_loss(Vector::Constant(4, 0.5), m) == doctest::Approx(0.4866434).epsilon(1e-7));
  }
  SUBCASE("permutation equivariance") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    Vector p(9);
    Mask m(9);
    for (int i = 0; i < 9; ++i) {
      p[i] = u(rng);
      m[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(rng() % 2);
    }
    std::vector<int> order{4, 2, 8, 0, 1, 7, 3, 6, 5};
    Vector pp(9);
    Mask mp(9);
    for (int i = 0; i < 9; ++i) {
      pp[i] = p[order[static_cast<std::size_t>(i)]];
      mp[static_cast<std::size_t>(i)] = m[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    }
    CHECK(seg_loss(pp, mp) == doctest::Approx(seg_loss(p, m)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(seg_loss(Vector::Zero(3), Mask(4, 0)), FormatError);
}

TEST_CASE("abnormality_map") {
  ad::Tape t;
  const FeatureVector pos = basis(3, 0), neg = basis(3, 1);
  Matrix cells(3, 3);
  cells << std::sqrt(0.5), std::sqrt(0.5), 0.0,  // equidistant
      1.0, 0.0, 0.0,                              // normal-like
      0.0, 1.0, 0.0;                              // abnormal-like
  const Vector m = abnormality_map(t.constant(cells), t.constant(pos), t.constant(neg), 0.1).value();
  CHECK(m[0] == doctest::Approx(0.5));
  CHECK(m[1] == doctest::Approx(1.0 / (1.0 + std::exp(10.0))));
  CHECK(m[2] == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))));
}

TEST_CASE("cbl_total") {
  LossWeights zero{0.0, 0.0, 0.0};
  CHECK(cbl_total(-0.7, 2.0, 3.0, zero) == 0.0);
  CHECK(cbl_total(-0.69315, 5.0, 7.0, LossWeights{1.0, 0.0, 0.0}) == -0.69315);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-2.0, 2.0), w(0.0, 3.0);
  for (int i = 0; i < 50; ++i) {
    const LossWeights lw{w(rng), w(rng), w(rng)};
    const double a = u(rng), b = u(rng), c = u(rng), a2 = u(rng), b2 = u(rng), c2 = u(rng), k = u(rng);
    CHECK(cbl_total(a + k * a2, b + k * b2, c + k * c2, lw) ==
          doctest::Approx(cbl_total(a, b, c, lw) + k * cbl_total(a2, b2, c2, lw)).epsilon(1e-12));
    CHECK(cbl_total(a, b, c, LossWeights{2 * lw.abf, 2 * lw.psg, 2 * lw.seg}) ==
          doctest::Approx(2.0 * cbl_total(a, b, c, lw)).epsilon(1e-12));
  }
  CHECK_THROWS_AS((LossWeights{-1.0, 1.0, 1.0}.validate()), InvalidParameter);
}

TEST_CASE("loss gradients match central differences") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int point = 0; point < 20; ++point) {
    const Matrix mp = testing_util::unit(6, rng), mn = testing_util::unit(6, rng), qn = testing_util::unit(6, rng);
    const TapeFunction text = [&](ad::Tape& t, const ad::Var& x) {
      return psg_text_loss(x, t.constant(qn), t.constant(mp), t.constant(mn));
    };
    CHECK(check_gradient(text, testing_util::unit(6, rng), 1e-5) < 1e-4);

    const Matrix tn = testing_util::gaussian(3, 6, rng), patches = testing_util::gaussian(10, 6, rng);
    const TapeFunction fg_tokens = [&](ad::Tape& t, const ad::Var& x) {
      return psg_finegrained_loss(x, t.constant(tn), t.constant(patches));
    };
    const TapeFunction fg_patches = [&](ad::Tape& t, const ad::Var& x) {
      return psg_finegrained_loss(t.constant(tn), t.constant(tn.reverse()), x);
    };
    CHECK(check_gradient(fg_tokens, testing_util::gaussian(3, 6, rng), 1e-5) < 1e-4);
    CHECK(check_gradient(fg_patches, patches, 1e-5) < 1e-4);

    Mask mask(8);
    Matrix pred(8, 1);
    for (int i = 0; i < 8; ++i) {
      mask[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(rng() % 2);
      pred(i, 0) = u(rng);
    }
    const TapeFunction focal = [&](ad::Tape&, const ad::Var& x) { return focal_loss(x, mask); };
    const TapeFunction dice = [&](ad::Tape&, const ad::Var& x) { return dice_loss(x, mask); };
    CHECK(check_gradient(focal, pred, 1e-5) < 1e-4);
    CHECK(check_gradient(dice, pred, 1e-5) < 1e-4);

    // Whole segmentation path through the similarity map.
    const Matrix cells = testing_util::gaussian(8, 6, rng).rowwise().normalized();
    const TapeFunction seg = [&](ad::Tape& t, const ad::Var& x) {
      return seg_loss(abnormality_map(t.constant(cells), x, t.constant(mn), 0.1), mask);
    };
    CHECK(check_gradient(seg, testing_util::unit(6, rng), 1e-5) < 1e-4);
  }
}
