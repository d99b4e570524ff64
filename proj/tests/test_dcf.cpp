#include "abound/binio.hpp"
#include "abound/dcf.hpp"
#include "abound/errors.hpp"
#include "abound/gradcheck.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cmath>

using namespace abound;

namespace {

DcfConfig small_cfg() {
  DcfConfig c;
  c.dim = 16;
  c.depth = 4;
  c.shared_tokens = 3;
  c.class_tokens = 2;
  c.modulator_hidden = 4;
  c.context_length = 20;
  return c;
}

void zero_gate(DcfModel& m) {
  for (std::size_t i : {m.gate_w1(), m.gate_b1(), m.gate_w2(), m.gate_b2()}) m.params().value(i).setZero();
}

void zero_modulators(DcfModel& m) {
  for (const Polarity p : kPolarities) {
    for (int part = 0; part < 2; ++part) m.params().value(m.modulator(p, part, 2)).setZero();
  }
}

}  // namespace

TEST_CASE("gate weights") {
  std::mt19937_64 rng(1);
  DcfModel m(small_cfg(), {"a", "b"}, 3);
  for (int i = 0; i < 10; ++i) {
    const FeatureVector w = gate_weights(m, testing_util::unit(16, rng));
    CHECK(std::abs(w.sum() - 1.0) <= 1e-9);
    CHECK(w.minCoeff() >= 0.0);
    CHECK(w.size() == 4);
  }
  zero_gate(m);
  const FeatureVector uniform = gate_weights(m, testing_util::unit(16, rng));
  for (Eigen::Index k = 0; k < 4; ++k) CHECK(uniform[k] == doctest::Approx(0.25).epsilon(1e-15));

  m.params().value(m.gate_b2())(0, 0) = 1.0;
  const FeatureVector w = gate_weights(m, testing_util::unit(16, rng));
  const double e = std::exp(1.0);
  CHECK(w[0] == doctest::Approx(e / (e + 3.0)).epsilon(1e-12));
  CHECK(w[0] == doctest::Approx(0.4754).epsilon(1e-4));
}

TEST_CASE("fuse_shared_prompt") {
  std::mt19937_64 rng(2);
  std::vector<Matrix> experts;
  for (int k = 0; k < 4; ++k) experts.push_back(testing_util::gaussian(3, 5, rng));
  CHECK((fuse_shared_prompt(Vector{{0.0, 1.0, 0.0, 0.0}}, experts) - experts[1]).cwiseAbs().maxCoeff() == 0.0);

  const std::vector<Matrix> same(4, experts[0]);
  CHECK((fuse_shared_prompt(Vector{{0.1, 0.2, 0.3, 0.4}}, same) - experts[0]).cwiseAbs().maxCoeff() <= 1e-15);

  const std::vector<Matrix> opposite{experts[2], -experts[2]};
  CHECK(fuse_shared_prompt(Vector{{0.5, 0.5}}, opposite).cwiseAbs().maxCoeff() == 0.0);

  // Linear in w.
  const Vector a{{0.1, 0.2, 0.3, 0.4}}, b{{0.4, 0.3, 0.2, 0.1}};
  const Matrix lhs = fuse_shared_prompt(Vector(2.0 * a + b), experts);
  const Matrix rhs = 2.0 * fuse_shared_prompt(a, experts) + fuse_shared_prompt(b, experts);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12);

  CHECK_THROWS_AS(fuse_shared_prompt(Vector{{1.0, 0.0}}, experts), InvalidParameter);
}

TEST_CASE("assemble_prompts") {
  std::mt19937_64 rng(3);
  DcfModel m(small_cfg(), {"a", "b"}, 4);
  const DcfConfig& c = m.config();
  const FeatureVector v = testing_util::unit(16, rng);

  const PromptSet full = assemble_prompts(m, v, 1);
  for (const Polarity p : kPolarities) {
    REQUIRE(full.of(p).size() == static_cast<std::size_t>(c.depth));
    for (const Matrix& layer : full.of(p)) {
      CHECK(layer.rows() == c.prompt_tokens());
      CHECK(layer.cols() == c.dim);
    }
  }

  SUBCASE("zero modulator leaves the shallow prompt as plain concat") {
    zero_modulators(m);
    const PromptSet ps = assemble_prompts(m, v, 1);
    const FeatureVector w = gate_weights(m, v);
    for (const Polarity p : kPolarities) {
      std::vector<Matrix> experts;
      for (int k = 0; k < c.experts; ++k) experts.push_back(m.params().value(m.expert(p, 0, k)));
      Matrix expected(c.prompt_tokens(), c.dim);
      expected << fuse_shared_prompt(w, experts), m.params().value(m.class_prompt(1, 0, p));
      CHECK((ps.of(p)[0] - expected).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }

  SUBCASE("identical gating and zero modulator give identical prompts") {
    zero_gate(m);
    zero_modulators(m);
    const PromptSet a = assemble_prompts(m, testing_util::unit(16, rng), 0);
    const PromptSet b = assemble_prompts(m, testing_util::unit(16, rng), 0);
    for (std::size_t p = 0; p < 2; ++p) {
      for (std::size_t l = 0; l < a.layers[p].size(); ++l) CHECK(a.layers[p][l] == b.layers[p][l]);
    }
  }

  SUBCASE("deep prompts ignore the modulator") {
    for (const Polarity p : kPolarities) {
      for (int part = 0; part < 2; ++part) {
        for (int which = 0; which < 3; ++which) m.params().value(m.modulator(p, part, which)).array() += 0.3;
      }
    }
    const PromptSet changed = assemble_prompts(m, v, 1);
    for (std::size_t p = 0; p < 2; ++p) {
      CHECK_FALSE(changed.layers[p][0] == full.layers[p][0]);
      for (std::size_t l = 1; l < full.layers[p].size(); ++l) CHECK(changed.layers[p][l] == full.layers[p][l]);
    }
  }

  CHECK_THROWS_AS(assemble_prompts(m, v, 2), UnknownClass);
  CHECK_THROWS_AS(assemble_prompts(m, v, -1), UnknownClass);
  CHECK_THROWS_AS(m.class_id("zzz"), UnknownClass);
  CHECK(m.class_id("b") == 1);
}

TEST_CASE("text encoder proxy") {
  std::mt19937_64 rng(4);
  const DcfConfig cfg = small_cfg();
  DcfModel m(cfg, {"a"}, 5);
  TextEncoderProxy proxy(cfg);
  const PromptSet ps = assemble_prompts(m, testing_util::unit(16, rng), 0);

  const FeatureVector p1 = encode_prompt(ps, 1, Polarity::Pos, proxy);
  CHECK(p1 == encode_prompt(ps, 1, Polarity::Pos, proxy));
  CHECK(std::abs(p1.norm() - 1.0) <= 1e-12);
  CHECK_FALSE(p1 == encode_prompt(ps, 2, Polarity::Pos, proxy));
  CHECK(TextEncoderProxy(cfg) == proxy);

  SUBCASE("deep prompt 3 matters") {
    PromptSet changed = ps;
    changed.layers[0][3](0, 0) += 0.5;
    CHECK((encode_prompt(changed, 1, Polarity::Pos, proxy) - p1).norm() > 1e-6);
  }

  SUBCASE("padding rows do not reach the output") {
    TextEncoderProxy padded(cfg);
    padded.materialize_padding = true;
    const FeatureVector base = encode_prompt(ps, 1, Polarity::Pos, padded);
    CHECK((base - p1).cwiseAbs().maxCoeff() <= 1e-12);
    padded.pad.array() += 3.0;
    const FeatureVector moved = encode_prompt(ps, 1, Polarity::Pos, padded);
    CHECK((moved - base).cwiseAbs().maxCoeff() <= 1e-12);
  }

  SUBCASE("concepts and anchors are distinct") {
    const ConceptPair cp = mean_concepts(m, proxy, testing_util::unit(16, rng), 0);
    CHECK(cosine_sim(cp.pos, cp.neg) < 0.99);
    CHECK(std::abs(proxy.manual_anchor(Polarity::Pos).norm() - 1.0) <= 1e-12);
    CHECK(cosine_sim(proxy.manual_anchor(Polarity::Pos), proxy.manual_anchor(Polarity::Neg)) < 0.99);
  }

  SUBCASE("errors") {
    DcfConfig tight = cfg;
    tight.context_length = cfg.prompt_tokens() + cfg.prefix_tokens + 1;  // one short
    TextEncoderProxy small(tight);
    CHECK_THROWS_AS(encode_prompt(ps, 0, Polarity::Neg, small), PromptTooLong);
    CHECK_THROWS_AS(encode_prompt(ps, 3, Polarity::Neg, proxy), InvalidParameter);
  }
}

TEST_CASE("prompt pipeline gradients match finite differences") {
  std::mt19937_64 rng(6);
  const DcfConfig cfg = small_cfg();
  DcfModel m(cfg, {"a", "b"}, 7);
  const TextEncoderProxy proxy(cfg);
  const FeatureVector v = testing_util::unit(16, rng);
  const Matrix weights = testing_util::gaussian(16, 1, rng);

  std::vector<std::size_t> targets{m.gate_w1(), m.gate_b2(), m.expert(Polarity::Pos, 0, 1), m.expert(Polarity::Neg, 2, 3),
                                   m.class_prompt(1, 0, Polarity::Pos), m.class_prompt(1, 3, Polarity::Neg),
                                   m.modulator(Polarity::Pos, 0, 0), m.modulator(Polarity::Neg, 1, 2)};
  for (const std::size_t target : targets) {
    CAPTURE(m.params().name(target));
    const TapeFunction f = [&](ad::Tape& t, const ad::Var& x) {
      BoundParams bp = bind(t, m.params(), false);
      bp.vars[target] = x;
      const PromptVars ps = assemble_prompts(m, bp, t.constant(v), 1);
      const ad::Var pos = encode_prompt(t, ps, 0, Polarity::Pos, proxy);
      const ad::Var neg = encode_prompt(t, ps, 2, Polarity::Neg, proxy);
      return ad::add(ad::dot(pos, t.constant(weights)), ad::scale(ad::dot(neg, t.constant(weights)), -0.5));
    };
    const Matrix& x = m.params().value(target);
    std::vector<Eigen::Index> coords;
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(x.size(), 12); ++i) coords.push_back((i * 7919) % x.size());
    CHECK(check_gradient(f, x, 1e-5, coords) < 1e-4);
  }

  // Gradient with respect to the instance feature itself.
  const TapeFunction fv = [&](ad::Tape& t, const ad::Var& x) {
    const BoundParams bp = bind(t, m.params(), false);
    return ad::dot(encode_prompt(t, assemble_prompts(m, bp, x, 0), 1, Polarity::Pos, proxy), t.constant(weights));
  };
  CHECK(check_gradient(fv, v, 1e-5) < 1e-4);
}

TEST_CASE("checkpoint roundtrip is bit-exact") {
  DcfModel m(small_cfg(), {"a", "b"}, 8);
  for (std::size_t i = 0; i < m.params().size(); ++i) round_to_float(m.params().value(i));
  testing_util::TempDir dir("ckpt");
  const auto p1 = dir.path() / "a.ckpt", p2 = dir.path() / "b.ckpt";
  save_checkpoint(p1, {{"note", "x"}}, {{"dcf", &m.params()}});
  const CheckpointData data = load_checkpoint(p1);
  CHECK(data.meta["note"] == "x");
  DcfModel other(small_cfg(), {"a", "b"}, 99);
  CHECK_FALSE(other.params() == m.params());
  restore(other.params(), data.groups.at(0).second);
  CHECK(other.params() == m.params());
  save_checkpoint(p2, {{"note", "x"}}, {{"dcf", &other.params()}});
  CHECK(binio::read_file(p1) == binio::read_file(p2));

  auto bytes = binio::read_file(p1);
  bytes.resize(bytes.size() - 1);
  binio::write_file(p2, bytes);
  CHECK_THROWS_AS(load_checkpoint(p2), FormatError);
  bytes = binio::read_file(p1);
  bytes[0] = 'X';
  binio::write_file(p2, bytes);
  CHECK_THROWS_AS(load_checkpoint(p2), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.ckpt"), FileNotFound);
}
