#include "abound/adapter.hpp"

#include "abound/bundle.hpp"
#include "abound/errors.hpp"

#include <cmath>

namespace abound {

void AdapterConfig::validate() const {
  if (rank < 1) throw InvalidParameter("adapter rank must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidParameter("adapter dropout must lie in [0, 1)");
  if (!std::isfinite(alpha)) throw InvalidParameter("adapter alpha must be finite");
}

Adapter::Adapter(int dim, int projections, const AdapterConfig& cfg, std::uint64_t seed)
    : dim_(dim), projections_(projections), cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(mix_seed(seed ^ 0xADA9ADA9ULL));
  std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  for (int p = 0; p < projections; ++p) {
    Matrix a(dim, cfg_.rank);
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = g(rng);
    const std::string stem = p == 0 ? std::string("lora.global") : "lora.layer" + std::to_string(p - 1);
    params_.add(stem + ".a", std::move(a));
    params_.add(stem + ".b", Matrix::Zero(cfg_.rank, dim));
  }
}

nlohmann::json Adapter::to_json() const {
  return nlohmann::json{{"dim", dim_},
                        {"projections", projections_},
                        {"rank", cfg_.rank},
                        {"alpha", cfg_.alpha},
                        {"dropout", cfg_.dropout}};
}

ad::Var apply_adapter(const Adapter& adapter, const BoundParams& params, int projection, const ad::Var& rows,
                      bool training, std::mt19937_64* rng) {
  if (projection < 0 || projection >= adapter.projections()) throw InvalidParameter("adapter projection out of range");
  ad::Var branch_in = rows;
  const double p = adapter.config().dropout;
  if (training && p > 0.0) {
    if (!rng) throw InvalidParameter("training-mode adapter needs an RNG stream");
    std::bernoulli_distribution keep(1.0 - p);
    Matrix m(rows.rows(), rows.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = keep(*rng) ? 1.0 / (1.0 - p) : 0.0;
    branch_in = ad::mul(rows, rows.tape()->constant(std::move(m)));
  }
  const ad::Var low = ad::matmul(branch_in, params[adapter.down(projection)]);
  const ad::Var delta = ad::scale(ad::matmul(low, params[adapter.up(projection)]), adapter.config().scaling());
  return ad::l2_normalize_rows(ad::add(rows, delta));
}

FeatureVector apply_adapter(const Adapter& adapter, int projection, const FeatureVector& f, bool training,
                            std::mt19937_64* rng) {
  ad::Tape tape;
  const BoundParams params = bind(tape, adapter.params(), false);
  const ad::Var row = tape.constant(f.transpose());
  return apply_adapter(adapter, params, projection, row, training, rng).value().transpose();
}

Matrix adapt_rows(const Adapter& adapter, int projection, const Matrix& rows) {
  ad::Tape tape;
  const BoundParams params = bind(tape, adapter.params(), false);
  return apply_adapter(adapter, params, projection, tape.constant(rows), false, nullptr).value();
}

}  // namespace abound
