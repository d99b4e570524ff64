#pragma once

// Low-rank additive adapter on the frozen feature projection:
// f' = normalize(f + s * ((f . dropout) A) B), s = alpha / rank.
// Projection 0 adapts global features, projection 1 + l adapts patch layer l.

#include "abound/params.hpp"

#include <json.hpp>

#include <random>

namespace abound {

struct AdapterConfig {
  int rank = 4;
  double alpha = 8.0;
  double dropout = 0.25;

  double scaling() const { return alpha / static_cast<double>(rank); }
  void validate() const;
};

class Adapter {
 public:
  /// A is drawn from N(0, 1/D); B starts at zero so the initial adapter is the identity map.
  Adapter(int dim, int projections, const AdapterConfig& cfg, std::uint64_t seed);

  const AdapterConfig& config() const { return cfg_; }
  int dim() const { return dim_; }
  int projections() const { return projections_; }
  std::size_t down(int projection) const { return static_cast<std::size_t>(2 * projection); }
  std::size_t up(int projection) const { return static_cast<std::size_t>(2 * projection + 1); }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  nlohmann::json to_json() const;

 private:
  int dim_;
  int projections_;
  AdapterConfig cfg_;
  ParamStore params_;
};

/// Adapts every row of `rows` (n x D) and returns unit rows. Dropout is
/// applied to the branch input only when `training` is set (rng required).
ad::Var apply_adapter(const Adapter& adapter, const BoundParams& params, int projection, const ad::Var& rows,
                      bool training, std::mt19937_64* rng);

/// Value form for a single vector (D x 1).
FeatureVector apply_adapter(const Adapter& adapter, int projection, const FeatureVector& f, bool training,
                            std::mt19937_64* rng);
/// Value form for a cells x D block; deterministic (eval mode).
Matrix adapt_rows(const Adapter& adapter, int projection, const Matrix& rows);

}  // namespace abound
