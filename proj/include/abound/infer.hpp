#pragma once

// Class-agnostic inference: Gaussian class identification on adapted global
// features, then text- and memory-bank-driven patch anomaly maps.

#include "abound/bundle.hpp"
#include "abound/trainer.hpp"

#include <string>
#include <vector>

namespace abound {

struct InferConfig {
  double text_weight = 1.0;
  double vis_weight = 1.0;
  double shrinkage = 0.1;
  double tau = 0.1;

  void validate() const;
};

struct ClassGaussian {
  FeatureVector mu;
  Matrix sigma;
  Matrix inverse;
  double log_det = 0.0;

  /// -1/2 [(x - mu)^T Sigma^-1 (x - mu) + log det Sigma + D log 2 pi].
  double log_likelihood(const FeatureVector& x) const;
};

/// Mean and shrunk covariance (N-1 divisor):
/// (1 - rho) S + rho (tr S / D) I, or I when N = 1 or tr S = 0.
ClassGaussian fit_gaussian(const std::vector<FeatureVector>& samples, double shrinkage = 0.1);
/// Builds a Gaussian from an explicit SPD covariance.
ClassGaussian make_gaussian(const FeatureVector& mu, const Matrix& sigma);

/// One Gaussian per class over adapted training globals, manifest order.
std::vector<ClassGaussian> fit_class_gaussians(const EmbeddingBundle& bundle, const Model& model,
                                               double shrinkage = 0.1);

/// Highest log-likelihood; ties go to the lowest index.
int identify_class(const FeatureVector& x, const std::vector<ClassGaussian>& gaussians);

struct ClassBank {
  std::string name;
  ClassGaussian gaussian;
  std::vector<Matrix> patches;  // per layer: every adapted training patch, unit rows
  FeatureVector text_pos;
  FeatureVector text_neg;
};

struct MemoryBanks {
  std::vector<ClassBank> classes;

  /// Throws MissingBank for an id without a bank.
  const ClassBank& at(int class_id) const;
};

MemoryBanks build_banks(const EmbeddingBundle& bundle, const Model& model, const InferConfig& cfg);

struct AnomalyMap {
  int class_pred = -1;
  Vector text;  // per cell, row-major
  Vector vis;
  Vector combined;
  double score = 0.0;  // max of `combined`
};

/// Identifies the class, then scores against that class's banks.
AnomalyMap score_image(const Sample& sample, const MemoryBanks& banks, const Model& model, const InferConfig& cfg);
/// Scores against a given class's banks (throws MissingBank).
AnomalyMap score_image_as(const Sample& sample, int class_id, const MemoryBanks& banks, const Model& model,
                          const InferConfig& cfg);

/// Combines precomputed maps: M = w_t M_text + w_v M_vis, S = max M.
void fuse_maps(AnomalyMap& map, const InferConfig& cfg);

}  // namespace abound
