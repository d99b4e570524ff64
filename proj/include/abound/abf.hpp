#pragma once

// Adversarial boundary forging. Phase 1 perturbs global features with
// sign-gradient PGD until they sit between the normal and abnormal concept
// vectors; phase 2 scores the detached results with a negative-entropy loss.

#include "abound/autodiff.hpp"

#include <json.hpp>

#include <random>
#include <vector>

namespace abound {

struct AttackConfig {
  int steps = 10;
  double alpha = 1.0;     // PGD step size
  double epsilon = 10.0;  // L-infinity radius
  double beta = 0.1;      // dispersion weight
  double tau = 0.1;       // entropy temperature
  double init_noise_scale = 1.0;
  bool use_balance = true;

  void validate() const;
};

struct FenceBatch {
  std::vector<FeatureVector> originals;
  std::vector<FeatureVector> forged;     // values only, no graph linkage
  std::vector<double> loss_trace;        // attack loss at v_0 and after every step
  double final_loss = 0.0;
  std::vector<double> initial_gaps;      // balance gap per sample at v_0
  std::vector<double> gaps;              // balance gap per sample after the attack
};

/// |cos(v, p_pos) - cos(v, p_neg)|. v is D x 1.
ad::Var balance_loss(const ad::Var& v, const ad::Var& p_pos, const ad::Var& p_neg);
double balance_loss(const FeatureVector& v, const FeatureVector& p_pos, const FeatureVector& p_neg);

/// -(2 / (N(N-1))) * sum_{i<j} ||v_i - v_j||. Throws InvalidBatch for N < 2.
ad::Var dispersion_loss(const std::vector<ad::Var>& batch);
double dispersion_loss(const std::vector<FeatureVector>& batch);

/// use_balance * sum_i balance_i + beta * dispersion.
ad::Var attack_loss(const std::vector<ad::Var>& batch, const ad::Var& p_pos, const ad::Var& p_neg,
                    const AttackConfig& cfg);

/// Phase 1. Throws InvalidBatch for N < 2 (when dispersion is active) and
/// DegenerateAnchors when p_pos == p_neg.
FenceBatch forge_fence(const std::vector<FeatureVector>& v_cls, const FeatureVector& p_pos,
                       const FeatureVector& p_neg, const AttackConfig& cfg, std::mt19937_64& rng);

/// Phase 2: mean over fence samples of sum_c P_c log P_c (= -entropy), with
/// P = softmax((sim_pos, sim_neg) / tau). Fence features enter as constants.
ad::Var abf_entropy_loss(ad::Tape& tape, const FenceBatch& fence, const ad::Var& p_pos, const ad::Var& p_neg,
                         double tau);
double abf_entropy_loss(const FenceBatch& fence, const FeatureVector& p_pos, const FeatureVector& p_neg, double tau);

/// Mean predictive entropy of the forged features (diagnostic).
double mean_fence_entropy(const FenceBatch& fence, const FeatureVector& p_pos, const FeatureVector& p_neg, double tau);

nlohmann::json to_json(const FenceBatch& fence);

}  // namespace abound
