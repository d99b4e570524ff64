#pragma once

// Concept-boundary loss terms: prompt semantic grounding (coarse text
// alignment and token-to-patch attention grounding), focal + dice
// segmentation loss on synthetic anomalies, and the weighted total.

#include "abound/autodiff.hpp"
#include "abound/bundle.hpp"

namespace abound {

struct LossWeights {
  double abf = 1.0;
  double psg = 1.0;
  double seg = 1.0;

  void validate() const;
};

inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kDiceSmooth = 1.0;

/// (1/4)[(1 - sim(q+, m+)) + (1 - sim(q-, m-)) + sim(q-, m+) + sim(q+, m-)].
ad::Var psg_text_loss(const ad::Var& q_pos, const ad::Var& q_neg, const ad::Var& m_pos, const ad::Var& m_neg);
double psg_text_loss(const FeatureVector& q_pos, const FeatureVector& q_neg, const FeatureVector& m_pos,
                     const FeatureVector& m_neg);

/// Symmetric token/patch cross-entropy for one polarity:
/// (CE(T V_grp^T, I) + CE(V_grp T^T, I)) / 2, each CE averaged over rows,
/// with V_grp = softmax(T V^T) V. T is N_t x D, V is cells x D.
ad::Var grounding_term(const ad::Var& tokens, const ad::Var& patches);
/// Mean of the four grounding cross-entropies over both polarities.
ad::Var psg_finegrained_loss(const ad::Var& tokens_pos, const ad::Var& tokens_neg, const ad::Var& patches);
double psg_finegrained_loss(const Matrix& tokens_pos, const Matrix& tokens_neg, const Matrix& patches);

/// Per-cell P(abnormal) = softmax((sim(u, p_neg), sim(u, p_pos)) / tau)[0].
/// `cells` rows must be unit-norm; the result is cells x 1.
ad::Var abnormality_map(const ad::Var& cells, const ad::Var& p_pos, const ad::Var& p_neg, double tau);

/// Focal (gamma 2, alpha 0.25, mean over cells) plus dice (smoothing 1).
/// `pred` is cells x 1 in [0, 1]. Throws FormatError on size mismatch.
ad::Var focal_loss(const ad::Var& pred, const Mask& mask);
ad::Var dice_loss(const ad::Var& pred, const Mask& mask);
ad::Var seg_loss(const ad::Var& pred, const Mask& mask);
double seg_loss(const Vector& pred, const Mask& mask);

double cbl_total(double l_abf, double l_psg, double l_seg, const LossWeights& w);
ad::Var cbl_total(const ad::Var& l_abf, const ad::Var& l_psg, const ad::Var& l_seg, const LossWeights& w);

}  // namespace abound
