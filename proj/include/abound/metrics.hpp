#pragma once

// Ranking and localization metrics: AUROC (Mann-Whitney, half-credit ties),
// average precision with tied thresholds grouped, and per-region overlap.

#include "abound/bundle.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace abound {

/// P(s_pos > s_neg) + P(tie)/2. Throws UndefinedMetric unless both labels occur.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Step-wise average precision. Throws UndefinedMetric without positives.
double aupr(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// AUROC over every cell of every map.
double pixel_auroc(const std::vector<Vector>& maps, const std::vector<Mask>& masks);

/// 4-connected components of a mask. Returns the component count; `labels`
/// receives a component id per cell or -1 for background.
int connected_components(const Mask& mask, int grid_h, int grid_w, std::vector<int>& labels);

struct ProPoint {
  double fpr = 0.0;
  double pro = 0.0;
};

/// (fpr, pro) at every threshold: all distinct scores when there are at most
/// `n_thresholds` of them, else an even grid over [min, max]. Prediction is
/// score >= t; the t = +inf point (0, 0) is included.
std::vector<ProPoint> pro_curve(const std::vector<Vector>& maps, const std::vector<Mask>& masks, int grid_h, int grid_w,
                                int n_thresholds = 200);

/// Area under the curve restricted to fpr <= fpr_limit (trapezoid, held flat
/// from the last admissible point to the limit), divided by fpr_limit.
/// Throws UndefinedMetric when no mask has an anomalous cell.
double pro(const std::vector<Vector>& maps, const std::vector<Mask>& masks, int grid_h, int grid_w,
           double fpr_limit = 0.3, int n_thresholds = 200);

double integrate_pro(std::vector<ProPoint> curve, double fpr_limit);

}  // namespace abound
