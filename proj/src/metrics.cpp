#include "abound/metrics.hpp"

#include "abound/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace abound {

namespace {

void check_lengths(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw InvalidParameter("scores and labels differ in length");
  for (double s : scores) {
    if (!std::isfinite(s)) throw InvalidParameter("scores must be finite");
  }
}

std::vector<std::size_t> order_by_score(std::span<const double> scores, bool descending) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_lengths(scores, labels);
  const auto n_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  const double n_neg = static_cast<double>(labels.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw UndefinedMetric("AUROC needs both positive and negative samples");

  // Rank sum of positives with average ranks over ties.
  const std::vector<std::size_t> idx = order_by_score(scores, false);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]]) rank_sum += avg_rank;
    }
    i = j;
  }
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double aupr(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_lengths(scores, labels);
  const auto n_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  if (n_pos == 0.0) throw UndefinedMetric("AUPR needs at least one positive sample");

  const std::vector<std::size_t> idx = order_by_score(scores, true);
  double tp = 0.0, fp = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double group_pos = 0.0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? group_pos : fp) += 1.0;
      ++j;
    }
    tp += group_pos;
    if (group_pos > 0.0) ap += (tp / (tp + fp)) * (group_pos / n_pos);
    i = j;
  }
  return ap;
}

double pixel_auroc(const std::vector<Vector>& maps, const std::vector<Mask>& masks) {
  if (maps.size() != masks.size()) throw InvalidParameter("map and mask counts differ");
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (static_cast<std::size_t>(maps[i].size()) != masks[i].size()) throw InvalidParameter("map and mask sizes differ");
    s.insert(s.end(), maps[i].data(), maps[i].data() + maps[i].size());
    y.insert(y.end(), masks[i].begin(), masks[i].end());
  }
  return auroc(s, y);
}

int connected_components(const Mask& mask, int grid_h, int grid_w, std::vector<int>& labels) {
  const std::size_t cells = static_cast<std::size_t>(grid_h) * static_cast<std::size_t>(grid_w);
  if (mask.size() != cells) throw InvalidParameter("mask size does not match the grid");
  labels.assign(cells, -1);
  int count = 0;
  std::vector<int> stack;
  for (int start = 0; start < static_cast<int>(cells); ++start) {
    if (!mask[static_cast<std::size_t>(start)] || labels[static_cast<std::size_t>(start)] >= 0) continue;
    labels[static_cast<std::size_t>(start)] = count;
    stack.push_back(start);
    while (!stack.empty()) {
      const int c = stack.back();
      stack.pop_back();
      const int r = c / grid_w, col = c % grid_w;
      const int nbrs[4][2] = {{r - 1, col}, {r + 1, col}, {r, col - 1}, {r, col + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[0] >= grid_h || nb[1] < 0 || nb[1] >= grid_w) continue;
        const auto n = static_cast<std::size_t>(nb[0] * grid_w + nb[1]);
        if (mask[n] && labels[n] < 0) {
          labels[n] = count;
          stack.push_back(static_cast<int>(n));
        }
      }
    }
    ++count;
  }
  return count;
}

std::vector<ProPoint> pro_curve(const std::vector<Vector>& maps, const std::vector<Mask>& masks, int grid_h, int grid_w,
                                int n_thresholds) {
  if (maps.size() != masks.size()) throw InvalidParameter("map and mask counts differ");
  if (n_thresholds < 2) throw InvalidParameter("n_thresholds must be >= 2");

  struct Region {
    std::size_t map;
    std::vector<std::size_t> cells;
  };
  std::vector<Region> regions;
  std::vector<double> all;
  std::size_t negatives = 0;
  for (std::size_t m = 0; m < maps.size(); ++m) {
    if (static_cast<std::size_t>(maps[m].size()) != masks[m].size()) throw InvalidParameter("map and mask sizes differ");
    std::vector<int> labels;
    const int n = connected_components(masks[m], grid_h, grid_w, labels);
    const std::size_t first = regions.size();
    for (int r = 0; r < n; ++r) regions.push_back({m, {}});
    for (std::size_t c = 0; c < labels.size(); ++c) {
      if (labels[c] >= 0) {
        regions[first + static_cast<std::size_t>(labels[c])].cells.push_back(c);
      } else {
        ++negatives;
      }
      all.push_back(maps[m][static_cast<Eigen::Index>(c)]);
    }
  }
  if (regions.empty()) throw UndefinedMetric("PRO needs at least one anomalous region");

  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::vector<double> thresholds;
  if (static_cast<int>(all.size()) <= n_thresholds) {
    thresholds = all;
  } else {
    const double lo = all.front(), hi = all.back();
    for (int i = 0; i < n_thresholds; ++i) {
      thresholds.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_thresholds - 1));
    }
  }

  std::vector<ProPoint> curve{{0.0, 0.0}};
  for (const double t : thresholds) {
    std::size_t fp = 0;
    for (std::size_t m = 0; m < maps.size(); ++m) {
      for (std::size_t c = 0; c < masks[m].size(); ++c) {
        if (!masks[m][c] && maps[m][static_cast<Eigen::Index>(c)] >= t) ++fp;
      }
    }
    double overlap = 0.0;
    for (const Region& r : regions) {
      std::size_t hit = 0;
      for (std::size_t c : r.cells) hit += maps[r.map][static_cast<Eigen::Index>(c)] >= t ? 1 : 0;
      overlap += static_cast<double>(hit) / static_cast<double>(r.cells.size());
    }
    const double fpr = negatives == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(negatives);
    curve.push_back({fpr, overlap / static_cast<double>(regions.size())});
  }
  return curve;
}

double integrate_pro(std::vector<ProPoint> curve, double fpr_limit) {
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw InvalidParameter("fpr_limit must lie in (0, 1]");
  std::erase_if(curve, [&](const ProPoint& p) { return p.fpr > fpr_limit; });
  if (curve.empty()) return 0.0;
  std::sort(curve.begin(), curve.end(),
            [](const ProPoint& a, const ProPoint& b) { return a.fpr < b.fpr || (a.fpr == b.fpr && a.pro < b.pro); });
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * 0.5 * (curve[i].pro + curve[i - 1].pro);
  }
  area += (fpr_limit - curve.back().fpr) * curve.back().pro;
  return area / fpr_limit;
}

double pro(const std::vector<Vector>& maps, const std::vector<Mask>& masks, int grid_h, int grid_w, double fpr_limit,
           int n_thresholds) {
  return integrate_pro(pro_curve(maps, masks, grid_h, grid_w, n_thresholds), fpr_limit);
}

}  // namespace abound
