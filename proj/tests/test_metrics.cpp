#include "abound/errors.hpp"
#include "abound/metrics.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>

using namespace abound;
using Labels = std::vector<std::uint8_t>;

namespace {

double brute_auroc(const std::vector<double>& s, const Labels& y) {
  double num = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] && !y[j]) {
        pairs += 1.0;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
  }
  return num / pairs;
}

double brute_ap(const std::vector<double>& s, const Labels& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  const double pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, pred = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) {
        pred += 1.0;
        tp += y[i];
      }
    }
    const double recall = tp / pos;
    ap += (recall - prev_recall) * (tp / pred);
    prev_recall = recall;
  }
  return ap;
}

// Flood fill by repeated relabeling (independent of the library's DFS).
std::vector<int> components_by_relabel(const Mask& m, int h, int w) {
  std::vector<int> lab(m.size(), -1);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i]) lab[i] = static_cast<int>(i);
  }
  for (bool changed = true; changed;) {
    changed = false;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const int i = r * w + c;
        if (lab[static_cast<std::size_t>(i)] < 0) continue;
        for (int j : {r > 0 ? i - w : -1, r + 1 < h ? i + w : -1, c > 0 ? i - 1 : -1, c + 1 < w ? i + 1 : -1}) {
          if (j >= 0 && lab[static_cast<std::size_t>(j)] >= 0 && lab[static_cast<std::size_t>(j)] < lab[static_cast<std::size_t>(i)]) {
            lab[static_cast<std::size_t>(i)] = lab[static_cast<std::size_t>(j)];
            changed = true;
          }
        }
      }
    }
  }
  return lab;
}

double brute_pro(const std::vector<Vector>& maps, const std::vector<Mask>& masks, int h, int w, double limit) {
  std::vector<std::vector<int>> labs;
  std::set<double> values;
  double negatives = 0.0;
  for (std::size_t m = 0; m < maps.size(); ++m) {
    labs.push_back(components_by_relabel(masks[m], h, w));
    for (Eigen::Index i = 0; i < maps[m].size(); ++i) {
      values.insert(maps[m][i]);
      negatives += masks[m][static_cast<std::size_t>(i)] ? 0.0 : 1.0;
    }
  }
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  for (double t : values) {
    double fp = 0.0, overlap_sum = 0.0, regions = 0.0;
    for (std::size_t m = 0; m < maps.size(); ++m) {
      std::set<int> ids;
      for (int v : labs[m]) {
        if (v >= 0) ids.insert(v);
      }
      for (int id : ids) {
        double hit = 0.0, size = 0.0;
        for (std::size_t i = 0; i < labs[m].size(); ++i) {
          if (labs[m][i] == id) {
            size += 1.0;
            hit += maps[m][static_cast<Eigen::Index>(i)] >= t ? 1.0 : 0.0;
          }
        }
        overlap_sum += hit / size;
        regions += 1.0;
      }
      for (std::size_t i = 0; i < masks[m].size(); ++i) {
        if (!masks[m][i] && maps[m][static_cast<Eigen::Index>(i)] >= t) fp += 1.0;
      }
    }
    pts.emplace_back(negatives > 0 ? fp / negatives : 0.0, overlap_sum / regions);
  }
  std::vector<std::pair<double, double>> kept;
  for (const auto& p : pts) {
    if (p.first <= limit) kept.push_back(p);
  }
  std::sort(kept.begin(), kept.end());
  double area = 0.0;
  for (std::size_t i = 1; i < kept.size(); ++i) {
    area += (kept[i].first - kept[i - 1].first) * (kept[i].second + kept[i - 1].second) / 2.0;
  }
  area += (limit - kept.back().first) * kept.back().second;
  return area / limit;
}

}  // namespace

TEST_CASE("auroc examples") {
  CHECK(auroc(std::vector<double>{0.1, 0.2, 0.9}, Labels{0, 0, 1}) == 1.0);
  CHECK(auroc(std::vector<double>{0.5, 0.5}, Labels{0, 1}) == 0.5);
  CHECK(auroc(std::vector<double>{0.4, 0.8, 0.6, 0.9}, Labels{0, 0, 1, 1}) == 0.75);
  CHECK_THROWS_AS(auroc(std::vector<double>{0.1, 0.2}, Labels{1, 1}), UndefinedMetric);
  CHECK_THROWS_AS(auroc(std::vector<double>{0.1}, Labels{1, 0}), InvalidParameter);
}

TEST_CASE("aupr examples") {
  CHECK(aupr(std::vector<double>{0.1, 0.2, 0.9}, Labels{0, 0, 1}) == 1.0);
  CHECK(aupr(std::vector<double>(5, 0.3), Labels{1, 0, 1, 0, 0}) == doctest::Approx(2.0 / 5.0));
  CHECK(aupr(std::vector<double>{0.4, 0.8, 0.6, 0.9}, Labels{0, 0, 1, 1}) == doctest::Approx(0.5 * (1.0 + 2.0 / 3.0)));
  CHECK(aupr(std::vector<double>{0.4, 0.8, 0.6, 0.9}, Labels{0, 0, 1, 1}) == doctest::Approx(0.8333).epsilon(1e-4));
  CHECK_THROWS_AS(aupr(std::vector<double>{0.1, 0.2}, Labels{0, 0}), UndefinedMetric);
}

TEST_CASE("ranking metrics agree with brute force on random instances") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 11;
    std::vector<double> s(n);
    Labels y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 6) / 5.0;  // coarse values force ties
      y[i] = static_cast<std::uint8_t>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(std::abs(auroc(s, y) - brute_auroc(s, y)) <= 1e-12);
    CHECK(std::abs(aupr(s, y) - brute_ap(s, y)) <= 1e-12);
  }
}

TEST_CASE("ranking metric invariances") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> s(10), t(10);
    Labels y(10), flipped(10);
    for (std::size_t i = 0; i < 10; ++i) {
      s[i] = u(rng);
      t[i] = std::exp(3.0 * s[i]) - 7.0;
      y[i] = static_cast<std::uint8_t>(i % 3 == 0);
      flipped[i] = static_cast<std::uint8_t>(1 - y[i]);
    }
    CHECK(auroc(s, y) == doctest::Approx(auroc(t, y)).epsilon(1e-12));
    CHECK(aupr(s, y) == doctest::Approx(aupr(t, y)).epsilon(1e-12));
    CHECK(auroc(s, flipped) == doctest::Approx(1.0 - auroc(s, y)).epsilon(1e-12));
  }
}

TEST_CASE("connected components use 4-connectivity") {
  const Mask m{1, 0, 1,  //
               0, 1, 1,  //
               1, 0, 0};
  std::vector<int> labels;
  CHECK(connected_components(m, 3, 3, labels) == 3);
  CHECK(labels[2] == labels[5]);
  CHECK(labels[4] == labels[5]);
  CHECK(labels[0] != labels[4]);
  CHECK(labels[6] != labels[0]);
  CHECK(labels[6] != labels[4]);
  CHECK(labels[1] == -1);
}

TEST_CASE("pro examples") {
  const int h = 4, w = 4;
  Mask mask(16, 0);
  mask[5] = mask[6] = 1;

  Vector perfect = Vector::Zero(16);
  perfect[5] = perfect[6] = 1.0;
  CHECK(pro({perfect}, {mask}, h, w) == doctest::Approx(1.0));
  CHECK(pro({Vector::Zero(16)}, {mask}, h, w) == 0.0);

  Vector hand(16);
  for (int i = 0; i < 16; ++i) hand[i] = 0.05 * i;
  hand[5] = 0.9;
  hand[6] = 0.3;
  CHECK(std::abs(pro({hand}, {mask}, h, w) - brute_pro({hand}, {mask}, h, w, 0.3)) <= 1e-6);

  CHECK_THROWS_AS(pro({hand}, {Mask(16, 0)}, h, w), UndefinedMetric);
  CHECK_THROWS_AS(pro({hand}, {mask}, h, w, 0.0), InvalidParameter);
}

TEST_CASE("pro agrees with brute force and is monotone") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int n_maps = 1 + static_cast<int>(rng() % 2);
    std::vector<Vector> maps;
    std::vector<Mask> masks;
    for (int m = 0; m < n_maps; ++m) {
      Vector v(25);
      Mask k(25);
      for (int i = 0; i < 25; ++i) {
        v[i] = std::round(u(rng) * 20.0) / 20.0;
        k[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(u(rng) < 0.3);
      }
      maps.push_back(v);
      masks.push_back(k);
    }
    masks[0][12] = 1;
    const double limit = trial % 2 == 0 ? 0.3 : 0.6;
    const double got = pro(maps, masks, 5, 5, limit);
    CHECK(std::abs(got - brute_pro(maps, masks, 5, 5, limit)) <= 1e-6);
    CHECK(got >= 0.0);
    CHECK(got <= 1.0 + 1e-12);

    // Raising scores only inside anomalous regions never lowers PRO.
    std::vector<Vector> raised = maps;
    for (std::size_t m = 0; m < maps.size(); ++m) {
      for (int i = 0; i < 25; ++i) {
        if (masks[m][static_cast<std::size_t>(i)] && u(rng) < 0.5) raised[m][i] += u(rng);
      }
    }
    CHECK(pro(raised, masks, 5, 5, limit) >= got - 1e-12);
  }
}

TEST_CASE("pixel auroc over all cells") {
  const std::vector<Vector> maps{Vector{{0.1, 0.9}}, Vector{{0.2, 0.3}}};
  const std::vector<Mask> masks{Mask{0, 1}, Mask{0, 1}};
  CHECK(pixel_auroc(maps, masks) == doctest::Approx(brute_auroc({0.1, 0.9, 0.2, 0.3}, Labels{0, 1, 0, 1})));
  CHECK_THROWS_AS(pixel_auroc(maps, {Mask{0, 1}}), InvalidParameter);
}
