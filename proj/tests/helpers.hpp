#pragma once

#include "abound/numgrad.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace testing_util {

inline abound::Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  abound::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

inline abound::FeatureVector unit(Eigen::Index d, std::mt19937_64& rng) {
  abound::FeatureVector v = gaussian(d, 1, rng);
  return v / v.norm();
}

inline abound::FeatureVector basis(Eigen::Index d, Eigen::Index i) {
  abound::FeatureVector v = abound::FeatureVector::Zero(d);
  v[i] = 1.0;
  return v;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("abound-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_util
