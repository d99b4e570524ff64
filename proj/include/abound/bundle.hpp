#pragma once

#include "abound/numgrad.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace abound {

using Mask = std::vector<std::uint8_t>;  // H*W cells, row-major, 0/1

struct Sample {
  FeatureVector global;          // unit-norm CLS-style feature
  std::vector<Matrix> patches;   // one (H*W) x D matrix per layer, row = h*W + w
  std::optional<Mask> mask;      // present for anomalies and synthetic anomalies
};

/// Exact (bitwise-value) equality, shape-safe.
bool operator==(const Sample& a, const Sample& b);

struct ClassRecord {
  std::string name;
  std::vector<Sample> train_normals;
  std::vector<Sample> test_normals;
  std::vector<Sample> test_anomalies;
};

bool operator==(const ClassRecord& a, const ClassRecord& b);

struct EmbeddingBundle {
  int dim = 64;
  int layers = 4;
  int grid_h = 8;
  int grid_w = 8;
  std::uint64_t seed = 0;
  std::vector<ClassRecord> classes;

  int cells() const { return grid_h * grid_w; }
  /// Index of the class with the given name, or -1.
  int class_index(const std::string& name) const;
  /// Throws FormatError if any array is inconsistent with (dim, layers, grid).
  void validate() const;
};

bool operator==(const EmbeddingBundle& a, const EmbeddingBundle& b);

struct SynthConfig {
  int n_classes = 3;
  int shots = 2;
  int n_test_normal = 10;
  int n_test_anomaly = 10;
  double noise_sigma = 0.05;
  double anomaly_strength = 0.8;
  int anomaly_patch_count = 1;
  int dim = 64;
  int layers = 4;
  int grid_h = 8;
  int grid_w = 8;
  std::uint64_t seed = 0;

  /// Throws InvalidParameter on the first violated constraint.
  void validate() const;
};

/// Ground truth the generator used; handy for oracles.
struct SyntheticTruth {
  std::vector<FeatureVector> prototypes;
  std::vector<FeatureVector> defect_directions;
};

/// Deterministic desk-scale stand-in for encoder embeddings of an industrial
/// inspection dataset. All stored values are rounded to float32 so the
/// in-memory bundle equals its on-disk form.
EmbeddingBundle synthesize_dataset(const SynthConfig& cfg, SyntheticTruth* truth = nullptr);

struct Rect {
  int top = 0;
  int left = 0;
  int height = 1;
  int width = 1;
};

/// Transplants donor patch features inside `rect` (all layers) into `s`.
/// The mask marks the transplanted cells; the global is recomputed from the
/// layer-0 patch mean. Throws InvalidDonor when both come from the same class.
Sample synthesize_anomaly_at(const Sample& s, int s_class, const Sample& donor, int donor_class,
                             const Rect& rect, int grid_h, int grid_w);

/// Cut-and-paste with a random rectangle whose sides are uniform in
/// [1, ceil(H/2)] x [1, ceil(W/2)] at a uniform position.
Sample synthesize_anomaly(const Sample& s, int s_class, const Sample& donor, int donor_class,
                          int grid_h, int grid_w, std::mt19937_64& rng);

inline constexpr const char* kBundleVersion = "abound-bundle/1";

void save_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& dir);
EmbeddingBundle load_bundle(const std::filesystem::path& dir);

/// SplitMix64 finalizer; used to turn structured seeds into RNG seeds.
std::uint64_t mix_seed(std::uint64_t x);
/// Per-sample stream: seed XOR sample index, mixed.
std::mt19937_64 sample_stream(std::uint64_t seed, std::uint64_t index);

}  // namespace abound
