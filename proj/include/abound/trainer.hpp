#pragma once

// Joint optimization of the DCF parameters and the low-rank visual adapter
// under the concept-boundary loss, with fence forging inside every step.

#include "abound/abf.hpp"
#include "abound/adapter.hpp"
#include "abound/bundle.hpp"
#include "abound/cbl.hpp"
#include "abound/dcf.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace abound {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 1;
  double lr = 1.5e-2;
  double weight_decay = 1e-5;
  double adapter_lr = 2e-5;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  AttackConfig attack;
  AdapterConfig adapter;
  DcfConfig dcf;

  void validate() const;
};

/// Frozen proxy plus every trainable component.
struct Model {
  Model(const DcfConfig& dcf_cfg, std::vector<std::string> class_names, int layers, const AdapterConfig& adapter_cfg,
        std::uint64_t seed);

  TextEncoderProxy proxy;
  DcfModel dcf;
  Adapter adapter;
  int layers;

  /// Global feature through the (eval-mode) adapter.
  FeatureVector adapt_global(const FeatureVector& g) const;
  /// Patch block of one layer through its adapter, unit rows.
  Matrix adapt_patches(const Matrix& patches, int layer) const;
};

/// Builds an untrained model shaped for `bundle`; DcfConfig.dim must match.
Model make_model(const EmbeddingBundle& bundle, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double abf = 0.0;
  double psg = 0.0;
  double seg = 0.0;
  double total = 0.0;           // weighted
  double fence_entropy = 0.0;   // mean predictive entropy of forged features
  double initial_gap = 0.0;     // mean balance gap before / after PGD
  double final_gap = 0.0;
  double attack_loss = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::string checkpoint;

  nlohmann::json to_json() const;
};

/// base_lr * (1 + cos(pi * step / total_steps)) / 2.
double cosine_lr(long step, long total_steps, double base_lr);

/// Loss values and raw gradients of one training step (no update applied).
struct StepResult {
  double abf = 0.0;
  double psg = 0.0;
  double seg = 0.0;
  double total = 0.0;
  std::vector<Matrix> dcf_grads;
  std::vector<Matrix> adapter_grads;
  FenceBatch fence;
  double fence_entropy = 0.0;
};

/// One step on training normal `sample` of class `class_id`. All three loss
/// terms are always evaluated so RNG consumption is independent of weights.
StepResult step_gradients(const Model& model, const EmbeddingBundle& bundle, int class_id, int sample,
                          const TrainConfig& cfg, std::uint64_t step);

using EpochCallback = std::function<void(int epoch, const Model& model, const EpochRecord& record)>;

/// Trains `model` in place. Throws EmptyDataset if no class has a training normal.
TrainReport fit(const EmbeddingBundle& bundle, const TrainConfig& cfg, Model& model,
                const EpochCallback& on_epoch = {});

/// Forges one fence per class from the adapted training globals against
/// anchor-averaged concepts of the class mean (deterministic given `seed`).
struct ClassFence {
  std::string name;
  FenceBatch fence;
  double entropy = 0.0;
};
std::vector<ClassFence> forge_class_fences(const Model& model, const EmbeddingBundle& bundle,
                                           const AttackConfig& attack, std::uint64_t seed);

void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra_meta = {});
Model load_model(const std::filesystem::path& path);

nlohmann::json to_json(const TrainConfig& cfg);

}  // namespace abound
