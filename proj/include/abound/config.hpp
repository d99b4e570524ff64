#pragma once

// Run configuration: one JSON document covering synthesis, training, attack,
// model, inference, evaluation and paths. Unknown keys are rejected.

#include "abound/bundle.hpp"
#include "abound/infer.hpp"
#include "abound/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <string_view>

namespace abound {

struct EvalConfig {
  double fpr_limit = 0.3;
  int n_thresholds = 200;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SynthConfig synth;
  TrainConfig train;
  InferConfig infer;
  EvalConfig eval;
  std::string out = "runs";
  std::string bundle;
  std::string checkpoint;
  std::string scores;
};

/// Fully populated default document.
nlohmann::json default_config_json();

/// Overlays `overlay` onto `base`. Throws ConfigError naming the first key
/// that does not exist in `base` or whose value has the wrong type.
void merge_config(nlohmann::json& base, const nlohmann::json& overlay, const std::string& prefix = "");

/// Applies "a.b.c=value"; value is parsed as JSON, falling back to a string.
void set_config_value(nlohmann::json& cfg, const std::string& assignment);

/// Builds and validates typed config; violations become ConfigError.
RunConfig parse_config(const nlohmann::json& doc);
nlohmann::json to_json(const RunConfig& cfg);

std::uint64_t fnv1a64(std::string_view bytes);
/// Hash of the canonical serialization with output-only fields removed.
std::string config_hash(const nlohmann::json& resolved);

}  // namespace abound
