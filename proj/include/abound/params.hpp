#pragma once

#include "abound/autodiff.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace abound {

/// Ordered collection of named parameter tensors. Order is fixed at
/// construction and defines checkpoint layout.
class ParamStore {
 public:
  int add(std::string name, Matrix init);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& value(std::size_t i) { return values_[i]; }
  const Matrix& value(std::size_t i) const { return values_[i]; }
  /// Throws InvalidParameter for unknown names.
  std::size_t index(const std::string& name) const;
  std::size_t scalar_count() const;

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

/// Parameters of one store recorded on a tape, either as differentiable
/// leaves or as constants.
struct BoundParams {
  std::vector<ad::Var> vars;
  const ad::Var& operator[](std::size_t i) const { return vars[i]; }
};

BoundParams bind(ad::Tape& tape, const ParamStore& store, bool trainable);
/// Gradients for every bound parameter after tape.backward(); zero where
/// the parameter did not influence the loss.
std::vector<Matrix> gradients(const BoundParams& bound);

/// Checkpoint: magic "ABNDCKPT", u64 header length, UTF-8 JSON header, then
/// little-endian float32 data for every store in header order (row-major).
inline constexpr const char* kCheckpointFormat = "abound-checkpoint/1";

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<std::pair<std::string, const ParamStore*>>& stores);

struct CheckpointData {
  nlohmann::json meta;
  // group -> (name, value) in file order
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, Matrix>>>> groups;
};

CheckpointData load_checkpoint(const std::filesystem::path& path);

/// Copies values for every parameter of `store` from a loaded group,
/// checking names and shapes.
void restore(ParamStore& store, const std::vector<std::pair<std::string, Matrix>>& group);

}  // namespace abound
