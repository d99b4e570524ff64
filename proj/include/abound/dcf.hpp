#pragma once

// Dynamic concept fusion: MoE-gated shared prompt tokens, class-specific
// tokens, SwiGLU instance modulation of the shallow prompt, and a frozen
// text-encoder proxy that turns a prompt set into a unit concept vector.

#include "abound/autodiff.hpp"
#include "abound/params.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace abound {

enum class Polarity { Pos = 0, Neg = 1 };
inline constexpr std::array<Polarity, 2> kPolarities = {Polarity::Pos, Polarity::Neg};
inline int idx(Polarity p) { return static_cast<int>(p); }
const char* polarity_name(Polarity p);

struct DcfConfig {
  int dim = 64;              // feature dimension, also the token width
  int depth = 7;             // one shallow + depth-1 deep prompts
  int experts = 4;
  int shared_tokens = 8;
  int class_tokens = 4;
  int modulator_hidden = 16;
  int prefix_anchors = 3;    // per polarity
  int prefix_tokens = 2;
  int context_length = 77;
  std::uint64_t proxy_seed = 20251;

  int prompt_tokens() const { return shared_tokens + class_tokens; }
  void validate() const;
  nlohmann::json to_json() const;
  static DcfConfig from_json(const nlohmann::json& j);
};

/// Frozen stand-in for a prompt-conditioned text encoder. Every matrix is
/// drawn once from proxy_seed and never trained.
///
/// Sequence layout: [SOT] prompt prefix [EOT] [PAD]... padded to the context
/// length. Each stage applies causal self-attention followed by
/// X <- X + tanh(norm(X) W_i). Before stage i >= 1 the prompt rows are
/// replaced by the i-th deep prompt. Output is W_out applied to the EOT row,
/// L2-normalized. PAD rows sit after EOT and are masked out of EOT's
/// attention, so they are only materialized when `materialize_padding` is set.
class TextEncoderProxy {
 public:
  explicit TextEncoderProxy(const DcfConfig& cfg);

  /// `prompt_layers` holds the shallow prompt followed by the deep prompts
  /// (any count up to depth; empty for anchor-only prompts). All prompt
  /// layers must have the same row count.
  ad::Var encode(ad::Tape& tape, std::span<const ad::Var> prompt_layers, Polarity polarity,
                 int prefix_index) const;

  /// Manual anchor: mean of encoded anchor-only prompts of one polarity, normalized.
  const FeatureVector& manual_anchor(Polarity p) const { return manual_[static_cast<std::size_t>(idx(p))]; }

  const DcfConfig& config() const { return cfg_; }
  bool materialize_padding = false;

  Matrix sot, eot, pad;           // 1 x D token rows
  Matrix positional;              // context_length x D
  std::vector<Matrix> stages;     // depth matrices, D x D
  Matrix w_out;                   // D x D
  std::array<std::vector<Matrix>, 2> prefixes;  // prefix_tokens x D per anchor

  bool operator==(const TextEncoderProxy& o) const;

 private:
  DcfConfig cfg_;
  std::array<FeatureVector, 2> manual_;
};

/// Trainable DCF state. Parameter order (and therefore checkpoint layout):
/// gating MLP, expert dictionaries [polarity][layer][expert], class prompts
/// [class][layer][polarity], modulators [polarity][shared|class][w1,w2,w3].
class DcfModel {
 public:
  DcfModel(const DcfConfig& cfg, std::vector<std::string> class_names, std::uint64_t init_seed);

  const DcfConfig& config() const { return cfg_; }
  const std::vector<std::string>& class_names() const { return classes_; }
  int num_classes() const { return static_cast<int>(classes_.size()); }
  int class_id(const std::string& name) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  std::size_t gate_w1() const { return gate_; }
  std::size_t gate_b1() const { return gate_ + 1; }
  std::size_t gate_w2() const { return gate_ + 2; }
  std::size_t gate_b2() const { return gate_ + 3; }
  std::size_t expert(Polarity p, int layer, int k) const;
  std::size_t class_prompt(int class_id, int layer, Polarity p) const;
  /// part 0 = shared offsets, 1 = class offsets; which 0..2 = w1, w2, w3.
  std::size_t modulator(Polarity p, int part, int which) const;

 private:
  DcfConfig cfg_;
  std::vector<std::string> classes_;
  ParamStore params_;
  std::size_t gate_ = 0, experts_ = 0, class_prompts_ = 0, modulators_ = 0;
};

/// Per polarity: [0] shallow prompt, [i] deep prompt i. Each (T_sa+T_sp) x D.
struct PromptVars {
  std::array<std::vector<ad::Var>, 2> layers;
  const std::vector<ad::Var>& of(Polarity p) const { return layers[static_cast<std::size_t>(idx(p))]; }
};

struct PromptSet {
  std::array<std::vector<Matrix>, 2> layers;
  const std::vector<Matrix>& of(Polarity p) const { return layers[static_cast<std::size_t>(idx(p))]; }
};

/// softmax(MLP_gate(v_cls)); v_cls is a D x 1 node.
ad::Var gate_weights(const DcfModel& model, const BoundParams& params, const ad::Var& v_cls);
FeatureVector gate_weights(const DcfModel& model, const FeatureVector& v_cls);

/// sum_k w_k E_k.
ad::Var fuse_shared_prompt(const ad::Var& w, std::span<const ad::Var> experts);
Matrix fuse_shared_prompt(const Vector& w, std::span<const Matrix> experts);

/// Throws UnknownClass for an out-of-range class id.
PromptVars assemble_prompts(const DcfModel& model, const BoundParams& params, const ad::Var& v_cls, int class_id);
PromptSet assemble_prompts(const DcfModel& model, const FeatureVector& v_cls, int class_id);

ad::Var encode_prompt(ad::Tape& tape, const PromptVars& ps, int prefix_index, Polarity polarity,
                      const TextEncoderProxy& proxy);
FeatureVector encode_prompt(const PromptSet& ps, int prefix_index, Polarity polarity, const TextEncoderProxy& proxy);

/// Concept vectors averaged over every prefix anchor, renormalized. Used at inference.
struct ConceptPair {
  FeatureVector pos;
  FeatureVector neg;
};
ConceptPair mean_concepts(const DcfModel& model, const TextEncoderProxy& proxy, const FeatureVector& v_cls,
                          int class_id);

}  // namespace abound
