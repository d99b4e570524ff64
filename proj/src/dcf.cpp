#include "abound/dcf.hpp"

#include "abound/bundle.hpp"
#include "abound/errors.hpp"

#include <cmath>
#include <random>

namespace abound {

using json = nlohmann::json;

namespace {

constexpr double kAttentionScale = 1.0;
constexpr double kMasked = -1e9;

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

Matrix unit_rows(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  Matrix m = gaussian(rows, cols, 1.0, rng);
  m.rowwise().normalize();
  return m;
}

Matrix causal_mask(Eigen::Index n) {
  Matrix m = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) m(i, j) = kMasked;
  }
  return m;
}

// Flattens a T x D prompt block into a 1 x (T*D) row.
ad::Var flatten(const ad::Var& m) { return ad::reshape(m, 1, m.rows() * m.cols()); }

}  // namespace

const char* polarity_name(Polarity p) { return p == Polarity::Pos ? "pos" : "neg"; }

void DcfConfig::validate() const {
  if (dim < 2 || depth < 1 || experts < 1 || shared_tokens < 1 || class_tokens < 1 || modulator_hidden < 1 ||
      prefix_anchors < 1 || prefix_tokens < 1 || context_length < 3) {
    throw InvalidParameter("DCF configuration values must be positive");
  }
}

json DcfConfig::to_json() const {
  return json{{"dim", dim},
              {"depth", depth},
              {"experts", experts},
              {"shared_tokens", shared_tokens},
              {"class_tokens", class_tokens},
              {"modulator_hidden", modulator_hidden},
              {"prefix_anchors", prefix_anchors},
              {"prefix_tokens", prefix_tokens},
              {"context_length", context_length},
              {"proxy_seed", proxy_seed}};
}

DcfConfig DcfConfig::from_json(const json& j) {
  DcfConfig c;
  c.dim = j.at("dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.experts = j.at("experts").get<int>();
  c.shared_tokens = j.at("shared_tokens").get<int>();
  c.class_tokens = j.at("class_tokens").get<int>();
  c.modulator_hidden = j.at("modulator_hidden").get<int>();
  c.prefix_anchors = j.at("prefix_anchors").get<int>();
  c.prefix_tokens = j.at("prefix_tokens").get<int>();
  c.context_length = j.at("context_length").get<int>();
  c.proxy_seed = j.at("proxy_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

TextEncoderProxy::TextEncoderProxy(const DcfConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(mix_seed(cfg_.proxy_seed));
  const int d = cfg_.dim;
  sot = unit_rows(1, d, rng);
  eot = unit_rows(1, d, rng);
  pad = unit_rows(1, d, rng);
  positional = gaussian(cfg_.context_length, d, 0.1 / std::sqrt(static_cast<double>(d)), rng);
  for (int i = 0; i < cfg_.depth; ++i) stages.push_back(gaussian(d, d, 1.0, rng));
  w_out = gaussian(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  for (const Polarity p : kPolarities) {
    for (int a = 0; a < cfg_.prefix_anchors; ++a) {
      prefixes[static_cast<std::size_t>(idx(p))].push_back(unit_rows(cfg_.prefix_tokens, d, rng));
    }
  }
  for (const Polarity p : kPolarities) {
    FeatureVector acc = FeatureVector::Zero(d);
    for (int a = 0; a < cfg_.prefix_anchors; ++a) {
      ad::Tape tape;
      acc += encode(tape, {}, p, a).value();
    }
    manual_[static_cast<std::size_t>(idx(p))] = l2_normalize(acc);
  }
}

bool TextEncoderProxy::operator==(const TextEncoderProxy& o) const {
  if (stages.size() != o.stages.size()) return false;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i] != o.stages[i]) return false;
  }
  return sot == o.sot && eot == o.eot && pad == o.pad && positional == o.positional && w_out == o.w_out &&
         prefixes == o.prefixes;
}

ad::Var TextEncoderProxy::encode(ad::Tape& tape, std::span<const ad::Var> prompt_layers, Polarity polarity,
                                 int prefix_index) const {
  const auto& anchors = prefixes[static_cast<std::size_t>(idx(polarity))];
  if (prefix_index < 0 || prefix_index >= static_cast<int>(anchors.size())) {
    throw InvalidParameter("prefix index out of range");
  }
  const Matrix& prefix = anchors[static_cast<std::size_t>(prefix_index)];
  const Eigen::Index d = cfg_.dim;
  const Eigen::Index n_prompt = prompt_layers.empty() ? 0 : prompt_layers.front().rows();
  for (const ad::Var& p : prompt_layers) {
    if (p.rows() != n_prompt || p.cols() != d) throw InvalidParameter("prompt layers must share one shape");
  }
  const Eigen::Index used = 1 + n_prompt + prefix.rows() + 1;
  if (used > cfg_.context_length) {
    throw PromptTooLong(std::to_string(used) + " tokens exceed context length " + std::to_string(cfg_.context_length));
  }
  const Eigen::Index rows = materialize_padding ? cfg_.context_length : used;
  const Eigen::Index eot_row = used - 1;

  // Fixed rows: SOT, prefix, EOT, PAD (with positions); prompt rows enter as nodes.
  Matrix head = sot + positional.row(0);
  Matrix tail(rows - 1 - n_prompt, d);
  tail.topRows(prefix.rows()) = prefix + positional.middleRows(1 + n_prompt, prefix.rows());
  tail.row(prefix.rows()) = eot + positional.row(eot_row);
  for (Eigen::Index r = used; r < rows; ++r) tail.row(r - 1 - n_prompt) = pad + positional.row(r);

  std::vector<ad::Var> parts{tape.constant(std::move(head))};
  if (n_prompt > 0) {
    parts.push_back(ad::add(prompt_layers.front(), tape.constant(positional.middleRows(1, n_prompt))));
  }
  parts.push_back(tape.constant(std::move(tail)));
  ad::Var x = ad::concat_rows(parts);

  const ad::Var mask = tape.constant(causal_mask(rows));
  const double mlp_scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (int stage = 0; stage < cfg_.depth; ++stage) {
    if (stage >= 1 && stage < static_cast<int>(prompt_layers.size()) && n_prompt > 0) {
      x = ad::concat_rows({ad::slice_rows(x, 0, 1), prompt_layers[static_cast<std::size_t>(stage)],
                           ad::slice_rows(x, 1 + n_prompt, rows - 1 - n_prompt)});
    }
    const ad::Var xn = ad::soft_normalize_rows(x);
    const ad::Var scores = ad::add(ad::scale(ad::matmul(xn, ad::transpose(xn)), kAttentionScale), mask);
    x = ad::add(x, ad::matmul(ad::softmax_rows(scores), xn));
    const ad::Var xm = ad::soft_normalize_rows(x);
    x = ad::add(x, ad::scale(ad::tanh(ad::matmul(xm, tape.constant(stages[static_cast<std::size_t>(stage)]))), mlp_scale));
  }
  const ad::Var out = ad::matmul(tape.constant(w_out), ad::transpose(ad::slice_rows(x, eot_row, 1)));
  return ad::l2_normalize(out);
}

// ---------------------------------------------------------------------------

DcfModel::DcfModel(const DcfConfig& cfg, std::vector<std::string> class_names, std::uint64_t init_seed)
    : cfg_(cfg), classes_(std::move(class_names)) {
  cfg_.validate();
  if (classes_.empty()) throw InvalidParameter("DCF needs at least one class");
  std::mt19937_64 rng(mix_seed(init_seed ^ 0xDCF0DCF0ULL));
  const int d = cfg_.dim;
  const int hidden = std::max(1, d / 2);
  const double tok = 1.0 / std::sqrt(static_cast<double>(d));

  gate_ = params_.size();
  params_.add("gate.w1", gaussian(hidden, d, 1.0, rng));
  params_.add("gate.b1", Matrix::Zero(hidden, 1));
  params_.add("gate.w2", gaussian(cfg_.experts, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
  params_.add("gate.b2", Matrix::Zero(cfg_.experts, 1));

  experts_ = params_.size();
  for (const Polarity p : kPolarities) {
    for (int l = 0; l < cfg_.depth; ++l) {
      for (int k = 0; k < cfg_.experts; ++k) {
        params_.add(std::string("expert.") + polarity_name(p) + "." + std::to_string(l) + "." + std::to_string(k),
                    gaussian(cfg_.shared_tokens, d, tok, rng));
      }
    }
  }

  class_prompts_ = params_.size();
  for (int c = 0; c < num_classes(); ++c) {
    for (int l = 0; l < cfg_.depth; ++l) {
      for (const Polarity p : kPolarities) {
        params_.add("class." + std::to_string(c) + "." + std::to_string(l) + "." + polarity_name(p),
                    gaussian(cfg_.class_tokens, d, tok, rng));
      }
    }
  }

  modulators_ = params_.size();
  for (const Polarity p : kPolarities) {
    for (int part = 0; part < 2; ++part) {
      const int tokens = part == 0 ? cfg_.shared_tokens : cfg_.class_tokens;
      const std::string stem = std::string("mod.") + polarity_name(p) + (part == 0 ? ".shared" : ".class");
      params_.add(stem + ".w1", gaussian(cfg_.modulator_hidden, d, 1.0, rng));
      params_.add(stem + ".w2", gaussian(cfg_.modulator_hidden, d, 1.0, rng));
      params_.add(stem + ".w3", gaussian(static_cast<Eigen::Index>(tokens) * d, cfg_.modulator_hidden, 0.01, rng));
    }
  }
}

int DcfModel::class_id(const std::string& name) const {
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i] == name) return static_cast<int>(i);
  }
  throw UnknownClass(name);
}

std::size_t DcfModel::expert(Polarity p, int layer, int k) const {
  return experts_ + static_cast<std::size_t>((idx(p) * cfg_.depth + layer) * cfg_.experts + k);
}

std::size_t DcfModel::class_prompt(int class_id, int layer, Polarity p) const {
  return class_prompts_ + static_cast<std::size_t>((class_id * cfg_.depth + layer) * 2 + idx(p));
}

std::size_t DcfModel::modulator(Polarity p, int part, int which) const {
  return modulators_ + static_cast<std::size_t>((idx(p) * 2 + part) * 3 + which);
}

// ---------------------------------------------------------------------------

ad::Var gate_weights(const DcfModel& model, const BoundParams& params, const ad::Var& v_cls) {
  const ad::Var hidden = ad::tanh(ad::add(ad::matmul(params[model.gate_w1()], v_cls), params[model.gate_b1()]));
  const ad::Var logits = ad::add(ad::matmul(params[model.gate_w2()], hidden), params[model.gate_b2()]);
  return ad::transpose(ad::softmax_rows(ad::transpose(logits)));
}

FeatureVector gate_weights(const DcfModel& model, const FeatureVector& v_cls) {
  ad::Tape tape;
  const BoundParams params = bind(tape, model.params(), false);
  return gate_weights(model, params, tape.constant(v_cls)).value();
}

ad::Var fuse_shared_prompt(const ad::Var& w, std::span<const ad::Var> experts) {
  if (experts.empty() || w.rows() != static_cast<Eigen::Index>(experts.size()) || w.cols() != 1) {
    throw InvalidParameter("expert weight count must equal the dictionary size");
  }
  std::vector<ad::Var> rows;
  rows.reserve(experts.size());
  for (const ad::Var& e : experts) rows.push_back(flatten(e));
  const ad::Var stacked = ad::concat_rows(rows);
  return ad::reshape(ad::matmul(ad::transpose(w), stacked), experts.front().rows(), experts.front().cols());
}

Matrix fuse_shared_prompt(const Vector& w, std::span<const Matrix> experts) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Matrix& e : experts) vars.push_back(tape.constant(e));
  return fuse_shared_prompt(tape.constant(w), vars).value();
}

namespace {

ad::Var swiglu_offsets(const DcfModel& model, const BoundParams& params, const ad::Var& v, Polarity p, int part) {
  const int tokens = part == 0 ? model.config().shared_tokens : model.config().class_tokens;
  const ad::Var a = ad::matmul(params[model.modulator(p, part, 0)], v);
  const ad::Var b = ad::silu(ad::matmul(params[model.modulator(p, part, 1)], v));
  const ad::Var flat = ad::matmul(params[model.modulator(p, part, 2)], ad::mul(a, b));
  return ad::reshape(flat, tokens, model.config().dim);
}

}  // namespace

PromptVars assemble_prompts(const DcfModel& model, const BoundParams& params, const ad::Var& v_cls, int class_id) {
  if (class_id < 0 || class_id >= model.num_classes()) throw UnknownClass("class id " + std::to_string(class_id));
  const DcfConfig& cfg = model.config();
  // One gating decision per sample, shared by every layer.
  const ad::Var w = gate_weights(model, params, v_cls);
  PromptVars out;
  for (const Polarity p : kPolarities) {
    auto& layers = out.layers[static_cast<std::size_t>(idx(p))];
    for (int l = 0; l < cfg.depth; ++l) {
      std::vector<ad::Var> experts;
      for (int k = 0; k < cfg.experts; ++k) experts.push_back(params[model.expert(p, l, k)]);
      ad::Var shared = fuse_shared_prompt(w, experts);
      ad::Var specific = params[model.class_prompt(class_id, l, p)];
      if (l == 0) {
        shared = ad::add(shared, swiglu_offsets(model, params, v_cls, p, 0));
        specific = ad::add(specific, swiglu_offsets(model, params, v_cls, p, 1));
      }
      layers.push_back(ad::concat_rows({shared, specific}));
    }
  }
  return out;
}

PromptSet assemble_prompts(const DcfModel& model, const FeatureVector& v_cls, int class_id) {
  ad::Tape tape;
  const BoundParams params = bind(tape, model.params(), false);
  const PromptVars vars = assemble_prompts(model, params, tape.constant(v_cls), class_id);
  PromptSet out;
  for (std::size_t p = 0; p < 2; ++p) {
    for (const ad::Var& v : vars.layers[p]) out.layers[p].push_back(v.value());
  }
  return out;
}

ad::Var encode_prompt(ad::Tape& tape, const PromptVars& ps, int prefix_index, Polarity polarity,
                      const TextEncoderProxy& proxy) {
  return proxy.encode(tape, ps.of(polarity), polarity, prefix_index);
}

FeatureVector encode_prompt(const PromptSet& ps, int prefix_index, Polarity polarity, const TextEncoderProxy& proxy) {
  ad::Tape tape;
  std::vector<ad::Var> layers;
  for (const Matrix& m : ps.of(polarity)) layers.push_back(tape.constant(m));
  return proxy.encode(tape, layers, polarity, prefix_index).value();
}

ConceptPair mean_concepts(const DcfModel& model, const TextEncoderProxy& proxy, const FeatureVector& v_cls,
                          int class_id) {
  ad::Tape tape;
  const BoundParams params = bind(tape, model.params(), false);
  const PromptVars ps = assemble_prompts(model, params, tape.constant(v_cls), class_id);
  std::array<FeatureVector, 2> acc{FeatureVector::Zero(model.config().dim), FeatureVector::Zero(model.config().dim)};
  for (const Polarity p : kPolarities) {
    for (int a = 0; a < model.config().prefix_anchors; ++a) {
      acc[static_cast<std::size_t>(idx(p))] += encode_prompt(tape, ps, a, p, proxy).value();
    }
  }
  return ConceptPair{l2_normalize(acc[0]), l2_normalize(acc[1])};
}

}  // namespace abound
