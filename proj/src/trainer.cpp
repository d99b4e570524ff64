#include "abound/trainer.hpp"

#include "abound/errors.hpp"

#include <cmath>
#include <numbers>

namespace abound {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidParameter("epochs must be >= 1");
  if (batch_size != 1) throw InvalidParameter("only batch_size 1 is supported");
  if (!(lr > 0.0) || !(adapter_lr > 0.0)) throw InvalidParameter("learning rates must be > 0");
  if (!(weight_decay >= 0.0)) throw InvalidParameter("weight_decay must be >= 0");
  loss_weights.validate();
  attack.validate();
  adapter.validate();
  dcf.validate();
}

json to_json(const TrainConfig& cfg) {
  return json{{"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"lr", cfg.lr},
              {"weight_decay", cfg.weight_decay},
              {"adapter_lr", cfg.adapter_lr},
              {"seed", cfg.seed}};
}

Model::Model(const DcfConfig& dcf_cfg, std::vector<std::string> class_names, int layers_,
             const AdapterConfig& adapter_cfg, std::uint64_t seed)
    : proxy(dcf_cfg),
      dcf(dcf_cfg, std::move(class_names), seed),
      adapter(dcf_cfg.dim, layers_ + 1, adapter_cfg, seed),
      layers(layers_) {}

FeatureVector Model::adapt_global(const FeatureVector& g) const { return apply_adapter(adapter, 0, g, false, nullptr); }

Matrix Model::adapt_patches(const Matrix& patches, int layer) const { return adapt_rows(adapter, 1 + layer, patches); }

Model make_model(const EmbeddingBundle& bundle, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.dcf.dim != bundle.dim) {
    throw InvalidParameter("model dim " + std::to_string(cfg.dcf.dim) + " does not match bundle dim " +
                           std::to_string(bundle.dim));
  }
  std::vector<std::string> names;
  for (const ClassRecord& c : bundle.classes) names.push_back(c.name);
  if (names.empty()) throw EmptyDataset("bundle has no classes");
  return Model(cfg.dcf, std::move(names), bundle.layers, cfg.adapter, cfg.seed);
}

json TrainReport::to_json() const {
  json rows = json::array();
  for (const EpochRecord& r : epochs) {
    rows.push_back({{"epoch", r.epoch},
                    {"abf", r.abf},
                    {"psg", r.psg},
                    {"seg", r.seg},
                    {"total", r.total},
                    {"fence_entropy", r.fence_entropy},
                    {"attack", {{"initial_gap", r.initial_gap}, {"final_gap", r.final_gap}, {"loss", r.attack_loss}}}});
  }
  return json{{"epochs", rows}, {"checkpoint", checkpoint}};
}

double cosine_lr(long step, long total_steps, double base_lr) {
  if (total_steps <= 0) throw InvalidParameter("total_steps must be > 0");
  if (step < 0 || step > total_steps) throw InvalidParameter("step outside [0, total_steps]");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {

std::vector<FeatureVector> fence_inputs(const Model& model, const ClassRecord& cls) {
  std::vector<FeatureVector> out;
  for (const Sample& s : cls.train_normals) out.push_back(model.adapt_global(s.global));
  if (out.size() == 1) {
    FeatureVector mean = FeatureVector::Zero(out.front().size());
    for (const Sample& s : cls.train_normals) mean += s.global;
    out.push_back(model.adapt_global(l2_normalize(mean)));
  }
  return out;
}

// Layer-averaged adapted patches, unit rows.
ad::Var averaged_cells(const Model& model, const BoundParams& adapter, ad::Tape& tape, const Sample& s, bool training,
                       std::mt19937_64& rng) {
  ad::Var acc;
  for (int l = 0; l < model.layers; ++l) {
    const ad::Var a = apply_adapter(model.adapter, adapter, 1 + l, tape.constant(s.patches[static_cast<std::size_t>(l)]),
                                    training, &rng);
    acc = l == 0 ? a : ad::add(acc, a);
  }
  return ad::l2_normalize_rows(acc);
}

ad::Var adapted_global(const Model& model, const BoundParams& adapter, ad::Tape& tape, const FeatureVector& g,
                       std::mt19937_64& rng) {
  const ad::Var row = tape.constant(g.transpose());
  return ad::transpose(apply_adapter(model.adapter, adapter, 0, row, true, &rng));
}

std::mt19937_64 step_stream(std::uint64_t seed, std::uint64_t step) {
  return std::mt19937_64(mix_seed(seed ^ mix_seed(step + 0x51E9ULL)));
}

}  // namespace

StepResult step_gradients(const Model& model, const EmbeddingBundle& bundle, int class_id, int sample,
                          const TrainConfig& cfg, std::uint64_t step) {
  const ClassRecord& cls = bundle.classes.at(static_cast<std::size_t>(class_id));
  const Sample& s = cls.train_normals.at(static_cast<std::size_t>(sample));
  std::mt19937_64 rng = step_stream(cfg.seed, step);
  const int anchors = model.dcf.config().prefix_anchors;
  std::uniform_int_distribution<int> pick_anchor(0, anchors - 1);
  const int a_pos = pick_anchor(rng);
  const int a_neg = pick_anchor(rng);

  ad::Tape tape;
  const BoundParams dcf = bind(tape, model.dcf.params(), true);
  const BoundParams adapter = bind(tape, model.adapter.params(), true);
  const double tau = cfg.attack.tau;

  // Concept vectors for the normal sample.
  const ad::Var v = adapted_global(model, adapter, tape, s.global, rng);
  const PromptVars prompts = assemble_prompts(model.dcf, dcf, v, class_id);
  const ad::Var p_pos = encode_prompt(tape, prompts, a_pos, Polarity::Pos, model.proxy);
  const ad::Var p_neg = encode_prompt(tape, prompts, a_neg, Polarity::Neg, model.proxy);

  // Phase 1 on values, phase 2 with the fence as constants.
  StepResult out;
  out.fence = forge_fence(fence_inputs(model, cls), p_pos.value(), p_neg.value(), cfg.attack, rng);
  const ad::Var l_abf = abf_entropy_loss(tape, out.fence, p_pos, p_neg, tau);
  out.fence_entropy = -l_abf.scalar();

  // Grounding on the normal sample.
  const ad::Var l_text = psg_text_loss(p_pos, p_neg, tape.constant(model.proxy.manual_anchor(Polarity::Pos)),
                                       tape.constant(model.proxy.manual_anchor(Polarity::Neg)));
  const ad::Var layer0 = apply_adapter(model.adapter, adapter, 1, tape.constant(s.patches.front()), true, &rng);
  const ad::Var l_fg = psg_finegrained_loss(prompts.of(Polarity::Pos).front(), prompts.of(Polarity::Neg).front(), layer0);
  const ad::Var l_psg = ad::add(l_text, l_fg);

  // Segmentation on one cut-and-paste anomaly; needs a donor class.
  ad::Var l_seg = tape.constant(Matrix::Zero(1, 1));
  if (bundle.classes.size() > 1) {
    std::uniform_int_distribution<int> pick_class(0, static_cast<int>(bundle.classes.size()) - 2);
    int donor_class = pick_class(rng);
    if (donor_class >= class_id) ++donor_class;
    const ClassRecord& donor_rec = bundle.classes[static_cast<std::size_t>(donor_class)];
    std::uniform_int_distribution<int> pick_sample(0, static_cast<int>(donor_rec.train_normals.size()) - 1);
    const Sample& donor = donor_rec.train_normals[static_cast<std::size_t>(pick_sample(rng))];
    const Sample anomaly = synthesize_anomaly(s, class_id, donor, donor_class, bundle.grid_h, bundle.grid_w, rng);

    const ad::Var va = adapted_global(model, adapter, tape, anomaly.global, rng);
    const PromptVars pa = assemble_prompts(model.dcf, dcf, va, class_id);
    const ad::Var q_pos = encode_prompt(tape, pa, a_pos, Polarity::Pos, model.proxy);
    const ad::Var q_neg = encode_prompt(tape, pa, a_neg, Polarity::Neg, model.proxy);
    const ad::Var cells = averaged_cells(model, adapter, tape, anomaly, true, rng);
    l_seg = seg_loss(abnormality_map(cells, q_pos, q_neg, tau), *anomaly.mask);
  }

  const ad::Var total = cbl_total(l_abf, l_psg, l_seg, cfg.loss_weights);
  tape.backward(total);
  out.abf = l_abf.scalar();
  out.psg = l_psg.scalar();
  out.seg = l_seg.scalar();
  out.total = total.scalar();
  out.dcf_grads = gradients(dcf);
  out.adapter_grads = gradients(adapter);
  return out;
}

namespace {

struct Adam {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit Adam(const ParamStore& store) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      m.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
      v.push_back(m.back());
    }
  }

  // Decoupled weight decay: with zero gradients only the decay term moves a parameter.
  void update(ParamStore& store, const std::vector<Matrix>& grads, long t, double lr, double wd) {
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
    for (std::size_t i = 0; i < store.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grads[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grads[i].cwiseProduct(grads[i]);
      Matrix& p = store.value(i);
      const Matrix step = (m[i] / c1).array() / ((v[i] / c2).array().sqrt() + kEps);
      p -= lr * (step + wd * p);
    }
  }

  std::vector<Matrix> m, v;
};

}  // namespace

TrainReport fit(const EmbeddingBundle& bundle, const TrainConfig& cfg, Model& model, const EpochCallback& on_epoch) {
  cfg.validate();
  long per_epoch = 0;
  for (const ClassRecord& c : bundle.classes) per_epoch += static_cast<long>(c.train_normals.size());
  if (per_epoch == 0) throw EmptyDataset("bundle has no training normals");
  if (model.dcf.num_classes() != static_cast<int>(bundle.classes.size())) {
    throw InvalidParameter("model and bundle class counts differ");
  }
  const long total_steps = per_epoch * cfg.epochs;

  Adam dcf_opt(model.dcf.params());
  Adam adapter_opt(model.adapter.params());
  TrainReport report;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t c = 0; c < bundle.classes.size(); ++c) {
      for (std::size_t i = 0; i < bundle.classes[c].train_normals.size(); ++i) {
        const StepResult r = step_gradients(model, bundle, static_cast<int>(c), static_cast<int>(i), cfg,
                                            static_cast<std::uint64_t>(step));
        const double decay = cosine_lr(step, total_steps, 1.0);
        ++step;
        dcf_opt.update(model.dcf.params(), r.dcf_grads, step, cfg.lr * decay, cfg.weight_decay);
        adapter_opt.update(model.adapter.params(), r.adapter_grads, step, cfg.adapter_lr * decay, cfg.weight_decay);

        rec.abf += r.abf;
        rec.psg += r.psg;
        rec.seg += r.seg;
        rec.total += r.total;
        rec.fence_entropy += r.fence_entropy;
        rec.attack_loss += r.fence.final_loss;
        for (double g : r.fence.initial_gaps) rec.initial_gap += g / static_cast<double>(r.fence.initial_gaps.size());
        for (double g : r.fence.gaps) rec.final_gap += g / static_cast<double>(r.fence.gaps.size());
      }
    }
    const double n = static_cast<double>(per_epoch);
    for (double* x : {&rec.abf, &rec.psg, &rec.seg, &rec.total, &rec.fence_entropy, &rec.attack_loss, &rec.initial_gap,
                      &rec.final_gap}) {
      *x /= n;
    }
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(epoch, model, rec);
  }
  return report;
}

std::vector<ClassFence> forge_class_fences(const Model& model, const EmbeddingBundle& bundle,
                                           const AttackConfig& attack, std::uint64_t seed) {
  std::vector<ClassFence> out;
  for (std::size_t c = 0; c < bundle.classes.size(); ++c) {
    const ClassRecord& cls = bundle.classes[c];
    if (cls.train_normals.empty()) continue;
    const std::vector<FeatureVector> inputs = fence_inputs(model, cls);
    FeatureVector mean = FeatureVector::Zero(inputs.front().size());
    for (const FeatureVector& v : inputs) mean += v;
    const ConceptPair concepts = mean_concepts(model.dcf, model.proxy, l2_normalize(mean), static_cast<int>(c));
    std::mt19937_64 rng(mix_seed(seed ^ mix_seed(0xF0F0ULL + c)));
    ClassFence f{cls.name, forge_fence(inputs, concepts.pos, concepts.neg, attack, rng), 0.0};
    f.entropy = mean_fence_entropy(f.fence, concepts.pos, concepts.neg, attack.tau);
    out.push_back(std::move(f));
  }
  return out;
}

void save_model(const std::filesystem::path& path, const Model& model, const json& extra_meta) {
  const AdapterConfig& a = model.adapter.config();
  json meta{{"dcf", model.dcf.config().to_json()},
            {"classes", model.dcf.class_names()},
            {"layers", model.layers},
            {"adapter", {{"rank", a.rank}, {"alpha", a.alpha}, {"dropout", a.dropout}}}};
  if (!extra_meta.is_null()) meta["run"] = extra_meta;
  save_checkpoint(path, meta, {{"dcf", &model.dcf.params()}, {"adapter", &model.adapter.params()}});
}

Model load_model(const std::filesystem::path& path) {
  const CheckpointData data = load_checkpoint(path);
  try {
    const json& meta = data.meta;
    const DcfConfig dcf = DcfConfig::from_json(meta.at("dcf"));
    AdapterConfig a;
    a.rank = meta.at("adapter").at("rank").get<int>();
    a.alpha = meta.at("adapter").at("alpha").get<double>();
    a.dropout = meta.at("adapter").at("dropout").get<double>();
    Model model(dcf, meta.at("classes").get<std::vector<std::string>>(), meta.at("layers").get<int>(), a, 0);
    if (data.groups.size() != 2 || data.groups[0].first != "dcf" || data.groups[1].first != "adapter") {
      throw FormatError(path.string() + ": expected parameter groups dcf, adapter");
    }
    restore(model.dcf.params(), data.groups[0].second);
    restore(model.adapter.params(), data.groups[1].second);
    return model;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint metadata: " + e.what());
  }
}

}  // namespace abound
