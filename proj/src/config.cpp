#include "abound/config.hpp"

#include "abound/errors.hpp"

#include <cstdio>

namespace abound {

using json = nlohmann::json;

json default_config_json() { return to_json(RunConfig{}); }

json to_json(const RunConfig& c) {
  const SynthConfig& s = c.synth;
  const TrainConfig& t = c.train;
  const AttackConfig& a = t.attack;
  const DcfConfig& m = t.dcf;
  return json{
      {"seed", c.seed},
      {"synth",
       {{"n_classes", s.n_classes},
        {"shots", s.shots},
        {"n_test_normal", s.n_test_normal},
        {"n_test_anomaly", s.n_test_anomaly},
        {"noise_sigma", s.noise_sigma},
        {"anomaly_strength", s.anomaly_strength},
        {"anomaly_patch_count", s.anomaly_patch_count},
        {"dim", s.dim},
        {"layers", s.layers},
        {"grid_h", s.grid_h},
        {"grid_w", s.grid_w}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"lr", t.lr},
        {"weight_decay", t.weight_decay},
        {"adapter_lr", t.adapter_lr},
        {"loss_weights", {{"abf", t.loss_weights.abf}, {"psg", t.loss_weights.psg}, {"seg", t.loss_weights.seg}}}}},
      {"attack",
       {{"steps", a.steps},
        {"alpha", a.alpha},
        {"epsilon", a.epsilon},
        {"beta", a.beta},
        {"tau", a.tau},
        {"init_noise_scale", a.init_noise_scale},
        {"use_balance", a.use_balance}}},
      {"model",
       {{"depth", m.depth},
        {"experts", m.experts},
        {"shared_tokens", m.shared_tokens},
        {"class_tokens", m.class_tokens},
        {"modulator_hidden", m.modulator_hidden},
        {"prefix_anchors", m.prefix_anchors},
        {"prefix_tokens", m.prefix_tokens},
        {"context_length", m.context_length},
        {"proxy_seed", m.proxy_seed},
        {"adapter", {{"rank", t.adapter.rank}, {"alpha", t.adapter.alpha}, {"dropout", t.adapter.dropout}}}}},
      {"infer",
       {{"text_weight", c.infer.text_weight},
        {"vis_weight", c.infer.vis_weight},
        {"shrinkage", c.infer.shrinkage},
        {"tau", c.infer.tau}}},
      {"eval", {{"fpr_limit", c.eval.fpr_limit}, {"n_thresholds", c.eval.n_thresholds}}},
      {"paths", {{"out", c.out}, {"bundle", c.bundle}, {"checkpoint", c.checkpoint}, {"scores", c.scores}}}};
}

namespace {

bool compatible(const json& want, const json& got) {
  if (want.is_boolean()) return got.is_boolean();
  if (want.is_string()) return got.is_string();
  if (want.is_number_unsigned()) return got.is_number_unsigned() || (got.is_number_integer() && got.get<long long>() >= 0);
  if (want.is_number_integer()) return got.is_number_integer();
  if (want.is_number()) return got.is_number();
  if (want.is_object()) return got.is_object();
  return false;
}

}  // namespace

void merge_config(json& base, const json& overlay, const std::string& prefix) {
  if (!overlay.is_object()) throw ConfigError("config" + (prefix.empty() ? std::string() : " key '" + prefix + "'") +
                                              " must be a JSON object");
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (!compatible(slot, it.value())) throw ConfigError("config key '" + key + "' has the wrong type");
    if (slot.is_object()) {
      merge_config(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

void set_config_value(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json overlay = value;
  std::string rest = path;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
    parts.push_back(rest.substr(0, pos));
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) overlay = json{{*it, overlay}};
  merge_config(cfg, overlay);
}

RunConfig parse_config(const json& doc) {
  json full = default_config_json();
  merge_config(full, doc);
  RunConfig c;
  try {
    c.seed = full["seed"].get<std::uint64_t>();
    const json& s = full["synth"];
    c.synth.n_classes = s["n_classes"].get<int>();
    c.synth.shots = s["shots"].get<int>();
    c.synth.n_test_normal = s["n_test_normal"].get<int>();
    c.synth.n_test_anomaly = s["n_test_anomaly"].get<int>();
    c.synth.noise_sigma = s["noise_sigma"].get<double>();
    c.synth.anomaly_strength = s["anomaly_strength"].get<double>();
    c.synth.anomaly_patch_count = s["anomaly_patch_count"].get<int>();
    c.synth.dim = s["dim"].get<int>();
    c.synth.layers = s["layers"].get<int>();
    c.synth.grid_h = s["grid_h"].get<int>();
    c.synth.grid_w = s["grid_w"].get<int>();
    c.synth.seed = c.seed;

    const json& t = full["train"];
    c.train.epochs = t["epochs"].get<int>();
    c.train.batch_size = t["batch_size"].get<int>();
    c.train.lr = t["lr"].get<double>();
    c.train.weight_decay = t["weight_decay"].get<double>();
    c.train.adapter_lr = t["adapter_lr"].get<double>();
    c.train.loss_weights.abf = t["loss_weights"]["abf"].get<double>();
    c.train.loss_weights.psg = t["loss_weights"]["psg"].get<double>();
    c.train.loss_weights.seg = t["loss_weights"]["seg"].get<double>();
    c.train.seed = c.seed;

    const json& a = full["attack"];
    c.train.attack.steps = a["steps"].get<int>();
    c.train.attack.alpha = a["alpha"].get<double>();
    c.train.attack.epsilon = a["epsilon"].get<double>();
    c.train.attack.beta = a["beta"].get<double>();
    c.train.attack.tau = a["tau"].get<double>();
    c.train.attack.init_noise_scale = a["init_noise_scale"].get<double>();
    c.train.attack.use_balance = a["use_balance"].get<bool>();

    const json& m = full["model"];
    json dcf = m;
    dcf.erase("adapter");
    dcf["dim"] = c.synth.dim;
    c.train.dcf = DcfConfig::from_json(dcf);
    c.train.adapter.rank = m["adapter"]["rank"].get<int>();
    c.train.adapter.alpha = m["adapter"]["alpha"].get<double>();
    c.train.adapter.dropout = m["adapter"]["dropout"].get<double>();

    const json& i = full["infer"];
    c.infer.text_weight = i["text_weight"].get<double>();
    c.infer.vis_weight = i["vis_weight"].get<double>();
    c.infer.shrinkage = i["shrinkage"].get<double>();
    c.infer.tau = i["tau"].get<double>();

    c.eval.fpr_limit = full["eval"]["fpr_limit"].get<double>();
    c.eval.n_thresholds = full["eval"]["n_thresholds"].get<int>();

    const json& p = full["paths"];
    c.out = p["out"].get<std::string>();
    c.bundle = p["bundle"].get<std::string>();
    c.checkpoint = p["checkpoint"].get<std::string>();
    c.scores = p["scores"].get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const InvalidParameter& e) {
    throw ConfigError(e.what());
  }

  try {
    c.synth.validate();
    c.train.validate();
    c.infer.validate();
  } catch (const InvalidParameter& e) {
    throw ConfigError(e.what());
  }
  if (!(c.eval.fpr_limit > 0.0 && c.eval.fpr_limit <= 1.0)) throw ConfigError("eval.fpr_limit must lie in (0, 1]");
  if (c.eval.n_thresholds < 2) throw ConfigError("eval.n_thresholds must be >= 2");
  return c;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const json& resolved) {
  json canon = resolved;
  if (canon.contains("paths")) canon["paths"].erase("out");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canon.dump())));
  return buf;
}

}  // namespace abound
