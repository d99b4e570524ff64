#include "abound/cli.hpp"

#include "abound/binio.hpp"
#include "abound/config.hpp"
#include "abound/errors.hpp"
#include "abound/infer.hpp"
#include "abound/metrics.hpp"
#include "abound/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace abound {

namespace fs = std::filesystem;
using json = nlohmann::json;
using binio::read_file;
using binio::write_file;
using binio::write_text;
using Bytes = std::vector<std::uint8_t>;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, bundle, checkpoint, scores;
  std::optional<int> epochs;
  int jobs = 1;
  bool pgm = false;
};

void add_options(CLI::App& sub, Options& o) {
  sub.add_option("--config", o.config, "JSON run configuration");
  sub.add_option("--set", o.sets, "Override a config value, e.g. --set attack.beta=0");
  sub.add_option("--seed", o.seed, "Global seed (overrides config and ABOUND_SEED)");
  sub.add_option("--out", o.out, "Output root; runs land in <out>/<subcommand>-<hash>");
  sub.add_option("--bundle", o.bundle, "Embedding bundle directory");
  sub.add_option("--checkpoint", o.checkpoint, "Model checkpoint file");
  sub.add_option("--scores", o.scores, "scores.jsonl or the score run directory");
  sub.add_option("--epochs", o.epochs, "Training epochs");
  sub.add_option("--jobs", o.jobs, "Worker threads for score/eval")->check(CLI::PositiveNumber);
  sub.add_flag("--pgm", o.pgm, "Also write ASCII PGM renderings of score maps");
}

json load_json_file(const fs::path& p) {
  if (!fs::exists(p)) throw FileNotFound(p.string());
  std::ifstream in(p);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(p.string() + " is not valid JSON");
  return j;
}

json resolve(const Options& o) {
  json doc = default_config_json();
  if (!o.config.empty()) merge_config(doc, load_json_file(o.config));
  if (const char* env = std::getenv("ABOUND_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ConfigError("ABOUND_SEED must be an unsigned integer");
    doc["seed"] = static_cast<std::uint64_t>(v);
  }
  for (const std::string& s : o.sets) set_config_value(doc, s);
  if (o.seed) doc["seed"] = *o.seed;
  if (o.epochs) doc["train"]["epochs"] = *o.epochs;
  if (o.out) doc["paths"]["out"] = *o.out;
  if (o.bundle) doc["paths"]["bundle"] = *o.bundle;
  if (o.checkpoint) doc["paths"]["checkpoint"] = *o.checkpoint;
  if (o.scores) doc["paths"]["scores"] = *o.scores;
  return to_json(parse_config(doc));
}

const std::string& require_path(const std::string& value, const char* key) {
  if (value.empty()) throw ConfigError(std::string("paths.") + key + " is required");
  if (!fs::exists(value)) throw FileNotFound(value);
  return value;
}

std::string sample_name(const std::string& cls, const char* split, std::size_t i) {
  std::ostringstream s;
  s << cls << '_' << split << '_' << i;
  return s.str();
}

void write_pgm(const fs::path& path, const Vector& map, int h, int w) {
  const double lo = map.minCoeff(), hi = map.maxCoeff();
  std::ostringstream s;
  s << "P2\n" << w << ' ' << h << "\n255\n";
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double v = hi > lo ? (map[r * w + c] - lo) / (hi - lo) : 0.0;
      s << static_cast<int>(std::lround(v * 255.0)) << (c + 1 < w ? ' ' : '\n');
    }
  }
  write_text(path, s.str());
}

Bytes f32_bytes(const Vector& v) {
  Bytes out;
  binio::append_f32(out, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
  return out;
}

// Runs fn(i) for i in [0, n) on `jobs` threads; results are index-addressed.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

void cmd_synth(const RunConfig& cfg, const fs::path& run) {
  save_bundle(synthesize_dataset(cfg.synth), run / "bundle");
}

void cmd_train(RunConfig cfg, const fs::path& run) {
  const EmbeddingBundle bundle = load_bundle(require_path(cfg.bundle, "bundle"));
  cfg.train.dcf.dim = bundle.dim;
  Model model = make_model(bundle, cfg.train);
  TrainReport report = fit(bundle, cfg.train, model);
  // Only path-independent settings go into the checkpoint so it is reproducible anywhere.
  save_model(run / "checkpoint.ckpt", model, {{"seed", cfg.seed}, {"train", to_json(cfg.train)}});
  report.checkpoint = "checkpoint.ckpt";
  write_text(run / "report.json", report.to_json().dump(2) + "\n");
}

void cmd_forge(const RunConfig& cfg, const fs::path& run) {
  const EmbeddingBundle bundle = load_bundle(require_path(cfg.bundle, "bundle"));
  const Model model = load_model(require_path(cfg.checkpoint, "checkpoint"));
  const std::vector<ClassFence> fences = forge_class_fences(model, bundle, cfg.train.attack, cfg.seed);
  fs::create_directories(run / "fences");
  json diag = json::array();
  for (const ClassFence& f : fences) {
    Bytes bytes;
    for (const FeatureVector& v : f.fence.forged) {
      const Bytes row = f32_bytes(v);
      bytes.insert(bytes.end(), row.begin(), row.end());
    }
    const std::string file = "fences/" + f.name + ".f32";
    write_file(run / file, bytes);
    json entry = to_json(f.fence);
    entry["class"] = f.name;
    entry["entropy"] = f.entropy;
    entry["file"] = file;
    entry["shape"] = {f.fence.forged.size(), bundle.dim};
    diag.push_back(std::move(entry));
  }
  write_text(run / "diagnostics.json", json{{"classes", diag}}.dump(2) + "\n");
}

struct ScoreJob {
  std::size_t class_id;
  const char* split;
  std::size_t index;
  const Sample* sample;
};

void cmd_score(const RunConfig& cfg, const fs::path& run, int jobs, bool pgm) {
  const EmbeddingBundle bundle = load_bundle(require_path(cfg.bundle, "bundle"));
  const Model model = load_model(require_path(cfg.checkpoint, "checkpoint"));
  if (model.dcf.class_names().size() != bundle.classes.size()) {
    throw FormatError("checkpoint classes do not match the bundle");
  }
  const MemoryBanks banks = build_banks(bundle, model, cfg.infer);

  std::vector<ScoreJob> work;
  for (std::size_t c = 0; c < bundle.classes.size(); ++c) {
    const ClassRecord& rec = bundle.classes[c];
    for (std::size_t i = 0; i < rec.test_normals.size(); ++i) work.push_back({c, "test_normal", i, &rec.test_normals[i]});
    for (std::size_t i = 0; i < rec.test_anomalies.size(); ++i) {
      work.push_back({c, "test_anomaly", i, &rec.test_anomalies[i]});
    }
  }
  std::vector<AnomalyMap> maps(work.size());
  parallel_for(work.size(), jobs, [&](std::size_t i) { maps[i] = score_image(*work[i].sample, banks, model, cfg.infer); });

  fs::create_directories(run / "maps");
  std::string lines;
  for (std::size_t i = 0; i < work.size(); ++i) {
    const ScoreJob& job = work[i];
    const std::string& cls = bundle.classes[job.class_id].name;
    const std::string name = sample_name(cls, job.split, job.index);
    const std::string map_file = "maps/" + name + ".f32";
    write_file(run / map_file, f32_bytes(maps[i].combined));
    json mask_file = nullptr;
    if (job.sample->mask) {
      const Mask& m = *job.sample->mask;
      mask_file = "maps/" + name + ".mask.u8";
      write_file(run / mask_file.get<std::string>(), m);
    }
    if (pgm) write_pgm(run / ("maps/" + name + ".pgm"), maps[i].combined, bundle.grid_h, bundle.grid_w);
    const json line{{"sample", name},
                    {"class_true", cls},
                    {"class_pred", bundle.classes[static_cast<std::size_t>(maps[i].class_pred)].name},
                    {"label", std::string(job.split) == "test_anomaly" ? 1 : 0},
                    {"S", maps[i].score},
                    {"grid", {bundle.grid_h, bundle.grid_w}},
                    {"map", map_file},
                    {"mask", mask_file}};
    lines += line.dump() + "\n";
  }
  write_text(run / "scores.jsonl", lines);
}

struct ScoredSample {
  std::string class_true, class_pred;
  std::uint8_t label = 0;
  double score = 0.0;
  Vector map;
  Mask mask;
};

Vector read_map(const fs::path& p, std::size_t cells) {
  const Bytes bytes = read_file(p);
  if (bytes.size() != cells * 4) throw FormatError(p.string() + ": expected " + std::to_string(cells) + " float32 values");
  const std::vector<double> values = binio::decode_f32(bytes);
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

json evaluate(const std::vector<ScoredSample>& set, int h, int w, const EvalConfig& cfg) {
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  std::vector<Vector> maps;
  std::vector<Mask> masks;
  for (const ScoredSample& x : set) {
    s.push_back(x.score);
    y.push_back(x.label);
    maps.push_back(x.map);
    masks.push_back(x.mask);
  }
  auto guarded = [](auto fn) -> json {
    try {
      return fn();
    } catch (const UndefinedMetric&) {
      return nullptr;
    }
  };
  return json{{"image", {{"auroc", guarded([&] { return auroc(s, y); })}, {"aupr", guarded([&] { return aupr(s, y); })}}},
              {"pixel",
               {{"auroc", guarded([&] { return pixel_auroc(maps, masks); })},
                {"pro", guarded([&] { return pro(maps, masks, h, w, cfg.fpr_limit, cfg.n_thresholds); })}}}};
}

void cmd_eval(const RunConfig& cfg, const fs::path& run, int jobs) {
  fs::path scores = require_path(cfg.scores, "scores");
  if (fs::is_directory(scores)) scores /= "scores.jsonl";
  if (!fs::exists(scores)) throw FileNotFound(scores.string());
  const fs::path base = scores.parent_path();

  std::vector<json> lines;
  {
    const Bytes raw = read_file(scores);
    std::istringstream in(std::string(raw.begin(), raw.end()));
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) throw FormatError(scores.string() + ": malformed line");
      lines.push_back(std::move(j));
    }
  }
  if (lines.empty()) throw EmptyDataset(scores.string() + " has no samples");

  int h = 0, w = 0;
  std::vector<ScoredSample> set(lines.size());
  try {
    h = lines.front().at("grid").at(0).get<int>();
    w = lines.front().at("grid").at(1).get<int>();
    const std::size_t cells = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    parallel_for(lines.size(), jobs, [&](std::size_t i) {
      const json& j = lines[i];
      ScoredSample& x = set[i];
      x.class_true = j.at("class_true").get<std::string>();
      x.class_pred = j.at("class_pred").get<std::string>();
      x.label = static_cast<std::uint8_t>(j.at("label").get<int>() != 0);
      x.score = j.at("S").get<double>();
      x.map = read_map(base / j.at("map").get<std::string>(), cells);
      if (j.at("mask").is_null()) {
        x.mask.assign(cells, 0);
      } else {
        const Bytes m = read_file(base / j.at("mask").get<std::string>());
        if (m.size() != cells) throw FormatError(j.at("mask").get<std::string>() + ": wrong mask size");
        x.mask = m;
      }
    });
  } catch (const json::exception& e) {
    throw FormatError(scores.string() + ": " + e.what());
  }

  json out = evaluate(set, h, w, cfg.eval);
  std::vector<std::string> classes;
  std::size_t correct = 0;
  for (const ScoredSample& x : set) {
    if (std::find(classes.begin(), classes.end(), x.class_true) == classes.end()) classes.push_back(x.class_true);
    correct += x.class_true == x.class_pred ? 1 : 0;
  }
  json per_class = json::object();
  for (const std::string& c : classes) {
    std::vector<ScoredSample> subset;
    std::copy_if(set.begin(), set.end(), std::back_inserter(subset), [&](const ScoredSample& x) { return x.class_true == c; });
    per_class[c] = evaluate(subset, h, w, cfg.eval);
  }
  out["per_class"] = per_class;
  out["class_accuracy"] = static_cast<double>(correct) / static_cast<double>(set.size());
  out["n_samples"] = set.size();
  write_text(run / "metrics.json", out.dump(2) + "\n");
}

int dispatch(const std::string& sub, const Options& o) {
  const json resolved = resolve(o);
  const RunConfig cfg = parse_config(resolved);
  const fs::path run = fs::path(cfg.out) / (sub + "-" + config_hash(resolved));
  fs::create_directories(run);
  write_text(run / "config.json", resolved.dump(2) + "\n");
  if (sub == "synth") cmd_synth(cfg, run);
  else if (sub == "train") cmd_train(cfg, run);
  else if (sub == "forge") cmd_forge(cfg, run);
  else if (sub == "score") cmd_score(cfg, run, o.jobs, o.pgm);
  else cmd_eval(cfg, run, o.jobs);
  std::cout << run.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  CLI::App app{"abound: few-shot anomaly detection toolchain on embedding bundles"};
  app.require_subcommand(1);
  Options opts;
  std::string chosen;
  for (const char* name : {"synth", "train", "forge", "score", "eval"}) {
    static const std::map<std::string, std::string> help{
        {"synth", "Write a synthetic embedding bundle"},
        {"train", "Train DCF prompts and the adapter; writes checkpoint and report"},
        {"forge", "Dump fence features forged against a trained model"},
        {"score", "Score test samples; writes scores.jsonl and maps"},
        {"eval", "Compute image/pixel metrics from a score run"}};
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    add_options(*sub, opts);
    sub->callback([&chosen, name] { chosen = name; });
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitBadConfig;
  }

  try {
    return dispatch(chosen, opts);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadConfig;
  } catch (const FileNotFound& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMissingFile;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int run_command(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_command(args);
}

}  // namespace abound
