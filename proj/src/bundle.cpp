#include "abound/bundle.hpp"

#include "abound/binio.hpp"
#include "abound/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

namespace abound {

using json = nlohmann::json;

namespace {

bool same_matrix(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
}

FeatureVector random_unit(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (;;) {
    FeatureVector v(dim);
    for (int i = 0; i < dim; ++i) v[i] = gauss(rng);
    if (v.norm() > 1e-8) return v.normalized();
  }
}

FeatureVector noisy(const FeatureVector& center, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  FeatureVector v = center;
  if (sigma > 0.0) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += sigma * gauss(rng);
  }
  return l2_normalize(v);
}

FeatureVector layer0_global(const Sample& s) {
  return l2_normalize(s.patches.front().colwise().mean().transpose());
}

Sample normal_sample(const FeatureVector& proto, const SynthConfig& cfg, std::mt19937_64& rng) {
  Sample s;
  s.global = noisy(proto, cfg.noise_sigma, rng);
  const int cells = cfg.grid_h * cfg.grid_w;
  for (int l = 0; l < cfg.layers; ++l) {
    Matrix m(cells, cfg.dim);
    for (int c = 0; c < cells; ++c) m.row(c) = noisy(proto, cfg.noise_sigma, rng).transpose();
    s.patches.push_back(std::move(m));
  }
  return s;
}

void quantize(Sample& s) {
  round_to_float(s.global);
  for (Matrix& m : s.patches) round_to_float(m);
}

void write_split(const std::vector<Sample>& samples, const EmbeddingBundle& b, const std::filesystem::path& dir,
                 const std::string& stem, bool with_masks, json& entry) {
  std::vector<std::uint8_t> globals, patches, masks;
  for (const Sample& s : samples) {
    binio::append_f32(globals, std::span<const double>(s.global.data(), static_cast<std::size_t>(s.global.size())));
    for (const Matrix& layer : s.patches) {
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = layer;
      binio::append_f32(patches, std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())));
    }
    if (with_masks) {
      const Mask m = s.mask.value_or(Mask(static_cast<std::size_t>(b.cells()), 0));
      masks.insert(masks.end(), m.begin(), m.end());
    }
  }
  entry["count"] = samples.size();
  entry["globals"] = stem + "_globals.f32";
  entry["patches"] = stem + "_patches.f32";
  binio::write_file(dir / (stem + "_globals.f32"), globals);
  binio::write_file(dir / (stem + "_patches.f32"), patches);
  if (with_masks) {
    entry["masks"] = stem + "_masks.u8";
    binio::write_file(dir / (stem + "_masks.u8"), masks);
  } else {
    entry["masks"] = nullptr;
  }
}

std::vector<std::uint8_t> read_sized(const std::filesystem::path& path, std::size_t expected) {
  if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
  auto bytes = binio::read_file(path);
  if (bytes.size() != expected) {
    throw FormatError(path.filename().string() + ": expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  return bytes;
}

std::vector<Sample> read_split(const json& entry, const EmbeddingBundle& b, const std::filesystem::path& dir) {
  const std::size_t n = entry.at("count").get<std::size_t>();
  const std::size_t d = static_cast<std::size_t>(b.dim);
  const std::size_t cells = static_cast<std::size_t>(b.cells());
  const std::size_t layers = static_cast<std::size_t>(b.layers);

  const auto gbytes = read_sized(dir / entry.at("globals").get<std::string>(), n * d * 4);
  const auto pbytes = read_sized(dir / entry.at("patches").get<std::string>(), n * layers * cells * d * 4);
  const std::vector<double> g = binio::decode_f32(gbytes);
  const std::vector<double> p = binio::decode_f32(pbytes);
  std::vector<std::uint8_t> mbytes;
  const bool has_masks = entry.contains("masks") && !entry.at("masks").is_null();
  if (has_masks) mbytes = read_sized(dir / entry.at("masks").get<std::string>(), n * cells);

  std::vector<Sample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample& s = out[i];
    s.global = Eigen::Map<const Vector>(g.data() + i * d, static_cast<Eigen::Index>(d));
    for (std::size_t l = 0; l < layers; ++l) {
      const double* base = p.data() + ((i * layers + l) * cells) * d;
      s.patches.push_back(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          base, static_cast<Eigen::Index>(cells), static_cast<Eigen::Index>(d)));
    }
    if (has_masks) {
      Mask m(mbytes.begin() + static_cast<std::ptrdiff_t>(i * cells),
             mbytes.begin() + static_cast<std::ptrdiff_t>((i + 1) * cells));
      for (const auto v : m) {
        if (v > 1) throw FormatError(entry.at("masks").get<std::string>() + ": mask values must be 0 or 1");
      }
      s.mask = std::move(m);
    }
  }
  return out;
}

constexpr const char* kSplitNames[3] = {"train", "test_normal", "test_anomaly"};

}  // namespace

bool operator==(const Sample& a, const Sample& b) {
  if (!same_matrix(a.global, b.global) || a.patches.size() != b.patches.size() || a.mask != b.mask) return false;
  for (std::size_t l = 0; l < a.patches.size(); ++l) {
    if (!same_matrix(a.patches[l], b.patches[l])) return false;
  }
  return true;
}

bool operator==(const ClassRecord& a, const ClassRecord& b) {
  return a.name == b.name && a.train_normals == b.train_normals && a.test_normals == b.test_normals &&
         a.test_anomalies == b.test_anomalies;
}

bool operator==(const EmbeddingBundle& a, const EmbeddingBundle& b) {
  return a.dim == b.dim && a.layers == b.layers && a.grid_h == b.grid_h && a.grid_w == b.grid_w &&
         a.seed == b.seed && a.classes == b.classes;
}

int EmbeddingBundle::class_index(const std::string& name) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

void EmbeddingBundle::validate() const {
  if (dim < 1 || layers < 1 || grid_h < 1 || grid_w < 1) throw FormatError("bundle dimensions must be positive");
  std::set<std::string> names;
  for (const ClassRecord& c : classes) {
    if (!names.insert(c.name).second) throw FormatError("duplicate class name: " + c.name);
    auto check = [&](const std::vector<Sample>& split, bool need_mask) {
      for (const Sample& s : split) {
        if (s.global.size() != dim || static_cast<int>(s.patches.size()) != layers) {
          throw FormatError("class " + c.name + ": sample shape mismatch");
        }
        for (const Matrix& m : s.patches) {
          if (m.rows() != cells() || m.cols() != dim) throw FormatError("class " + c.name + ": patch grid mismatch");
        }
        if (need_mask && (!s.mask || static_cast<int>(s.mask->size()) != cells())) {
          throw FormatError("class " + c.name + ": anomaly without a mask");
        }
      }
    };
    check(c.train_normals, false);
    check(c.test_normals, false);
    check(c.test_anomalies, true);
  }
}

void SynthConfig::validate() const {
  if (n_classes < 1 || shots < 1 || n_test_normal < 1 || n_test_anomaly < 1 || anomaly_patch_count < 1) {
    throw InvalidParameter("synth counts must be >= 1");
  }
  if (dim < 2 || layers < 1 || grid_h < 1 || grid_w < 1) throw InvalidParameter("synth shape must be positive");
  if (noise_sigma < 0.0 || anomaly_strength < 0.0) throw InvalidParameter("noise_sigma and anomaly_strength must be >= 0");
}

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::mt19937_64 sample_stream(std::uint64_t seed, std::uint64_t index) {
  return std::mt19937_64(mix_seed(seed ^ index));
}

EmbeddingBundle synthesize_dataset(const SynthConfig& cfg, SyntheticTruth* truth) {
  cfg.validate();
  EmbeddingBundle b;
  b.dim = cfg.dim;
  b.layers = cfg.layers;
  b.grid_h = cfg.grid_h;
  b.grid_w = cfg.grid_w;
  b.seed = cfg.seed;

  // Prototypes pairwise >= 60 degrees apart, i.e. cosine <= 0.5.
  std::mt19937_64 class_rng(mix_seed(~cfg.seed));
  std::vector<FeatureVector> protos, defects;
  for (int k = 0; k < cfg.n_classes; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
      FeatureVector cand = random_unit(cfg.dim, class_rng);
      placed = std::all_of(protos.begin(), protos.end(), [&](const FeatureVector& p) { return cand.dot(p) <= 0.5; });
      if (placed) protos.push_back(cand);
    }
    if (!placed) {
      throw GenerationError("could not place " + std::to_string(cfg.n_classes) + " prototypes in dimension " +
                            std::to_string(cfg.dim));
    }
    FeatureVector d = random_unit(cfg.dim, class_rng);
    d -= d.dot(protos.back()) * protos.back();
    defects.push_back(l2_normalize(d));
  }

  const int side_h = (cfg.grid_h + 2) / 3;
  const int side_w = (cfg.grid_w + 2) / 3;
  std::uint64_t index = 0;
  for (int k = 0; k < cfg.n_classes; ++k) {
    ClassRecord rec;
    rec.name = "class_" + std::to_string(k);
    for (int i = 0; i < cfg.shots; ++i) {
      auto rng = sample_stream(cfg.seed, index++);
      rec.train_normals.push_back(normal_sample(protos[static_cast<std::size_t>(k)], cfg, rng));
    }
    for (int i = 0; i < cfg.n_test_normal; ++i) {
      auto rng = sample_stream(cfg.seed, index++);
      rec.test_normals.push_back(normal_sample(protos[static_cast<std::size_t>(k)], cfg, rng));
    }
    for (int i = 0; i < cfg.n_test_anomaly; ++i) {
      auto rng = sample_stream(cfg.seed, index++);
      Sample s = normal_sample(protos[static_cast<std::size_t>(k)], cfg, rng);
      Mask mask(static_cast<std::size_t>(cfg.grid_h * cfg.grid_w), 0);
      for (int r = 0; r < cfg.anomaly_patch_count; ++r) {
        const int h = std::uniform_int_distribution<int>(1, side_h)(rng);
        const int w = std::uniform_int_distribution<int>(1, side_w)(rng);
        const int top = std::uniform_int_distribution<int>(0, cfg.grid_h - h)(rng);
        const int left = std::uniform_int_distribution<int>(0, cfg.grid_w - w)(rng);
        for (int y = top; y < top + h; ++y) {
          for (int x = left; x < left + w; ++x) mask[static_cast<std::size_t>(y * cfg.grid_w + x)] = 1;
        }
      }
      if (cfg.anomaly_strength > 0.0) {
        const FeatureVector& d = defects[static_cast<std::size_t>(k)];
        for (std::size_t c = 0; c < mask.size(); ++c) {
          if (!mask[c]) continue;
          for (Matrix& layer : s.patches) {
            const Eigen::Index row = static_cast<Eigen::Index>(c);
            layer.row(row) = l2_normalize(layer.row(row).transpose() + cfg.anomaly_strength * d).transpose();
          }
        }
      } else {
        std::fill(mask.begin(), mask.end(), 0);
      }
      s.global = layer0_global(s);
      s.mask = std::move(mask);
      rec.test_anomalies.push_back(std::move(s));
    }
    for (auto* split : {&rec.train_normals, &rec.test_normals, &rec.test_anomalies}) {
      for (Sample& s : *split) quantize(s);
    }
    b.classes.push_back(std::move(rec));
  }
  if (truth) {
    truth->prototypes = protos;
    truth->defect_directions = defects;
  }
  return b;
}

Sample synthesize_anomaly_at(const Sample& s, int s_class, const Sample& donor, int donor_class, const Rect& rect,
                             int grid_h, int grid_w) {
  if (s_class == donor_class) throw InvalidDonor("donor must come from a different class");
  if (rect.height < 1 || rect.width < 1 || rect.top < 0 || rect.left < 0 || rect.top + rect.height > grid_h ||
      rect.left + rect.width > grid_w) {
    throw InvalidParameter("transplant rectangle outside the grid");
  }
  if (s.patches.size() != donor.patches.size()) throw FormatError("donor layer count differs");
  Sample out = s;
  Mask mask(static_cast<std::size_t>(grid_h * grid_w), 0);
  for (int y = rect.top; y < rect.top + rect.height; ++y) {
    for (int x = rect.left; x < rect.left + rect.width; ++x) {
      const int c = y * grid_w + x;
      mask[static_cast<std::size_t>(c)] = 1;
      for (std::size_t l = 0; l < out.patches.size(); ++l) out.patches[l].row(c) = donor.patches[l].row(c);
    }
  }
  out.mask = std::move(mask);
  out.global = layer0_global(out);
  return out;
}

Sample synthesize_anomaly(const Sample& s, int s_class, const Sample& donor, int donor_class, int grid_h, int grid_w,
                          std::mt19937_64& rng) {
  if (s_class == donor_class) throw InvalidDonor("donor must come from a different class");
  Rect r;
  r.height = std::uniform_int_distribution<int>(1, (grid_h + 1) / 2)(rng);
  r.width = std::uniform_int_distribution<int>(1, (grid_w + 1) / 2)(rng);
  r.top = std::uniform_int_distribution<int>(0, grid_h - r.height)(rng);
  r.left = std::uniform_int_distribution<int>(0, grid_w - r.width)(rng);
  return synthesize_anomaly_at(s, s_class, donor, donor_class, r, grid_h, grid_w);
}

void save_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& dir) {
  bundle.validate();
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["version"] = kBundleVersion;
  manifest["dim"] = bundle.dim;
  manifest["layers"] = bundle.layers;
  manifest["grid"] = {bundle.grid_h, bundle.grid_w};
  manifest["seed"] = bundle.seed;
  manifest["classes"] = json::array();
  for (std::size_t k = 0; k < bundle.classes.size(); ++k) {
    const ClassRecord& c = bundle.classes[k];
    json entry;
    entry["name"] = c.name;
    const std::string stem = "c" + std::to_string(k) + "_";
    write_split(c.train_normals, bundle, dir, stem + kSplitNames[0], false, entry["files"][kSplitNames[0]]);
    write_split(c.test_normals, bundle, dir, stem + kSplitNames[1], false, entry["files"][kSplitNames[1]]);
    write_split(c.test_anomalies, bundle, dir, stem + kSplitNames[2], true, entry["files"][kSplitNames[2]]);
    manifest["classes"].push_back(std::move(entry));
  }
  binio::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

EmbeddingBundle load_bundle(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw FileNotFound(manifest_path.string());
  const auto bytes = binio::read_file(manifest_path);
  json m;
  try {
    m = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  if (!m.contains("version") || m["version"] != kBundleVersion) {
    throw VersionError("manifest.json: unsupported version " + (m.contains("version") ? m["version"].dump() : "<none>"));
  }
  try {
    EmbeddingBundle b;
    b.dim = m.at("dim").get<int>();
    b.layers = m.at("layers").get<int>();
    b.grid_h = m.at("grid").at(0).get<int>();
    b.grid_w = m.at("grid").at(1).get<int>();
    b.seed = m.at("seed").get<std::uint64_t>();
    if (b.dim < 1 || b.layers < 1 || b.grid_h < 1 || b.grid_w < 1) throw FormatError("manifest.json: non-positive shape");
    for (const json& c : m.at("classes")) {
      ClassRecord rec;
      rec.name = c.at("name").get<std::string>();
      const json& files = c.at("files");
      rec.train_normals = read_split(files.at(kSplitNames[0]), b, dir);
      rec.test_normals = read_split(files.at(kSplitNames[1]), b, dir);
      rec.test_anomalies = read_split(files.at(kSplitNames[2]), b, dir);
      b.classes.push_back(std::move(rec));
    }
    b.validate();
    return b;
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
}

}  // namespace abound
