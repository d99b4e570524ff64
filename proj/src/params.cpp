#include "abound/params.hpp"

#include "abound/binio.hpp"
#include "abound/errors.hpp"

#include <cstring>

namespace abound {

using json = nlohmann::json;

namespace {
constexpr char kMagic[8] = {'A', 'B', 'N', 'D', 'C', 'K', 'P', 'T'};
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace

int ParamStore::add(std::string name, Matrix init) {
  if (lookup_.count(name)) throw InvalidParameter("duplicate parameter " + name);
  lookup_[name] = values_.size();
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return static_cast<int>(values_.size()) - 1;
}

std::size_t ParamStore::index(const std::string& name) const {
  const auto it = lookup_.find(name);
  if (it == lookup_.end()) throw InvalidParameter("unknown parameter " + name);
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const Matrix& m : values_) n += static_cast<std::size_t>(m.size());
  return n;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const Matrix& a = values_[i];
    const Matrix& b = other.values_[i];
    if (a.rows() != b.rows() || a.cols() != b.cols() || !(a.size() == 0 || a == b)) return false;
  }
  return true;
}

BoundParams bind(ad::Tape& tape, const ParamStore& store, bool trainable) {
  BoundParams b;
  b.vars.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    b.vars.push_back(trainable ? tape.leaf(store.value(i)) : tape.constant(store.value(i)));
  }
  return b;
}

std::vector<Matrix> gradients(const BoundParams& bound) {
  std::vector<Matrix> out;
  out.reserve(bound.vars.size());
  for (const ad::Var& v : bound.vars) {
    if (v.requires_grad() && v.grad().size() == v.value().size()) {
      out.push_back(v.grad());
    } else {
      out.push_back(Matrix::Zero(v.rows(), v.cols()));
    }
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const json& meta,
                     const std::vector<std::pair<std::string, const ParamStore*>>& stores) {
  json header;
  header["format"] = kCheckpointFormat;
  header["meta"] = meta;
  header["groups"] = json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& [group, store] : stores) {
    json g;
    g["name"] = group;
    g["params"] = json::array();
    for (std::size_t i = 0; i < store->size(); ++i) {
      const Matrix& m = store->value(i);
      g["params"].push_back({{"name", store->name(i)}, {"shape", {m.rows(), m.cols()}}});
      const RowMajor rm = m;
      binio::append_f32(payload, std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())));
    }
    header["groups"].push_back(std::move(g));
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  binio::append_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  binio::write_file(path, out);
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
  const auto bytes = binio::read_file(path);
  const std::string fname = path.filename().string();
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError(fname + ": not a checkpoint");
  const std::uint64_t hlen = binio::decode_u64(std::span<const std::uint8_t>(bytes).subspan(8, 8));
  if (16 + hlen > bytes.size()) throw FormatError(fname + ": truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw FormatError(fname + ": " + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat) throw VersionError(fname + ": unsupported checkpoint format");

  CheckpointData data;
  data.meta = header.at("meta");
  std::size_t offset = 16 + hlen;
  for (const json& g : header.at("groups")) {
    std::vector<std::pair<std::string, Matrix>> params;
    for (const json& p : g.at("params")) {
      const auto rows = p.at("shape").at(0).get<Eigen::Index>();
      const auto cols = p.at("shape").at(1).get<Eigen::Index>();
      const std::size_t n = static_cast<std::size_t>(rows * cols) * 4;
      if (offset + n > bytes.size()) throw FormatError(fname + ": truncated payload");
      const auto values = binio::decode_f32(std::span<const std::uint8_t>(bytes).subspan(offset, n));
      offset += n;
      params.emplace_back(p.at("name").get<std::string>(), Eigen::Map<const RowMajor>(values.data(), rows, cols));
    }
    data.groups.emplace_back(g.at("name").get<std::string>(), std::move(params));
  }
  if (offset != bytes.size()) throw FormatError(fname + ": trailing bytes after payload");
  return data;
}

void restore(ParamStore& store, const std::vector<std::pair<std::string, Matrix>>& group) {
  if (group.size() != store.size()) throw FormatError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (group[i].first != store.name(i)) throw FormatError("checkpoint parameter order mismatch at " + group[i].first);
    const Matrix& v = group[i].second;
    if (v.rows() != store.value(i).rows() || v.cols() != store.value(i).cols()) {
      throw FormatError("checkpoint shape mismatch for " + group[i].first);
    }
    store.value(i) = v;
  }
}

}  // namespace abound
