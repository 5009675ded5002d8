#include "ssmil/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "ssmil/error.hpp"

namespace ssmil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest";
constexpr const char* kParams = "params.bin";

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw IoError("checkpoint: malformed width list '" + s + "'");
    }
  }
  return out;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

TensorRecord to_record(const std::string& name, std::vector<std::size_t> shape, std::span<const double> values) {
  TensorRecord t{name, std::move(shape), {}};
  t.values.reserve(values.size());
  for (double v : values) t.values.push_back(static_cast<float>(v));
  return t;
}

void fill_from(const TensorRecord& t, std::span<double> dst, const std::string& name) {
  if (t.values.size() != dst.size()) throw ShapeMismatch("checkpoint: tensor '" + name + "' has the wrong size");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(t.values[i]);
}

const std::string& meta_at(const Checkpoint& c, const std::string& key) {
  auto it = c.meta.find(key);
  if (it == c.meta.end()) throw IoError("checkpoint: missing metadata '" + key + "'");
  return it->second;
}

Mlp mlp_from(const Checkpoint& c, const std::string& prefix) {
  MlpArch arch{split_sizes(meta_at(c, prefix + ".widths")), activation_from_string(meta_at(c, prefix + ".hidden")),
               activation_from_string(meta_at(c, prefix + ".output"))};
  Mlp net = zeros_like(init_mlp(arch, 0));
  for (auto& p : params_of(net, prefix)) fill_from(c.tensor(p.name), p.values, p.name);
  return net;
}

void describe_mlp(const Mlp& net, const std::string& prefix, Checkpoint& c) {
  const MlpArch arch = net.arch();
  c.meta[prefix + ".widths"] = join(arch.widths);
  c.meta[prefix + ".hidden"] = std::string(to_string(arch.hidden));
  c.meta[prefix + ".output"] = std::string(to_string(arch.output));
  for (const auto& p : params_of(net, prefix)) c.tensors.push_back(to_record(p.name, p.shape, p.values));
}

}  // namespace

const TensorRecord& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw IoError("checkpoint: missing tensor '" + name + "'");
}

void write_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json j;
  j["format"] = "ssmil-checkpoint";
  j["version"] = 1;
  j["kind"] = ckpt.kind;
  j["dtype"] = "float32";
  j["byte_order"] = "little";
  j["meta"] = ckpt.meta;
  j["tensors"] = json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (element_count(t.shape) != t.values.size()) throw ShapeMismatch("checkpoint: tensor '" + t.name + "' shape/size");
    j["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size();
  }
  std::ofstream mf(dir / kManifest);
  if (!mf) throw IoError("cannot write checkpoint manifest in " + dir.string());
  mf << j.dump(1) << "\n";

  std::vector<char> bytes(offset * 4);
  std::size_t pos = 0;
  for (const auto& t : ckpt.tensors)
    for (float v : t.values) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
      std::memcpy(bytes.data() + pos, &u, 4);
      pos += 4;
    }
  std::ofstream bf(dir / kParams, std::ios::binary);
  if (!bf) throw IoError("cannot write checkpoint tensors in " + dir.string());
  bf.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint read_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / kManifest);
  if (!mf) throw IoError("missing checkpoint manifest in " + dir.string());
  const auto bytes = read_bytes(dir / kParams);
  Checkpoint c;
  try {
    json j;
    mf >> j;
    if (j.at("format") != "ssmil-checkpoint" || j.at("version") != 1) throw IoError("unsupported checkpoint format");
    c.kind = j.at("kind").get<std::string>();
    c.meta = j.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& t : j.at("tensors")) {
      TensorRecord r{t.at("name").get<std::string>(), t.at("shape").get<std::vector<std::size_t>>(), {}};
      const auto offset = t.at("offset").get<std::size_t>();
      const std::size_t n = element_count(r.shape);
      if ((offset + n) * 4 > bytes.size()) throw IoError("checkpoint: tensor '" + r.name + "' exceeds the data file");
      r.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t u;
        std::memcpy(&u, bytes.data() + (offset + i) * 4, 4);
        if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
        std::memcpy(&r.values[i], &u, 4);
      }
      c.tensors.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  return c;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h) {
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view text, std::uint64_t h) {
  return fnv1a({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}, h);
}

std::uint64_t file_hash(const fs::path& path) { return fnv1a(read_bytes(path)); }

std::uint64_t checkpoint_hash(const fs::path& dir) {
  return fnv1a(read_bytes(dir / kParams), fnv1a(read_bytes(dir / kManifest)));
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

Checkpoint encoder_checkpoint(const Mlp& encoder, std::map<std::string, std::string> meta) {
  Checkpoint c{"encoder", std::move(meta), {}};
  describe_mlp(encoder, "encoder", c);
  return c;
}

Mlp encoder_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "encoder") throw IoError("checkpoint is a '" + ckpt.kind + "', expected an encoder");
  return mlp_from(ckpt, "encoder");
}

Checkpoint mil_checkpoint(const MilModel& model, std::map<std::string, std::string> meta) {
  Checkpoint c{"mil", std::move(meta), {}};
  describe_mlp(model.reducer, "reducer", c);
  describe_mlp(model.attention, "attention", c);
  c.tensors.push_back(to_record("classifier.weight", {model.classifier_weight.rows(), model.classifier_weight.cols()},
                                model.classifier_weight.values()));
  c.tensors.push_back(to_record("classifier.bias", {model.classifier_bias.size()}, model.classifier_bias.values()));
  c.tensors.push_back(to_record("scaler.mean", {model.scaler.mean.size()}, model.scaler.mean.values()));
  c.tensors.push_back(to_record("scaler.inv_std", {model.scaler.inv_std.size()}, model.scaler.inv_std.values()));
  return c;
}

MilModel mil_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "mil") throw IoError("checkpoint is a '" + ckpt.kind + "', expected a MIL model");
  MilModel m;
  m.reducer = mlp_from(ckpt, "reducer");
  m.attention = mlp_from(ckpt, "attention");
  const auto& w = ckpt.tensor("classifier.weight");
  if (w.shape.size() != 2) throw IoError("checkpoint: classifier.weight is not a matrix");
  m.classifier_weight = Matrix(w.shape[0], w.shape[1]);
  fill_from(w, m.classifier_weight.values(), w.name);
  m.classifier_bias = Vector(w.shape[0]);
  fill_from(ckpt.tensor("classifier.bias"), m.classifier_bias.values(), "classifier.bias");
  const std::size_t k = m.reducer.input_dim();
  m.scaler = FeatureScaler::identity(k);
  fill_from(ckpt.tensor("scaler.mean"), m.scaler.mean.values(), "scaler.mean");
  fill_from(ckpt.tensor("scaler.inv_std"), m.scaler.inv_std.values(), "scaler.inv_std");
  return m;
}

Mlp round_to_f32(const Mlp& net) {
  Mlp out = net;
  for (auto& p : params_of(out, "n"))
    for (double& v : p.values) v = static_cast<double>(static_cast<float>(v));
  return out;
}

}  // namespace ssmil
