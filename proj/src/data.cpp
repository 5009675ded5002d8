#include "ssmil/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ssmil/error.hpp"

namespace ssmil {

namespace fs = std::filesystem;
using nlohmann::json;

void SyntheticConfig::validate() const {
  if (n_classes < 2) throw InvalidParameter("synthetic: need at least two classes");
  if (control_class >= n_classes) throw InvalidParameter("synthetic: control class out of range");
  if (n_bags_per_class == 0) throw InvalidParameter("synthetic: n_bags_per_class must be positive");
  if (min_instances == 0 || min_instances > max_instances) throw InvalidParameter("synthetic: empty instance range");
  if (!(planted_fraction > 0.0 && planted_fraction < 1.0)) throw InvalidParameter("synthetic: planted_fraction must be in (0,1)");
  if (feature_dim == 0) throw InvalidParameter("synthetic: feature_dim must be positive");
  if (!(class_signal_strength > 0.0)) throw InvalidParameter("synthetic: class_signal_strength must be positive");
  if (!(noise_scale > 0.0)) throw InvalidParameter("synthetic: noise_scale must be positive");
  if (random_orientation && grid_side(feature_dim) == 0)
    throw InvalidParameter("synthetic: random orientation needs a square feature_dim");
  if (random_translation && grid_side(feature_dim) == 0)
    throw InvalidParameter("synthetic: random translation needs a square feature_dim");
  if (pattern_frequencies > 0 && (!random_orientation || pattern_frequencies > grid_side(feature_dim)))
    throw InvalidParameter("synthetic: pattern_frequencies needs oriented patterns and at most the grid side");
}

std::size_t DatasetManifest::total_instances() const {
  std::size_t n = 0;
  for (const auto& b : bags) n += b.n_instances;
  return n;
}

void DatasetManifest::validate(std::size_t blob_rows) const {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& b : bags) {
    if (b.label >= n_classes) throw IoError("manifest: bag '" + b.bag_id + "' has label out of range");
    if (b.n_instances == 0) throw IoError("manifest: bag '" + b.bag_id + "' is empty");
    if (b.offset + b.n_instances > blob_rows) throw IoError("manifest: bag '" + b.bag_id + "' exceeds the blob");
    spans.emplace_back(b.offset, b.offset + b.n_instances);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second) throw IoError("manifest: overlapping bag offsets");
}

Matrix Dataset::bag_instances(std::size_t index) const {
  const auto& rec = manifest.bags.at(index);
  const std::size_t d = manifest.feature_dim;
  Matrix m(rec.n_instances, d);
  const float* src = blob.data() + rec.offset * d;
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(src[i]);
  return m;
}

Bag Dataset::bag(std::size_t index) const {
  const auto& rec = manifest.bags.at(index);
  Bag b{bag_instances(index), rec.label, rec.bag_id, {}};
  b.instance_ids.reserve(rec.n_instances);
  for (std::size_t i = 0; i < rec.n_instances; ++i) b.instance_ids.push_back(std::to_string(rec.offset + i));
  return b;
}

std::vector<std::size_t> Dataset::labels() const {
  std::vector<std::size_t> out;
  out.reserve(manifest.bags.size());
  for (const auto& b : manifest.bags) out.push_back(b.label);
  return out;
}

Matrix Dataset::pooled_instances(const std::vector<std::size_t>& bag_indices) const {
  std::size_t rows = 0;
  for (std::size_t b : bag_indices) rows += manifest.bags.at(b).n_instances;
  const std::size_t d = manifest.feature_dim;
  Matrix out(rows, d);
  std::size_t r = 0;
  for (std::size_t b : bag_indices) {
    const auto& rec = manifest.bags[b];
    const float* src = blob.data() + rec.offset * d;
    for (std::size_t i = 0; i < rec.n_instances * d; ++i) out.data()[r * d + i] = static_cast<double>(src[i]);
    r += rec.n_instances;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::size_t grid_side(std::size_t feature_dim) {
  const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(feature_dim))));
  return s * s == feature_dim ? s : 0;
}

void dihedral_transform(std::span<const double> in, std::span<double> out, std::size_t side, unsigned g) {
  if (in.size() != side * side || out.size() != in.size()) throw ShapeMismatch("dihedral_transform: not a square grid");
  const unsigned turns = g % 4;
  const bool mirror = (g % 8) >= 4;
  const std::size_t last = side - 1;
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      std::size_t rr = r, cc = c;
      for (unsigned t = 0; t < turns; ++t) {
        const std::size_t nr = cc;
        cc = last - rr;
        rr = nr;
      }
      if (mirror) cc = last - cc;
      out[rr * side + cc] = in[r * side + c];
    }
  }
}

void cyclic_shift(std::span<const double> in, std::span<double> out, std::size_t side, std::size_t dr, std::size_t dc) {
  if (in.size() != side * side || out.size() != in.size()) throw ShapeMismatch("cyclic_shift: not a square grid");
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) out[((r + dr) % side) * side + (c + dc) % side] = in[r * side + c];
}

namespace {

std::vector<double> gaussian_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

std::vector<std::vector<double>> orbit(const std::vector<double>& v, std::size_t side) {
  std::vector<std::vector<double>> out;
  for (unsigned g = 0; g < 8; ++g) {
    std::vector<double> t(v.size());
    dihedral_transform(v, t, side, g);
    out.push_back(std::move(t));
  }
  return out;
}

void project_out(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (const auto& b : basis) {
    const double p = dot(v, b);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b[i];
  }
}

// Adds the Gram-Schmidt residuals of `vs` to an orthonormal basis.
void extend_basis(std::vector<std::vector<double>>& basis, const std::vector<std::vector<double>>& vs) {
  for (auto v : vs) {
    project_out(v, basis);
    project_out(v, basis);
    const double n = norm(v);
    if (n < 1e-8) continue;
    for (double& x : v) x /= n;
    basis.push_back(std::move(v));
  }
}

// Patterns for the planted classes (mutually orthogonal, including all their
// orientations) followed by the background cell types.
std::vector<std::vector<double>> make_patterns(const SyntheticConfig& cfg, std::mt19937_64& rng) {
  const std::size_t d = cfg.feature_dim;
  const std::size_t side = cfg.random_orientation ? grid_side(d) : 0;
  const std::size_t n_planted = cfg.n_classes - 1;

  std::vector<std::vector<double>> invariant;  // pose-invariant subspace, removed from every pattern
  if (cfg.random_translation) {
    // Shifts act transitively on the cells, so only constants are invariant.
    invariant.push_back(std::vector<double>(d, 1.0 / std::sqrt(static_cast<double>(d))));
  } else if (side > 0) {
    for (std::size_t i = 0; i < d; ++i) {
      std::vector<double> e(d, 0.0);
      e[i] = 1.0;
      std::vector<double> avg(d, 0.0);
      for (const auto& t : orbit(e, side))
        for (std::size_t j = 0; j < d; ++j) avg[j] += t[j] / 8.0;
      extend_basis(invariant, {avg});
    }
  }

  // Separable cosine modes; their span is closed under the dihedral group.
  std::vector<std::vector<double>> modes;
  const std::size_t freqs = cfg.pattern_frequencies;
  for (std::size_t u = 0; u < freqs; ++u)
    for (std::size_t w = 0; w < freqs; ++w) {
      std::vector<double> m(d);
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c)
          m[r * side + c] = std::cos(std::numbers::pi * static_cast<double>(u) * (static_cast<double>(r) + 0.5) / static_cast<double>(side)) *
                            std::cos(std::numbers::pi * static_cast<double>(w) * (static_cast<double>(c) + 0.5) / static_cast<double>(side));
      const double n = norm(m);
      for (double& x : m) x /= n;
      modes.push_back(std::move(m));
    }

  // Band-limited patterns have too few dimensions for mutually orthogonal
  // orbits; they only drop the invariant part.
  std::vector<std::vector<double>> class_span = invariant;
  std::vector<std::vector<double>> patterns;
  for (std::size_t p = 0; p < n_planted + cfg.background_types; ++p) {
    const bool planted = p < n_planted;
    std::vector<double> v;
    for (int attempt = 0;; ++attempt) {
      if (modes.empty()) {
        v = gaussian_vector(d, rng);
      } else {
        const auto g = gaussian_vector(modes.size(), rng);
        v.assign(d, 0.0);
        for (std::size_t m = 0; m < modes.size(); ++m)
          for (std::size_t j = 0; j < d; ++j) v[j] += g[m] * modes[m][j];
      }
      project_out(v, class_span);
      project_out(v, class_span);
      if (norm(v) > 1e-6) break;
      if (attempt > 16) throw InvalidParameter("synthetic: feature_dim too small for the requested patterns");
    }
    const double n = norm(v);
    for (double& x : v) x *= cfg.class_signal_strength / n;
    if (planted && modes.empty() && !cfg.random_translation) extend_basis(class_span, side > 0 ? orbit(v, side) : std::vector<std::vector<double>>{v});
    patterns.push_back(std::move(v));
  }
  return patterns;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 pattern_rng(cfg.pattern_seed);
  const auto patterns = make_patterns(cfg, pattern_rng);
  std::mt19937_64 rng(cfg.seed);
  const std::size_t d = cfg.feature_dim;
  const std::size_t side = cfg.random_orientation ? grid_side(d) : 0;
  const std::size_t n_planted_types = cfg.n_classes - 1;

  SyntheticDataset out;
  auto& man = out.dataset.manifest;
  man.n_classes = cfg.n_classes;
  man.feature_dim = d;
  man.provenance = "synthetic";
  man.seed = cfg.seed;

  std::uniform_int_distribution<std::size_t> size_dist(cfg.min_instances, cfg.max_instances);
  std::uniform_int_distribution<std::size_t> bg_dist(0, cfg.background_types == 0 ? 0 : cfg.background_types - 1);
  std::uniform_int_distribution<unsigned> orient_dist(0, 7);
  const std::size_t grid = grid_side(d);
  std::uniform_int_distribution<std::size_t> shift_dist(0, grid == 0 ? 0 : grid - 1);
  std::vector<double> shifted(d);
  std::normal_distribution<double> noise(0.0, cfg.noise_scale);

  std::vector<double> x(d), oriented(d);
  std::size_t offset = 0;
  for (std::size_t label = 0; label < cfg.n_classes; ++label) {
    // planted pattern index for this class
    const std::size_t class_pattern = label < cfg.control_class ? label : label - 1;
    for (std::size_t b = 0; b < cfg.n_bags_per_class; ++b) {
      const std::size_t n = size_dist(rng);
      std::vector<std::uint8_t> planted(n, 0);
      if (label != cfg.control_class) {
        const auto k = static_cast<std::size_t>(std::lround(cfg.planted_fraction * static_cast<double>(n)));
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < k; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, n - 1);
          std::swap(idx[i], idx[pick(rng)]);
          planted[idx[i]] = 1;
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t type;
        const std::vector<double>* pattern = nullptr;
        if (planted[i]) {
          type = label;
          pattern = &patterns[class_pattern];
        } else {
          const std::size_t h = bg_dist(rng);
          type = cfg.n_classes + h;
          if (cfg.background_types > 0) pattern = &patterns[n_planted_types + h];
        }
        if (pattern) {
          if (side > 0) {
            dihedral_transform(*pattern, oriented, side, orient_dist(rng));
          } else {
            oriented = *pattern;
          }
        } else {
          std::fill(oriented.begin(), oriented.end(), 0.0);
        }
        if (cfg.random_translation) {
          const std::size_t dr = shift_dist(rng);
          cyclic_shift(oriented, shifted, grid, dr, shift_dist(rng));
          oriented.swap(shifted);
        }
        for (std::size_t j = 0; j < d; ++j) {
          x[j] = oriented[j] + noise(rng);
          out.dataset.blob.push_back(static_cast<float>(x[j]));
        }
        out.truth.planted.push_back(planted[i]);
        out.truth.cell_type.push_back(type);
      }
      char id[32];
      std::snprintf(id, sizeof(id), "bag%04zu", man.bags.size());
      man.bags.push_back({id, label, n, offset});
      offset += n;
    }
  }

  json gen = {{"n_classes", cfg.n_classes},
              {"n_bags_per_class", cfg.n_bags_per_class},
              {"min_instances", cfg.min_instances},
              {"max_instances", cfg.max_instances},
              {"planted_fraction", cfg.planted_fraction},
              {"feature_dim", cfg.feature_dim},
              {"class_signal_strength", cfg.class_signal_strength},
              {"noise_scale", cfg.noise_scale},
              {"background_types", cfg.background_types},
              {"random_orientation", cfg.random_orientation},
              {"random_translation", cfg.random_translation},
              {"pattern_frequencies", cfg.pattern_frequencies},
              {"control_class", cfg.control_class},
              {"pattern_seed", cfg.pattern_seed},
              {"seed", cfg.seed}};
  man.generator = gen.dump();
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr const char* kManifestName = "manifest";
constexpr const char* kBlobName = "instances.bin";
constexpr const char* kTruthName = "planted_truth";

void write_f32_le(std::ostream& os, const std::vector<float>& values) {
  static_assert(sizeof(float) == 4);
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &values[i], 4);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(bytes.data() + 4 * i, &u, 4);
  }
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<float> read_f32_le(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw IoError(path.string() + ": size is not a multiple of 4 bytes");
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(&values[i], &u, 4);
  }
  return values;
}

}  // namespace

void write_dataset(const fs::path& dir, const Dataset& dataset, const PlantedTruth* truth) {
  const auto& man = dataset.manifest;
  man.validate(dataset.blob.size() / std::max<std::size_t>(man.feature_dim, 1));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json j;
  j["format"] = "ssmil-dataset";
  j["version"] = 1;
  j["dtype"] = "float32";
  j["byte_order"] = "little";
  j["layout"] = "row-major";
  j["n_bags"] = man.n_bags();
  j["n_classes"] = man.n_classes;
  j["feature_dim"] = man.feature_dim;
  j["total_instances"] = man.total_instances();
  j["provenance"] = {{"kind", man.provenance}, {"seed", man.seed}};
  if (!man.generator.empty()) j["provenance"]["generator"] = json::parse(man.generator);
  j["bags"] = json::array();
  for (const auto& b : man.bags)
    j["bags"].push_back({{"bag_id", b.bag_id}, {"label", b.label}, {"n_instances", b.n_instances}, {"offset", b.offset}});

  std::ofstream mf(dir / kManifestName);
  if (!mf) throw IoError("cannot write manifest in " + dir.string());
  mf << j.dump(1) << "\n";

  std::ofstream bf(dir / kBlobName, std::ios::binary);
  if (!bf) throw IoError("cannot write blob in " + dir.string());
  write_f32_le(bf, dataset.blob);

  if (truth) {
    std::ofstream tf(dir / kTruthName);
    if (!tf) throw IoError("cannot write planted truth in " + dir.string());
    tf << "instance_id,bag_id,planted,cell_type\n";
    for (const auto& b : man.bags)
      for (std::size_t i = 0; i < b.n_instances; ++i) {
        const std::size_t row = b.offset + i;
        tf << row << ',' << b.bag_id << ',' << int(truth->planted.at(row)) << ',' << truth->cell_type.at(row) << '\n';
      }
  }
}

Dataset read_dataset(const fs::path& dir) {
  std::ifstream mf(dir / kManifestName);
  if (!mf) throw IoError("missing manifest in " + dir.string());
  json j;
  try {
    mf >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest: " + std::string(e.what()));
  }
  Dataset ds;
  auto& man = ds.manifest;
  try {
    if (j.at("format") != "ssmil-dataset" || j.at("version") != 1) throw IoError("unsupported manifest format/version");
    man.n_classes = j.at("n_classes").get<std::size_t>();
    man.feature_dim = j.at("feature_dim").get<std::size_t>();
    man.provenance = j.at("provenance").at("kind").get<std::string>();
    man.seed = j.at("provenance").value("seed", std::uint64_t{0});
    if (j.at("provenance").contains("generator")) man.generator = j["provenance"]["generator"].dump();
    for (const auto& b : j.at("bags")) {
      man.bags.push_back({b.at("bag_id").get<std::string>(), b.at("label").get<std::size_t>(),
                          b.at("n_instances").get<std::size_t>(), b.at("offset").get<std::size_t>()});
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest: " + std::string(e.what()));
  }
  ds.blob = read_f32_le(dir / kBlobName);
  if (man.feature_dim == 0 || ds.blob.size() % man.feature_dim != 0) throw IoError("blob size does not match feature_dim");
  man.validate(ds.blob.size() / man.feature_dim);
  for (float v : ds.blob)
    if (!std::isfinite(v)) throw IoError("blob contains non-finite values");
  return ds;
}

PlantedTruth read_planted_truth(const fs::path& dir) {
  std::ifstream tf(dir / kTruthName);
  if (!tf) throw IoError("missing planted truth in " + dir.string());
  std::string line;
  std::getline(tf, line);
  std::map<std::size_t, std::pair<std::uint8_t, std::size_t>> rows;
  while (std::getline(tf, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, bag, planted, type;
    if (!std::getline(ss, id, ',') || !std::getline(ss, bag, ',') || !std::getline(ss, planted, ',') ||
        !std::getline(ss, type, ','))
      throw IoError("malformed planted truth line: " + line);
    rows[std::stoul(id)] = {static_cast<std::uint8_t>(std::stoi(planted)), std::stoul(type)};
  }
  PlantedTruth t;
  std::size_t expected = 0;
  for (const auto& [id, v] : rows) {
    if (id != expected++) throw IoError("planted truth does not cover every instance");
    t.planted.push_back(v.first);
    t.cell_type.push_back(v.second);
  }
  return t;
}

// ---------------------------------------------------------------------------

std::vector<FoldSplit> stratified_kfold(const std::vector<std::size_t>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw InvalidParameter("stratified_kfold: k must be at least 2");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [label, members] : by_class)
    if (members.size() < k)
      throw DegenerateInput("stratified_kfold: class " + std::to_string(label) + " has fewer than k members");

  std::mt19937_64 rng(seed);
  for (auto& [label, members] : by_class) std::shuffle(members.begin(), members.end(), rng);

  // fold_of[i]: round-robin per class, continuing across classes to balance fold sizes
  std::vector<std::size_t> fold_of(labels.size());
  std::size_t cursor = 0;
  for (const auto& [label, members] : by_class)
    for (std::size_t m : members) fold_of[m] = cursor++ % k;

  std::vector<FoldSplit> splits(k);
  for (std::size_t f = 0; f < k; ++f) {
    auto& s = splits[f];
    s.fold_index = f;
    for (const auto& [label, members] : by_class) {
      std::vector<std::size_t> rest;
      for (std::size_t m : members) (fold_of[m] == f ? s.test : rest).push_back(m);
      const auto n_train = static_cast<std::size_t>(std::floor(0.75 * static_cast<double>(rest.size()) + 0.5));
      s.train.insert(s.train.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_train));
      s.validation.insert(s.validation.end(), rest.begin() + static_cast<std::ptrdiff_t>(n_train), rest.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.validation.begin(), s.validation.end());
    std::sort(s.test.begin(), s.test.end());
  }
  return splits;
}

std::vector<std::size_t> balanced_bag_sampler(const std::vector<std::size_t>& train,
                                              const std::vector<std::size_t>& labels, std::uint64_t seed,
                                              std::size_t epoch_length) {
  if (train.empty()) throw DegenerateInput("balanced_bag_sampler: empty training set");
  std::map<std::size_t, std::size_t> count;
  for (std::size_t b : train) ++count[labels.at(b)];
  std::vector<double> weights;
  weights.reserve(train.size());
  for (std::size_t b : train) weights.push_back(1.0 / static_cast<double>(count[labels[b]]));
  std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out(epoch_length);
  for (auto& o : out) o = train[dist(rng)];
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct TransformValidator {
  void check_p(double p) const {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidParameter("augmentation: probability outside [0,1]");
  }
  void operator()(const HorizontalFlip& t) const { check_p(t.p); }
  void operator()(const VerticalFlip& t) const { check_p(t.p); }
  void operator()(const Rotate90& t) const { check_p(t.p); }
  void operator()(const GaussianNoise& t) const {
    if (!(t.sigma >= 0.0)) throw InvalidParameter("augmentation: negative noise sigma");
  }
  void operator()(const ScaleJitter& t) const {
    if (!(t.low > 0.0) || !(t.low <= t.high)) throw InvalidParameter("augmentation: invalid scale range");
  }
  void operator()(const RandomShift&) const {}
  void operator()(const CropMask& t) const {
    if (!(t.fraction > 0.0 && t.fraction <= 1.0)) throw InvalidParameter("augmentation: crop fraction outside (0,1]");
  }
};

bool draw(double p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng) < p;
}

std::size_t require_grid(std::size_t n) {
  const std::size_t side = grid_side(n);
  if (side == 0) throw ShapeMismatch("augmentation: geometric transform needs a square feature vector");
  return side;
}

}  // namespace

void AugmentationSpec::validate() const {
  for (const auto& t : transforms) std::visit(TransformValidator{}, t);
}

AugmentationSpec AugmentationSpec::dihedral() { return {{HorizontalFlip{0.5}, VerticalFlip{0.5}, Rotate90{0.5}}}; }

Vector apply_augmentations(const AugmentationSpec& spec, std::span<const double> instance, std::mt19937_64& rng) {
  std::vector<double> x(instance.begin(), instance.end());
  std::vector<double> tmp(x.size());
  for (const auto& t : spec.transforms) {
    std::visit(TransformValidator{}, t);
    if (const auto* f = std::get_if<HorizontalFlip>(&t)) {
      const std::size_t side = require_grid(x.size());
      if (draw(f->p, rng)) {
        dihedral_transform(x, tmp, side, 4);
        x.swap(tmp);
      }
    } else if (const auto* f = std::get_if<VerticalFlip>(&t)) {
      const std::size_t side = require_grid(x.size());
      if (draw(f->p, rng)) {
        dihedral_transform(x, tmp, side, 6);  // mirror after a half turn
        x.swap(tmp);
      }
    } else if (const auto* r = std::get_if<Rotate90>(&t)) {
      const std::size_t side = require_grid(x.size());
      if (draw(r->p, rng)) {
        dihedral_transform(x, tmp, side, 1);
        x.swap(tmp);
      }
    } else if (const auto* g = std::get_if<GaussianNoise>(&t)) {
      if (g->sigma > 0.0) {
        std::normal_distribution<double> normal(0.0, g->sigma);
        for (double& v : x) v += normal(rng);
      }
    } else if (const auto* s = std::get_if<ScaleJitter>(&t)) {
      std::uniform_real_distribution<double> u(s->low, s->high);
      const double f = s->low == s->high ? s->low : u(rng);
      for (double& v : x) v *= f;
    } else if (std::holds_alternative<RandomShift>(t)) {
      const std::size_t side = require_grid(x.size());
      std::uniform_int_distribution<std::size_t> offset(0, side - 1);
      const std::size_t dr = offset(rng);
      cyclic_shift(x, tmp, side, dr, offset(rng));
      x.swap(tmp);
    } else if (const auto* c = std::get_if<CropMask>(&t)) {
      const std::size_t side = require_grid(x.size());
      const auto w = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::lround(c->fraction * static_cast<double>(side))), 1, side);
      std::uniform_int_distribution<std::size_t> pos(0, side - w);
      const std::size_t r0 = pos(rng);
      const std::size_t c0 = pos(rng);
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t cc = 0; cc < side; ++cc)
          if (r < r0 || r >= r0 + w || cc < c0 || cc >= c0 + w) x[r * side + cc] = 0.0;
    }
  }
  return Vector(std::move(x));
}

Matrix apply_augmentations(const AugmentationSpec& spec, const Matrix& instances, std::mt19937_64& rng) {
  Matrix out(instances.rows(), instances.cols());
  for (std::size_t r = 0; r < instances.rows(); ++r) {
    const Vector v = apply_augmentations(spec, instances.row(r), rng);
    std::copy(v.begin(), v.end(), out.row(r).begin());
  }
  return out;
}

std::vector<Matrix> multi_crop(const MultiCropSpec& spec, const Matrix& instances, std::mt19937_64& rng) {
  std::vector<Matrix> views;
  for (std::size_t v = 0; v < spec.n_global; ++v) views.push_back(apply_augmentations(spec.global, instances, rng));
  for (std::size_t v = 0; v < spec.n_local; ++v) views.push_back(apply_augmentations(spec.local, instances, rng));
  return views;
}

}  // namespace ssmil
