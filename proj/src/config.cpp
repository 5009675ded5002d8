#include "ssmil/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "ssmil/checkpoint.hpp"
#include "ssmil/error.hpp"

namespace ssmil {

const std::vector<ConfigKey>& ConfigMap::registry() {
  static const std::vector<ConfigKey> keys = {
      {"dataset.path", "", "existing dataset directory; empty generates a synthetic one"},
      {"dataset.n_classes", "5", "number of bag labels, including the control class"},
      {"dataset.n_bags_per_class", "40", "bags generated per label"},
      {"dataset.min_instances", "30", "smallest bag"},
      {"dataset.max_instances", "80", "largest bag"},
      {"dataset.planted_fraction", "0.15", "share of planted instances in a non-control bag"},
      {"dataset.feature_dim", "64", "instance feature width (a square for oriented patterns)"},
      {"dataset.class_signal_strength", "5.0", "norm of every pattern"},
      {"dataset.noise_scale", "0.4", "per-feature Gaussian noise"},
      {"dataset.background_types", "4", "shared background cell types"},
      {"dataset.random_orientation", "true", "random dihedral orientation per instance"},
      {"dataset.random_translation", "false", "random cyclic shift per instance"},
      {"dataset.pattern_frequencies", "0", "cosine modes per axis spanning the patterns; 0 is unrestricted"},
      {"dataset.control_class", "0", "label whose bags hold background only"},
      {"dataset.pattern_seed", "1", "seed of the cell-type patterns"},
      {"dataset.seed", "1", "seed of bags, orientations and noise"},

      {"encoder.widths", "256,128", "encoder widths after the input; the last is the embedding width"},
      {"encoder.output_activation", "relu", "activation of the embedding layer"},

      {"ssl.method", "simclr", "simclr | swav | dino | none-random | none-supervised-proxy"},
      {"ssl.epochs", "20", "pre-training epochs"},
      {"ssl.batch_size", "128", "instances per step"},
      {"ssl.instances_per_epoch", "0", "instances drawn per epoch; 0 uses every training instance"},
      {"ssl.warmup_epochs", "0", "linear warmup before cosine decay"},
      {"ssl.momentum", "0.9", "SGD momentum / Adam first-moment decay"},
      {"ssl.larc_eta", "0.001", "LARC trust coefficient"},
      {"ssl.scope", "per-fold", "per-fold (pre-train on each fold's training bags) | global"},
      {"ssl.noise_sigma", "0.3", "Gaussian noise added to every view"},
      {"ssl.translate", "false", "random cyclic shift in every view"},
      {"ssl.flip_probability", "0", "probability of each horizontal flip, vertical flip and quarter turn in a view"},
      {"ssl.global_crop", "0.75", "kept side fraction of a global view"},
      {"ssl.local_crop", "0.5", "kept side fraction of a local view"},
      {"ssl.n_global", "2", "global views per instance (multi-crop)"},
      {"ssl.n_local", "2", "local views per instance (DINO multi-crop)"},
      {"ssl.seed", "11", "pre-training seed"},
      {"simclr.optimizer", "sgd_larc", "sgd_nesterov | sgd_larc | adamw"},
      {"simclr.lr", "0.3", "base learning rate"},
      {"simclr.weight_decay", "1e-4", "weight decay"},
      {"simclr.tau", "0.1", "contrastive temperature"},
      {"simclr.head", "128,64", "projection head widths"},
      {"swav.optimizer", "sgd_larc", "sgd_nesterov | sgd_larc | adamw"},
      {"swav.lr", "0.3", "base learning rate"},
      {"swav.weight_decay", "1e-4", "weight decay"},
      {"swav.tau", "0.1", "prediction temperature"},
      {"swav.epsilon", "0.05", "Sinkhorn entropic regularization"},
      {"swav.iters", "3", "Sinkhorn iterations"},
      {"swav.prototypes", "300", "number of prototypes"},
      {"swav.head", "128,128,64", "projection head widths; the last matches the prototypes"},
      {"swav.n_local", "2", "local views per instance"},
      {"swav.freeze_prototypes_epochs", "1", "epochs before prototypes start to move"},
      {"dino.optimizer", "sgd_larc", "sgd_nesterov | sgd_larc | adamw"},
      {"dino.lr", "0.3", "base learning rate"},
      {"dino.weight_decay", "1e-4", "weight decay"},
      {"dino.head", "128,256", "head widths; the last is the number of soft classes K"},
      {"dino.tau_s", "0.1", "student temperature"},
      {"dino.tau_t_start", "0.04", "teacher temperature at the start of warmup"},
      {"dino.tau_t_end", "0.07", "teacher temperature after warmup"},
      {"dino.tau_t_warmup_epochs", "5", "teacher temperature warmup length"},
      {"dino.ema", "0.996", "initial teacher momentum, ramped to 1 by a cosine schedule"},
      {"dino.center_momentum", "0.9", "center update momentum"},
      {"proxy.corpus_seed", "1001", "seed of the external corpus used by the supervised proxy"},
      {"proxy.epochs", "20", "supervised proxy epochs"},
      {"proxy.lr", "0.05", "supervised proxy learning rate"},

      {"mil.epochs", "50", "maximum MIL epochs"},
      {"mil.patience", "20", "early stopping patience on validation loss"},
      {"mil.lr", "0.015", "MIL base learning rate (cosine annealed)"},
      {"mil.accumulation", "10", "bags averaged per optimizer step"},
      {"mil.instance_cap", "500", "instances per bag at training time"},
      {"mil.freeze_encoder", "true", "keep the encoder fixed during MIL training"},
      {"mil.flip_augment", "true", "random horizontal/vertical flips of training instances"},
      {"mil.reduced_dim", "32", "reducer output width"},
      {"mil.attention_hidden", "64", "attention scorer hidden width"},
      {"mil.optimizer", "sgd_nesterov", "sgd_nesterov | sgd_larc | adamw"},
      {"mil.momentum", "0.9", "SGD momentum"},
      {"mil.weight_decay", "1e-4", "weight decay"},
      {"mil.scaler_floor", "1e-3", "embedding columns with smaller s.d. are not rescaled"},

      {"cv.k", "5", "stratified folds"},
      {"cv.runs", "3", "MIL repetitions per fold"},
      {"cv.split_seed", "7", "fold assignment seed"},
      {"cv.run_seed", "100", "base seed of the MIL repetitions"},

      {"output.dir", "experiment", "experiment directory"},
  };
  return keys;
}

ConfigMap::ConfigMap() {
  for (const auto& k : registry()) values_[k.key] = k.default_value;
}

void ConfigMap::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw InvalidParameter("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& ConfigMap::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw InvalidParameter("unknown config key '" + key + "'");
  return it->second;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw InvalidParameter("config '" + key + "': '" + value + "' is not " + what);
}

}  // namespace

ConfigMap ConfigMap::parse_text(const std::string& text) {
  ConfigMap m;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidParameter("config line " + std::to_string(lineno) + ": expected 'key = value'");
    m.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return m;
}

ConfigMap ConfigMap::parse_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_text(ss.str());
}

double ConfigMap::real(const std::string& key) const {
  const std::string& v = get(key);
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

std::uint64_t ConfigMap::seed(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t ConfigMap::count(const std::string& key) const { return static_cast<std::size_t>(seed(key)); }

bool ConfigMap::flag(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> ConfigMap::counts(const std::string& key) const {
  std::vector<std::size_t> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    std::size_t n = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), n);
    if (ec != std::errc() || ptr != item.data() + item.size() || n == 0)
      bad_value(key, get(key), "a comma-separated list of positive integers");
    out.push_back(n);
  }
  if (out.empty()) bad_value(key, get(key), "a non-empty list");
  return out;
}

std::string ConfigMap::to_text() const {
  std::string out;
  for (const auto& k : registry()) out += k.key + " = " + values_.at(k.key) + "\n";
  return out;
}

std::uint64_t ConfigMap::hash() const { return fnv1a(to_text()); }

std::string_view to_string(SslMethod m) {
  switch (m) {
    case SslMethod::simclr: return "simclr";
    case SslMethod::swav: return "swav";
    case SslMethod::dino: return "dino";
    case SslMethod::none_random: return "none-random";
    case SslMethod::none_supervised_proxy: return "none-supervised-proxy";
  }
  return "?";
}

SslMethod ssl_method_from_string(std::string_view s) {
  for (auto m : {SslMethod::simclr, SslMethod::swav, SslMethod::dino, SslMethod::none_random,
                 SslMethod::none_supervised_proxy})
    if (to_string(m) == s) return m;
  throw InvalidParameter("unknown ssl method '" + std::string(s) + "'");
}

bool is_self_supervised(SslMethod m) {
  return m == SslMethod::simclr || m == SslMethod::swav || m == SslMethod::dino;
}

MlpArch EncoderSettings::arch(std::size_t input_dim) const {
  MlpArch a;
  a.widths.push_back(input_dim);
  a.widths.insert(a.widths.end(), hidden_widths.begin(), hidden_widths.end());
  a.hidden = Activation::relu;
  a.output = output;
  return a;
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidParameter("config: " + what);
}

OptimizerConfig optimizer_of(const ConfigMap& m, const std::string& section, const std::string& shared) {
  OptimizerConfig o;
  o.kind = optimizer_from_string(m.get(section + ".optimizer"));
  o.momentum = m.real(shared + ".momentum");
  o.weight_decay = m.real(section + ".weight_decay");
  if (shared == "ssl") o.larc_eta = m.real("ssl.larc_eta");
  require(o.momentum >= 0.0 && o.momentum < 1.0, section + ".momentum must be in [0,1)");
  require(o.weight_decay >= 0.0, section + ".weight_decay must be non-negative");
  return o;
}

}  // namespace

ExperimentConfig resolve(const ConfigMap& m) {
  ExperimentConfig c;
  c.dataset_path = m.get("dataset.path");
  auto& s = c.synthetic;
  s.n_classes = m.count("dataset.n_classes");
  s.n_bags_per_class = m.count("dataset.n_bags_per_class");
  s.min_instances = m.count("dataset.min_instances");
  s.max_instances = m.count("dataset.max_instances");
  s.planted_fraction = m.real("dataset.planted_fraction");
  s.feature_dim = m.count("dataset.feature_dim");
  s.class_signal_strength = m.real("dataset.class_signal_strength");
  s.noise_scale = m.real("dataset.noise_scale");
  s.background_types = m.count("dataset.background_types");
  s.random_orientation = m.flag("dataset.random_orientation");
  s.random_translation = m.flag("dataset.random_translation");
  s.pattern_frequencies = m.count("dataset.pattern_frequencies");
  s.control_class = m.count("dataset.control_class");
  s.pattern_seed = m.seed("dataset.pattern_seed");
  s.seed = m.seed("dataset.seed");
  if (c.dataset_path.empty()) s.validate();

  c.encoder.hidden_widths = m.counts("encoder.widths");
  c.encoder.output = activation_from_string(m.get("encoder.output_activation"));

  auto& l = c.ssl;
  l.method = ssl_method_from_string(m.get("ssl.method"));
  l.epochs = m.count("ssl.epochs");
  l.batch_size = m.count("ssl.batch_size");
  l.instances_per_epoch = m.count("ssl.instances_per_epoch");
  l.warmup_epochs = m.count("ssl.warmup_epochs");
  const std::string& scope = m.get("ssl.scope");
  require(scope == "per-fold" || scope == "global", "ssl.scope must be per-fold or global");
  l.per_fold = scope == "per-fold";
  l.noise_sigma = m.real("ssl.noise_sigma");
  l.translate = m.flag("ssl.translate");
  l.flip_probability = m.real("ssl.flip_probability");
  l.global_crop = m.real("ssl.global_crop");
  l.local_crop = m.real("ssl.local_crop");
  l.n_global = m.count("ssl.n_global");
  l.n_local = m.count("ssl.n_local");
  l.seed = m.seed("ssl.seed");
  l.simclr_optimizer = optimizer_of(m, "simclr", "ssl");
  l.simclr_lr = m.real("simclr.lr");
  l.swav_optimizer = optimizer_of(m, "swav", "ssl");
  l.swav_lr = m.real("swav.lr");
  l.dino_optimizer = optimizer_of(m, "dino", "ssl");
  l.dino_lr = m.real("dino.lr");
  l.simclr_tau = m.real("simclr.tau");
  l.simclr_head = m.counts("simclr.head");
  l.swav_tau = m.real("swav.tau");
  l.swav_epsilon = m.real("swav.epsilon");
  l.swav_iters = m.count("swav.iters");
  l.swav_prototypes = m.count("swav.prototypes");
  l.swav_head = m.counts("swav.head");
  l.swav_local = m.count("swav.n_local");
  l.swav_freeze_prototypes_epochs = m.count("swav.freeze_prototypes_epochs");
  l.dino_head = m.counts("dino.head");
  l.dino_tau_s = m.real("dino.tau_s");
  l.dino_tau_t_start = m.real("dino.tau_t_start");
  l.dino_tau_t_end = m.real("dino.tau_t_end");
  l.dino_tau_t_warmup_epochs = m.count("dino.tau_t_warmup_epochs");
  l.dino_ema = m.real("dino.ema");
  l.dino_center_momentum = m.real("dino.center_momentum");
  l.proxy_corpus_seed = m.seed("proxy.corpus_seed");
  l.proxy_epochs = m.count("proxy.epochs");
  l.proxy_lr = m.real("proxy.lr");
  require(l.flip_probability >= 0.0 && l.flip_probability <= 1.0, "ssl.flip_probability must be in [0,1]");
  require(l.epochs > 0 && l.batch_size > 1, "ssl.epochs must be positive and ssl.batch_size at least 2");
  require(l.simclr_lr > 0.0 && l.swav_lr > 0.0 && l.dino_lr > 0.0 && l.proxy_lr > 0.0,
          "learning rates must be positive");
  require(l.warmup_epochs <= l.epochs, "ssl.warmup_epochs exceeds ssl.epochs");
  require(l.n_global >= 2, "ssl.n_global must be at least 2");
  require(l.simclr_tau > 0.0 && l.swav_tau > 0.0 && l.swav_epsilon > 0.0 && l.swav_iters > 0, "SSL temperatures");
  require(l.dino_tau_t_start < l.dino_tau_s && l.dino_tau_t_end < l.dino_tau_s,
          "dino teacher temperatures must stay below dino.tau_s");
  require(l.dino_ema >= 0.0 && l.dino_ema <= 1.0, "dino.ema must be in [0,1]");
  require(l.dino_center_momentum >= 0.0 && l.dino_center_momentum <= 1.0, "dino.center_momentum must be in [0,1]");

  auto& mi = c.mil;
  mi.epochs = m.count("mil.epochs");
  mi.patience = m.count("mil.patience");
  mi.lr = m.real("mil.lr");
  mi.accumulation = m.count("mil.accumulation");
  mi.instance_cap = m.count("mil.instance_cap");
  mi.freeze_encoder = m.flag("mil.freeze_encoder");
  mi.flip_augment = m.flag("mil.flip_augment");
  mi.reduced_dim = m.count("mil.reduced_dim");
  mi.attention_hidden = m.count("mil.attention_hidden");
  mi.optimizer = optimizer_of(m, "mil", "mil");
  mi.scaler_floor = m.real("mil.scaler_floor");
  require(mi.epochs > 0 && mi.patience > 0 && mi.accumulation > 0 && mi.instance_cap > 0,
          "MIL epochs, patience, accumulation and instance cap must be positive");
  require(mi.lr > 0.0, "mil.lr must be positive");
  require(mi.reduced_dim < c.encoder.output_dim(), "mil.reduced_dim must be below the embedding width");

  c.cv.k = m.count("cv.k");
  c.cv.runs = m.count("cv.runs");
  c.cv.split_seed = m.seed("cv.split_seed");
  c.cv.run_seed = m.seed("cv.run_seed");
  require(c.cv.k >= 2 && c.cv.runs >= 1, "cv.k must be at least 2 and cv.runs at least 1");

  c.output_dir = m.get("output.dir");
  require(!c.output_dir.empty(), "output.dir must be set");
  return c;
}

}  // namespace ssmil
