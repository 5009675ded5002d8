#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ssmil/data.hpp"
#include "ssmil/nn.hpp"
#include "ssmil/optim.hpp"

namespace ssmil {

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string help;
};

/// Flat dotted-key configuration. Every key has a registered default; files
/// hold one `key = value` per line, `#` starts a comment.
class ConfigMap {
 public:
  ConfigMap();

  static const std::vector<ConfigKey>& registry();
  static ConfigMap parse_file(const std::filesystem::path& path);
  static ConfigMap parse_text(const std::string& text);

  /// Throws InvalidParameter for an unregistered key.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;

  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t seed(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<std::size_t> counts(const std::string& key) const;

  /// Every key in registry order; the text parses back to an equal map.
  std::string to_text() const;
  std::uint64_t hash() const;

  friend bool operator==(const ConfigMap&, const ConfigMap&) = default;

 private:
  std::map<std::string, std::string> values_;
};

enum class SslMethod { simclr, swav, dino, none_random, none_supervised_proxy };

std::string_view to_string(SslMethod m);
SslMethod ssl_method_from_string(std::string_view s);
bool is_self_supervised(SslMethod m);

struct EncoderSettings {
  std::vector<std::size_t> hidden_widths{256, 128};  // after the input width; the last is k
  Activation output = Activation::relu;

  MlpArch arch(std::size_t input_dim) const;
  std::size_t output_dim() const { return hidden_widths.back(); }
};

struct SslSettings {
  SslMethod method = SslMethod::simclr;
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  std::size_t instances_per_epoch = 0;  // 0: every training instance once per epoch
  std::size_t warmup_epochs = 0;
  bool per_fold = true;
  double noise_sigma = 0.3;
  bool translate = false;  // random cyclic shift in every view
  double flip_probability = 0.0;  // per flip/turn in every view
  double global_crop = 0.75;
  double local_crop = 0.5;
  std::size_t n_global = 2;
  std::size_t n_local = 2;
  std::uint64_t seed = 11;

  double simclr_lr = 0.3;
  OptimizerConfig simclr_optimizer;
  double simclr_tau = 0.1;
  std::vector<std::size_t> simclr_head{128, 64};

  double swav_lr = 0.3;
  OptimizerConfig swav_optimizer;
  double swav_tau = 0.1;
  double swav_epsilon = 0.05;
  std::size_t swav_iters = 3;
  std::size_t swav_prototypes = 300;
  std::vector<std::size_t> swav_head{128, 128, 64};
  std::size_t swav_local = 2;
  std::size_t swav_freeze_prototypes_epochs = 1;

  double dino_lr = 0.3;
  OptimizerConfig dino_optimizer;
  std::vector<std::size_t> dino_head{128, 256};  // last width is K
  double dino_tau_s = 0.1;
  double dino_tau_t_start = 0.04;
  double dino_tau_t_end = 0.07;
  std::size_t dino_tau_t_warmup_epochs = 5;
  double dino_ema = 0.996;
  double dino_center_momentum = 0.9;

  std::uint64_t proxy_corpus_seed = 1001;
  std::size_t proxy_epochs = 20;
  double proxy_lr = 0.05;
};

struct MilSettings {
  std::size_t epochs = 50;
  std::size_t patience = 20;
  double lr = 0.015;
  std::size_t accumulation = 10;
  std::size_t instance_cap = 500;
  bool freeze_encoder = true;
  bool flip_augment = true;
  std::size_t reduced_dim = 32;
  std::size_t attention_hidden = 64;
  OptimizerConfig optimizer;
  double scaler_floor = 1e-3;
};

struct CvSettings {
  std::size_t k = 5;
  std::size_t runs = 3;
  std::uint64_t split_seed = 7;
  std::uint64_t run_seed = 100;
};

struct ExperimentConfig {
  std::filesystem::path dataset_path;  // empty: generate from `synthetic`
  SyntheticConfig synthetic;
  EncoderSettings encoder;
  SslSettings ssl;
  MilSettings mil;
  CvSettings cv;
  std::filesystem::path output_dir = "experiment";
};

/// Typed view of a map; validates ranges.
ExperimentConfig resolve(const ConfigMap& map);

}  // namespace ssmil
