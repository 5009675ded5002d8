#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ssmil/config.hpp"
#include "ssmil/data.hpp"
#include "ssmil/metrics.hpp"
#include "ssmil/mil.hpp"
#include "ssmil/nn.hpp"

namespace ssmil {

// ---------------------------------------------------------------------------
// Encoders

struct PretrainResult {
  Mlp encoder;
  std::vector<double> epoch_loss;
  std::vector<std::string> warnings;
};

/// Self-supervised pre-training on unlabeled instances. Only feature rows are
/// visible here: no bag labels and no planted truth.
PretrainResult pretrain_encoder(const Matrix& instances, SslMethod method, const EncoderSettings& encoder,
                                const SslSettings& ssl, std::uint64_t seed, std::ostream* log = nullptr);

Mlp random_encoder(const EncoderSettings& encoder, std::size_t input_dim, std::uint64_t seed);

/// Instance-supervised encoder trained on a separately generated corpus
/// (different seed), whose pseudo-labels are the pattern each instance was
/// drawn from. Stands in for a supervised backbone trained on outside data.
PretrainResult supervised_proxy_encoder(const SyntheticConfig& dataset, const EncoderSettings& encoder,
                                        const SslSettings& ssl, std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// MIL

/// Frozen-encoder embeddings of every bag. Variant 0 is the plain instance;
/// with flips, variants 1..3 are the horizontal, vertical and double flip.
struct EmbeddingCache {
  std::vector<std::vector<Matrix>> bags;  // [bag][variant] -> N x k

  std::size_t variants() const { return bags.empty() ? 0 : bags.front().size(); }
};

EmbeddingCache embed_dataset(const Dataset& dataset, const Mlp& encoder, bool flips);

struct BagEvaluation {
  PredictionSet predictions;
  std::vector<AttentionRow> attention;  // weight for the true class, one row per instance
  std::vector<Matrix> attention_full;   // per evaluated bag, N x C
  std::vector<std::size_t> bags;
};

BagEvaluation evaluate_bags(const Dataset& dataset, const std::vector<std::size_t>& bags, const MilModel& model,
                            const Mlp& encoder);

struct MilTrainResult {
  MilModel model;
  std::optional<Mlp> tuned_encoder;  // only when the encoder is not frozen
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
};

/// One MIL training run on a fold. With a frozen encoder `cache` must hold
/// the encoder's embeddings; otherwise it is ignored and the encoder is tuned.
MilTrainResult train_mil(const Dataset& dataset, const FoldSplit& split, const Mlp& encoder,
                         const EmbeddingCache* cache, const ExperimentConfig& cfg, std::uint64_t seed,
                         std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Experiment driver

struct RunRecord {
  std::string run_id;
  std::string method;
  std::size_t fold = 0;
  std::size_t run = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string encoder_checkpoint;
  std::string encoder_hash_before;
  std::string encoder_hash_after;
  std::string mil_checkpoint;
  std::vector<std::string> test_bags;
  MetricsReport report;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
};

void write_record(const std::filesystem::path& path, const RunRecord& record);
RunRecord read_record(const std::filesystem::path& path);

struct MethodOutcome {
  SslMethod method = SslMethod::simclr;
  std::vector<RunRecord> records;
  std::map<std::string, MetricSummary> summary;
  std::vector<std::string> warnings;
  double seconds = 0.0;
};

struct LoadedDataset {
  std::filesystem::path dir;
  Dataset dataset;
};

/// Experiment directory layout:
///   config.txt                           resolved configuration
///   dataset/                             generated dataset (when dataset.path is empty)
///   <method>/encoders/fold<i>/           encoder checkpoints (global/ for global pre-training)
///   <method>/encoders/fold<i>_curve.csv  pre-training loss per epoch
///   <method>/mil/fold<i>_run<r>/         MIL checkpoint, record.json and evaluation exports
///   <method>/report.txt                  aggregate over all records
class Experiment {
 public:
  Experiment(ConfigMap map, std::ostream* log = nullptr);

  const ExperimentConfig& config() const { return cfg_; }
  const ConfigMap& config_map() const { return map_; }
  std::string config_hash() const;

  /// Writes the resolved configuration to config.txt under the output directory.
  void write_config() const;

  /// Generates (if needed) and loads the dataset.
  const LoadedDataset& dataset();
  std::vector<FoldSplit> folds();

  std::filesystem::path method_dir(SslMethod method) const;
  std::filesystem::path encoder_dir(SslMethod method, std::optional<std::size_t> fold) const;

  /// Self-supervised pre-training for every fold (or once, globally).
  std::vector<std::filesystem::path> pretrain(SslMethod method);

  /// k folds x runs MIL trainings with the method's encoders; writes records,
  /// exports and the aggregate report.
  MethodOutcome train_mil(SslMethod method);

 private:
  Mlp encoder_for(SslMethod method, std::size_t fold, std::string& checkpoint);

  ConfigMap map_;
  ExperimentConfig cfg_;
  std::ostream* log_;
  std::optional<LoadedDataset> data_;
};

/// Mean/s.d. summary text of the records under a method directory, in a fixed
/// format (identical inputs give byte-identical text).
std::string format_report(const std::string& method, const std::vector<RunRecord>& records,
                          std::vector<std::string>* warnings = nullptr);
std::vector<RunRecord> collect_records(const std::filesystem::path& method_dir);

/// Writes predictions.csv, confusion.csv, roc.csv, pr.csv and attention.csv.
void write_exports(const std::filesystem::path& dir, const Dataset& dataset, const BagEvaluation& eval,
                   const MetricsReport& report);
/// One row per instance of the given bags: bag_id, instance, embedding values.
void write_embeddings(const std::filesystem::path& path, const Dataset& dataset, const std::vector<std::size_t>& bags,
                      const Mlp& encoder);

}  // namespace ssmil
