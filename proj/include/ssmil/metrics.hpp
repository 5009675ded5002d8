#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ssmil {

struct PredictionRecord {
  std::string bag_id;
  std::size_t true_label = 0;
  std::size_t predicted_class = 0;
  std::vector<double> probabilities;
};

struct PredictionSet {
  std::size_t n_classes = 0;
  std::vector<PredictionRecord> records;

  void validate() const;
};

/// counts[true][predicted]
struct ConfusionMatrix {
  std::vector<std::vector<std::size_t>> counts;

  std::size_t total() const;
};

ConfusionMatrix confusion_matrix(const PredictionSet& set);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// A 0/0 ratio counts as 0.
std::vector<ClassScores> per_class_scores(const ConfusionMatrix& cm);
double macro_f1(const PredictionSet& set);

/// Rank statistic: P(score of a positive > score of a negative) with ties
/// counted as one half. Requires both a positive and a negative.
double binary_roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive);

/// Step-wise average precision: sum over distinct thresholds of
/// (recall gain) * precision at that threshold. Requires a positive.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive);

struct CurvePoint {
  double threshold = 0.0;
  double x = 0.0;  // FPR for ROC, recall for PR
  double y = 0.0;  // TPR for ROC, precision for PR
};

std::vector<CurvePoint> roc_curve(std::span<const double> scores, std::span<const std::uint8_t> positive);
std::vector<CurvePoint> pr_curve(std::span<const double> scores, std::span<const std::uint8_t> positive);

/// One-vs-rest macro averages over classes. Classes without both positives and
/// negatives among the records are skipped and reported in `warnings`.
double roc_auc_macro(const PredictionSet& set, std::vector<std::string>* warnings = nullptr);
double pr_auc_macro(const PredictionSet& set, std::vector<std::string>* warnings = nullptr);

struct AttentionRow {
  std::string bag_id;
  std::size_t instance = 0;  // global instance row
  std::size_t true_label = 0;
  double weight = 0.0;       // attention for the bag's true class
};

/// Within-bag ranking quality of attention: over all (planted, background)
/// instance pairs that share a bag, the fraction where the planted instance
/// has the larger weight, ties counting one half. Bags without both kinds
/// contribute no pairs.
double attention_rank_auc(const std::vector<AttentionRow>& rows, std::span<const std::uint8_t> planted);

struct MetricsReport {
  ConfusionMatrix confusion;
  std::vector<ClassScores> per_class;
  double f1_macro = 0.0;
  double roc_auc_macro = 0.0;
  double pr_auc_macro = 0.0;
  std::optional<double> attention_rank_auc;
  std::vector<std::string> warnings;
};

MetricsReport evaluate(const PredictionSet& set);

struct MetricSummary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation
  std::size_t n = 0;
};

/// Mean and sample standard deviation of each metric across reports.
/// A single report yields sd = 0 and a warning.
std::map<std::string, MetricSummary> aggregate(const std::vector<MetricsReport>& reports,
                                               std::vector<std::string>* warnings = nullptr);

}  // namespace ssmil
