#pragma once

// Brute-force metric oracles shared by the unit tests and the acceptance
// binary: direct pair counting and explicit threshold sweeps.

#include <algorithm>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ssmil/metrics.hpp"

namespace ssmil::oracle {

inline double pair_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& pos) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (pos[i] && !pos[j]) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

inline double sweep_ap(const std::vector<double>& s, const std::vector<std::uint8_t>& pos) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  const double n_pos = static_cast<double>(std::count(pos.begin(), pos.end(), 1));
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) (pos[i] ? tp : fp) += 1.0;
    const double recall = tp / n_pos;
    ap += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return ap;
}

inline double naive_macro_f1(const PredictionSet& set) {
  double total = 0.0;
  for (std::size_t c = 0; c < set.n_classes; ++c) {
    double tp = 0.0, fp = 0.0, fn = 0.0;
    for (const auto& r : set.records) {
      if (r.predicted_class == c && r.true_label == c) tp += 1.0;
      if (r.predicted_class == c && r.true_label != c) fp += 1.0;
      if (r.predicted_class != c && r.true_label == c) fn += 1.0;
    }
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double q = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    total += p + q > 0 ? 2.0 * p * q / (p + q) : 0.0;
  }
  return total / static_cast<double>(set.n_classes);
}

template <class Metric>
double naive_macro(const PredictionSet& set, Metric metric, bool need_negative) {
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < set.n_classes; ++c) {
    std::vector<double> s;
    std::vector<std::uint8_t> pos;
    for (const auto& r : set.records) {
      s.push_back(r.probabilities[c]);
      pos.push_back(r.true_label == c ? 1 : 0);
    }
    const auto n_pos = std::count(pos.begin(), pos.end(), 1);
    if (n_pos == 0 || (need_negative && n_pos == static_cast<long>(pos.size()))) continue;
    total += metric(s, pos);
    ++used;
  }
  return total / static_cast<double>(used);
}

// Probabilities from small integer weights so that ties are frequent.
inline PredictionSet random_set(std::mt19937_64& rng, std::size_t n, std::size_t n_classes) {
  PredictionSet set{n_classes, {}};
  std::uniform_int_distribution<int> weight(1, 4);
  std::uniform_int_distribution<std::size_t> label(0, n_classes - 1);
  for (std::size_t i = 0; i < n; ++i) {
    PredictionRecord r{"b" + std::to_string(i), i < n_classes ? i : label(rng), 0, std::vector<double>(n_classes)};
    double sum = 0.0;
    for (double& p : r.probabilities) sum += p = weight(rng);
    for (double& p : r.probabilities) p /= sum;
    r.predicted_class = static_cast<std::size_t>(std::ranges::max_element(r.probabilities) - r.probabilities.begin());
    set.records.push_back(std::move(r));
  }
  return set;
}

inline ConfusionMatrix naive_confusion(const PredictionSet& set) {
  ConfusionMatrix cm{std::vector<std::vector<std::size_t>>(set.n_classes, std::vector<std::size_t>(set.n_classes, 0))};
  for (std::size_t i = 0; i < set.n_classes; ++i)
    for (std::size_t j = 0; j < set.n_classes; ++j)
      for (const auto& r : set.records) cm.counts[i][j] += r.true_label == i && r.predicted_class == j;
  return cm;
}

}  // namespace ssmil::oracle
