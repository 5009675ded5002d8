#include "ssmil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "ssmil/error.hpp"

namespace ssmil {

void PredictionSet::validate() const {
  if (n_classes < 2) throw InvalidParameter("predictions: need at least two classes");
  if (records.empty()) throw DegenerateInput("predictions: empty set");
  for (const auto& r : records) {
    if (r.true_label >= n_classes || r.predicted_class >= n_classes)
      throw InvalidParameter("predictions: label out of range for bag '" + r.bag_id + "'");
    if (r.probabilities.size() != n_classes)
      throw ShapeMismatch("predictions: probability row of wrong length for bag '" + r.bag_id + "'");
    for (double p : r.probabilities)
      if (!std::isfinite(p)) throw InvalidParameter("predictions: non-finite probability for bag '" + r.bag_id + "'");
  }
}

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

ConfusionMatrix confusion_matrix(const PredictionSet& set) {
  set.validate();
  ConfusionMatrix cm{std::vector<std::vector<std::size_t>>(set.n_classes, std::vector<std::size_t>(set.n_classes, 0))};
  for (const auto& r : set.records) ++cm.counts[r.true_label][r.predicted_class];
  return cm;
}

namespace {

double ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

// Indices sorted by descending score.
std::vector<std::size_t> order_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

void check_binary(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw ShapeMismatch("binary metric: scores and labels differ in length");
  for (double s : scores)
    if (!std::isfinite(s)) throw InvalidParameter("binary metric: non-finite score");
}

struct Counts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

Counts count(std::span<const std::uint8_t> positive) {
  Counts c;
  for (auto p : positive) (p ? c.pos : c.neg)++;
  return c;
}

// Cumulative (threshold, tp, fp) after each distinct score, descending.
struct Step {
  double threshold;
  std::size_t tp;
  std::size_t fp;
};

std::vector<Step> threshold_steps(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  const auto idx = order_desc(scores);
  std::vector<Step> steps;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    (positive[idx[i]] ? tp : fp)++;
    if (i + 1 == idx.size() || scores[idx[i + 1]] != scores[idx[i]]) steps.push_back({scores[idx[i]], tp, fp});
  }
  return steps;
}

std::vector<std::uint8_t> one_vs_rest(const PredictionSet& set, std::size_t c, std::vector<double>& scores) {
  std::vector<std::uint8_t> pos;
  scores.clear();
  for (const auto& r : set.records) {
    scores.push_back(r.probabilities[c]);
    pos.push_back(r.true_label == c ? 1 : 0);
  }
  return pos;
}

template <typename F>
double macro_over_classes(const PredictionSet& set, std::vector<std::string>* warnings, const char* name, F metric) {
  set.validate();
  double sum = 0.0;
  std::size_t used = 0;
  std::vector<double> scores;
  for (std::size_t c = 0; c < set.n_classes; ++c) {
    const auto pos = one_vs_rest(set, c, scores);
    const Counts k = count(pos);
    if (k.pos == 0 || k.neg == 0) {
      if (warnings) warnings->push_back(std::string(name) + ": class " + std::to_string(c) + " skipped (single-class)");
      continue;
    }
    sum += metric(scores, pos);
    ++used;
  }
  if (used == 0) throw DegenerateInput(std::string(name) + ": no class has both positives and negatives");
  return sum / static_cast<double>(used);
}

}  // namespace

std::vector<ClassScores> per_class_scores(const ConfusionMatrix& cm) {
  const std::size_t n = cm.counts.size();
  std::vector<ClassScores> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    double tp = static_cast<double>(cm.counts[c][c]);
    double predicted = 0.0, actual = 0.0;
    for (std::size_t o = 0; o < n; ++o) {
      predicted += static_cast<double>(cm.counts[o][c]);
      actual += static_cast<double>(cm.counts[c][o]);
    }
    out[c].precision = ratio(tp, predicted);
    out[c].recall = ratio(tp, actual);
    out[c].f1 = ratio(2.0 * tp, predicted + actual);
  }
  return out;
}

double macro_f1(const PredictionSet& set) {
  const auto scores = per_class_scores(confusion_matrix(set));
  double s = 0.0;
  for (const auto& c : scores) s += c.f1;
  return s / static_cast<double>(scores.size());
}

double binary_roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  check_binary(scores, positive);
  const Counts k = count(positive);
  if (k.pos == 0 || k.neg == 0) throw DegenerateInput("roc_auc: need both positives and negatives");
  // Mann-Whitney U from midranks.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t)
      if (positive[idx[t]]) rank_sum += midrank;
    i = j;
  }
  const double np = static_cast<double>(k.pos);
  const double nn = static_cast<double>(k.neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  check_binary(scores, positive);
  const Counts k = count(positive);
  if (k.pos == 0) throw DegenerateInput("average_precision: no positives");
  double ap = 0.0;
  std::size_t prev_tp = 0;
  for (const auto& s : threshold_steps(scores, positive)) {
    const double precision = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp);
    ap += static_cast<double>(s.tp - prev_tp) / static_cast<double>(k.pos) * precision;
    prev_tp = s.tp;
  }
  return ap;
}

std::vector<CurvePoint> roc_curve(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  check_binary(scores, positive);
  const Counts k = count(positive);
  if (k.pos == 0 || k.neg == 0) throw DegenerateInput("roc_curve: need both positives and negatives");
  std::vector<CurvePoint> out{{INFINITY, 0.0, 0.0}};
  for (const auto& s : threshold_steps(scores, positive))
    out.push_back({s.threshold, static_cast<double>(s.fp) / static_cast<double>(k.neg),
                   static_cast<double>(s.tp) / static_cast<double>(k.pos)});
  return out;
}

std::vector<CurvePoint> pr_curve(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  check_binary(scores, positive);
  const Counts k = count(positive);
  if (k.pos == 0) throw DegenerateInput("pr_curve: no positives");
  std::vector<CurvePoint> out;
  for (const auto& s : threshold_steps(scores, positive))
    out.push_back({s.threshold, static_cast<double>(s.tp) / static_cast<double>(k.pos),
                   static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp)});
  return out;
}

double roc_auc_macro(const PredictionSet& set, std::vector<std::string>* warnings) {
  return macro_over_classes(set, warnings, "roc_auc_macro", binary_roc_auc);
}

double pr_auc_macro(const PredictionSet& set, std::vector<std::string>* warnings) {
  return macro_over_classes(set, warnings, "pr_auc_macro", average_precision);
}

double attention_rank_auc(const std::vector<AttentionRow>& rows, std::span<const std::uint8_t> planted) {
  std::unordered_map<std::string, std::vector<const AttentionRow*>> by_bag;
  for (const auto& r : rows) {
    if (r.instance >= planted.size()) throw ShapeMismatch("attention_rank_auc: instance outside the planted truth");
    if (!std::isfinite(r.weight)) throw InvalidParameter("attention_rank_auc: non-finite weight");
    by_bag[r.bag_id].push_back(&r);
  }
  double wins = 0.0, pairs = 0.0;
  for (const auto& [bag, members] : by_bag) {
    std::vector<double> pos, neg;
    for (const auto* m : members) (planted[m->instance] ? pos : neg).push_back(m->weight);
    if (pos.empty() || neg.empty()) continue;
    std::sort(neg.begin(), neg.end());
    for (double p : pos) {
      const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
      const auto hi = std::upper_bound(lo, neg.end(), p);
      wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
    }
    pairs += static_cast<double>(pos.size()) * static_cast<double>(neg.size());
  }
  if (pairs == 0.0) throw DegenerateInput("attention_rank_auc: no bag holds both planted and background instances");
  return wins / pairs;
}

MetricsReport evaluate(const PredictionSet& set) {
  MetricsReport r;
  r.confusion = confusion_matrix(set);
  r.per_class = per_class_scores(r.confusion);
  r.f1_macro = macro_f1(set);
  r.roc_auc_macro = roc_auc_macro(set, &r.warnings);
  r.pr_auc_macro = pr_auc_macro(set, &r.warnings);
  return r;
}

std::map<std::string, MetricSummary> aggregate(const std::vector<MetricsReport>& reports,
                                               std::vector<std::string>* warnings) {
  if (reports.empty()) throw DegenerateInput("aggregate: no reports");
  std::map<std::string, std::vector<double>> values;
  bool all_attention = true;
  for (const auto& r : reports) {
    values["f1_macro"].push_back(r.f1_macro);
    values["roc_auc_macro"].push_back(r.roc_auc_macro);
    values["pr_auc_macro"].push_back(r.pr_auc_macro);
    all_attention = all_attention && r.attention_rank_auc.has_value();
  }
  if (all_attention)
    for (const auto& r : reports) values["attention_rank_auc"].push_back(*r.attention_rank_auc);
  if (reports.size() == 1 && warnings) warnings->push_back("aggregate: single run, standard deviation reported as 0");

  std::map<std::string, MetricSummary> out;
  for (const auto& [name, v] : values) {
    MetricSummary s;
    s.n = v.size();
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(s.n);
    if (std::ranges::all_of(v, [&](double x) { return x == v.front(); })) {
      s.mean = v.front();  // keeps identical runs exact
    } else {
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    out[name] = s;
  }
  return out;
}

}  // namespace ssmil
