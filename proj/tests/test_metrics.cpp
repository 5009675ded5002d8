#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "ssmil/error.hpp"
#include "metric_oracles.hpp"
#include "ssmil/metrics.hpp"

using namespace ssmil;
using namespace ssmil::oracle;

namespace {

PredictionRecord record(std::size_t truth, std::size_t pred, std::vector<double> p) {
  return {"b", truth, pred, std::move(p)};
}

}  // namespace

TEST(Confusion, Examples) {
  const PredictionSet perfect{2, {record(0, 0, {1, 0}), record(1, 1, {0, 1}), record(1, 1, {0, 1})}};
  const ConfusionMatrix cm = confusion_matrix(perfect);
  EXPECT_EQ(cm.counts, (std::vector<std::vector<std::size_t>>{{1, 0}, {0, 2}}));
  EXPECT_EQ(cm.total(), 3u);

  const PredictionSet single{2, {record(0, 1, {0.4, 0.6})}};
  EXPECT_EQ(confusion_matrix(single).counts, (std::vector<std::vector<std::size_t>>{{0, 1}, {0, 0}}));

  const PredictionSet bad{2, {record(2, 0, {1, 0})}};
  EXPECT_THROW(confusion_matrix(bad), Error);
  EXPECT_THROW(confusion_matrix(PredictionSet{2, {}}), Error);
}

TEST(Confusion, MatchesNaiveCount) {
  std::mt19937_64 rng(1);
  const PredictionSet set = random_set(rng, 20, 4);
  const ConfusionMatrix cm = confusion_matrix(set);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      std::size_t n = 0;
      for (const auto& r : set.records) n += r.true_label == i && r.predicted_class == j;
      EXPECT_EQ(cm.counts[i][j], n);
    }
}

TEST(MacroF1, Examples) {
  const PredictionSet perfect{2, {record(0, 0, {1, 0}), record(1, 1, {0, 1})}};
  EXPECT_DOUBLE_EQ(macro_f1(perfect), 1.0);
  const PredictionSet one_class{2, {record(0, 0, {1, 0}), record(0, 0, {1, 0}), record(1, 0, {1, 0}), record(1, 0, {1, 0})}};
  EXPECT_NEAR(macro_f1(one_class), 1.0 / 3.0, 1e-15);
}

TEST(RocAuc, Examples) {
  const std::vector<std::uint8_t> pos{1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(binary_roc_auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, pos), 1.0);
  EXPECT_DOUBLE_EQ(binary_roc_auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, pos), 0.5);
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8, 0.7, 0.2};
  const std::vector<std::uint8_t> p{0, 0, 1, 1, 1, 0};
  EXPECT_EQ(binary_roc_auc(s, p), pair_auc(s, p));
  EXPECT_THROW(binary_roc_auc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{1, 1}), DegenerateInput);
  EXPECT_THROW(roc_auc_macro(PredictionSet{2, {record(0, 0, {1, 0}), record(0, 0, {1, 0})}}), Error);
}

TEST(AveragePrecision, Examples) {
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.9, 0.8, 0.1}, std::vector<std::uint8_t>{1, 1, 0}), 1.0);
  for (std::size_t n = 2; n <= 12; ++n) {
    std::vector<double> s(n);
    std::iota(s.rbegin(), s.rend(), 1.0);
    std::vector<std::uint8_t> pos(n, 0);
    pos.back() = 1;
    EXPECT_NEAR(average_precision(s, pos), 1.0 / static_cast<double>(n), 1e-15);
  }
  EXPECT_THROW(average_precision(std::vector<double>{0.1}, std::vector<std::uint8_t>{0}), DegenerateInput);
}

TEST(Metrics, AgreeWithBruteForceOnRandomSets) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> n_dist(4, 30), c_dist(2, 5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = c_dist(rng);
    const PredictionSet set = random_set(rng, std::max(n_dist(rng), c + 1), c);
    EXPECT_NEAR(macro_f1(set), naive_macro_f1(set), 1e-12);
    EXPECT_NEAR(roc_auc_macro(set), naive_macro(set, pair_auc, true), 1e-12);
    EXPECT_NEAR(pr_auc_macro(set), naive_macro(set, sweep_ap, false), 1e-12);
  }
}

TEST(RocAuc, InvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(15), t(15);
    std::vector<std::uint8_t> pos(15);
    for (std::size_t i = 0; i < 15; ++i) {
      s[i] = std::round(n(rng) * 4.0) / 4.0;
      t[i] = std::exp(3.0 * s[i]) + 7.0;
      pos[i] = i % 3 == 0;
    }
    std::shuffle(pos.begin(), pos.end(), rng);
    const double a = binary_roc_auc(s, pos);
    EXPECT_NEAR(binary_roc_auc(t, pos), a, 1e-12);
    std::vector<std::uint8_t> flipped(pos.size());
    std::ranges::transform(pos, flipped.begin(), [](std::uint8_t p) -> std::uint8_t { return 1 - p; });
    EXPECT_NEAR(binary_roc_auc(s, flipped), 1.0 - a, 1e-12);
  }
}

TEST(MacroF1, InvariantUnderClassRelabeling) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    PredictionSet set = random_set(rng, 25, 4);
    std::vector<std::size_t> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    PredictionSet relabeled = set;
    for (auto& r : relabeled.records) {
      r.true_label = perm[r.true_label];
      r.predicted_class = perm[r.predicted_class];
      std::vector<double> p(4);
      for (std::size_t c = 0; c < 4; ++c) p[perm[c]] = r.probabilities[c];
      r.probabilities = p;
    }
    EXPECT_NEAR(macro_f1(relabeled), macro_f1(set), 1e-12);
    EXPECT_NEAR(roc_auc_macro(relabeled), roc_auc_macro(set), 1e-12);
  }
}

TEST(Curves, EndpointsAndMonotonicity) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8, 0.7, 0.2, 0.4};
  const std::vector<std::uint8_t> p{0, 0, 1, 1, 1, 0, 1};
  const auto roc = roc_curve(s, p);
  EXPECT_EQ(roc.front().x, 0.0);
  EXPECT_EQ(roc.front().y, 0.0);
  EXPECT_EQ(roc.back().x, 1.0);
  EXPECT_EQ(roc.back().y, 1.0);
  EXPECT_EQ(roc.size(), 7u);  // origin plus six distinct thresholds
  for (std::size_t i = 1; i < roc.size(); ++i) {
    EXPECT_GE(roc[i].x, roc[i - 1].x);
    EXPECT_GE(roc[i].y, roc[i - 1].y);
  }
  double trapezoid = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i) trapezoid += (roc[i].x - roc[i - 1].x) * (roc[i].y + roc[i - 1].y) / 2.0;
  EXPECT_NEAR(trapezoid, binary_roc_auc(s, p), 1e-12);
  const auto pr = pr_curve(s, p);
  EXPECT_EQ(pr.back().x, 1.0);
  EXPECT_NEAR(pr.back().y, 4.0 / 7.0, 1e-15);
}

TEST(AttentionRankAuc, Examples) {
  const std::vector<std::uint8_t> planted{1, 0, 0, 1, 0, 0};
  std::vector<AttentionRow> rows{{"a", 0, 1, 0.5}, {"a", 1, 1, 0.3}, {"a", 2, 1, 0.2},
                                 {"b", 3, 2, 0.6}, {"b", 4, 2, 0.3}, {"b", 5, 2, 0.1}};
  EXPECT_DOUBLE_EQ(attention_rank_auc(rows, planted), 1.0);
  for (auto& r : rows) r.weight = 1.0 / 3.0;
  EXPECT_DOUBLE_EQ(attention_rank_auc(rows, planted), 0.5);

  // bag a: planted 0.3 vs {0.4, 0.2} -> 1 of 2; bag b: planted 0.2 vs {0.2, 0.6} -> 0.5 of 2; bag c has no planted
  const std::vector<std::uint8_t> planted2{1, 0, 0, 1, 0, 0, 0, 0};
  const std::vector<AttentionRow> rows2{{"a", 0, 1, 0.3}, {"a", 1, 1, 0.4}, {"a", 2, 1, 0.2}, {"b", 3, 1, 0.2},
                                        {"b", 4, 1, 0.2}, {"b", 5, 1, 0.6}, {"c", 6, 0, 0.9}, {"c", 7, 0, 0.1}};
  EXPECT_DOUBLE_EQ(attention_rank_auc(rows2, planted2), 1.5 / 4.0);
}

TEST(Evaluate, ReportInvariants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const PredictionSet set = random_set(rng, 30, 5);
    const MetricsReport r = evaluate(set);
    EXPECT_EQ(r.confusion.total(), 30u);
    for (double v : {r.f1_macro, r.roc_auc_macro, r.pr_auc_macro}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(r.per_class.size(), 5u);
  }
  PredictionSet bad{2, {record(0, 0, {0.7, 0.7})}};
  EXPECT_THROW(evaluate(bad), Error);
}

TEST(Aggregate, MeanAndSampleSd) {
  MetricsReport a, b;
  a.f1_macro = 0.8;
  b.f1_macro = 1.0;
  const auto s = aggregate({a, b});
  EXPECT_NEAR(s.at("f1_macro").mean, 0.9, 1e-15);
  EXPECT_NEAR(s.at("f1_macro").sd, 0.1414213562373095, 1e-12);
  EXPECT_EQ(s.at("f1_macro").n, 2u);
  EXPECT_EQ(s.count("attention_rank_auc"), 0u);

  std::vector<std::string> warnings;
  const auto one = aggregate({a}, &warnings);
  EXPECT_EQ(one.at("f1_macro").sd, 0.0);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_EQ(aggregate({a, a, a}).at("f1_macro").sd, 0.0);
  EXPECT_THROW(aggregate({}), DegenerateInput);

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<MetricsReport> fifteen(15);
  std::vector<double> v;
  for (auto& r : fifteen) {
    r.roc_auc_macro = u(rng);
    r.attention_rank_auc = u(rng);
    v.push_back(r.roc_auc_macro);
  }
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / 15.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const auto agg = aggregate(fifteen);
  EXPECT_NEAR(agg.at("roc_auc_macro").mean, mean, 1e-12);
  EXPECT_NEAR(agg.at("roc_auc_macro").sd, std::sqrt(ss / 14.0), 1e-12);
  EXPECT_EQ(agg.at("attention_rank_auc").n, 15u);
}
