#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ssmil/error.hpp"
#include "ssmil/mil.hpp"
#include "ssmil/nn.hpp"
#include "test_util.hpp"

using namespace ssmil;

namespace {

MilArch small_arch() { return {.input_dim = 8, .reduced_dim = 4, .attention_hidden = 6, .n_classes = 3}; }

Matrix rows_of(const Matrix& m, const std::vector<std::size_t>& order) {
  Matrix out(order.size(), m.cols());
  for (std::size_t i = 0; i < order.size(); ++i) std::ranges::copy(m.row(order[i]), out.row(i).begin());
  return out;
}

}  // namespace

TEST(Mil, ReducerAndAttentionShapes) {
  const MilModel m = init_mil(small_arch(), 1);
  std::mt19937_64 rng(1);
  for (std::size_t n : {1u, 2u, 17u}) {
    const Matrix r = reduce_instances(m.reducer, test::random_matrix(n, 8, rng));
    EXPECT_EQ(r.rows(), n);
    EXPECT_EQ(r.cols(), 4u);
    const Matrix a = attention_scores(m.attention, r);
    EXPECT_EQ(a.rows(), n);
    EXPECT_EQ(a.cols(), 3u);
  }
  const Matrix zero = reduce_instances(m.reducer, Matrix(3, 8));
  for (double v : zero.values()) EXPECT_GE(v, 0.0);
  EXPECT_THROW(attention_scores(m.attention, Matrix(0, 4)), DegenerateInput);
  EXPECT_THROW(predict_bag(Matrix(2, 7), m), ShapeMismatch);
  EXPECT_THROW(init_mil({.input_dim = 4, .reduced_dim = 4}, 1), InvalidParameter);
}

TEST(Mil, AttentionExamples) {
  const MilModel m = init_mil(small_arch(), 2);
  std::mt19937_64 rng(2);
  const Matrix one = attention_scores(m.attention, test::random_matrix(1, 4, rng));
  for (double v : one.values()) EXPECT_DOUBLE_EQ(v, 1.0);

  Matrix same(2, 4);
  const Vector row = test::random_vector(4, rng);
  for (std::size_t r = 0; r < 2; ++r) std::ranges::copy(row.values(), same.row(r).begin());
  const Matrix half = attention_scores(m.attention, same);
  for (double v : half.values()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(Mil, AttentionColumnsAreDistributions) {
  const MilModel m = init_mil(small_arch(), 3);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix a = attention_scores(m.attention, test::random_matrix(1 + trial % 9, 4, rng, 3.0));
    for (std::size_t c = 0; c < a.cols(); ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < a.rows(); ++n) {
        EXPECT_GE(a(n, c), 0.0);
        s += a(n, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Mil, PoolingMatchesWeightedSum) {
  std::mt19937_64 rng(4);
  const Matrix r = test::random_matrix(6, 4, rng);
  Matrix a = test::random_matrix(6, 3, rng);
  const Matrix pooled = pool_bag(a, r);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t n = 0; n < 6; ++n) s += a(n, c) * r(n, j);
      EXPECT_NEAR(pooled(c, j), s, 1e-12);
    }
  EXPECT_THROW(pool_bag(Matrix(5, 3), r), ShapeMismatch);
}

TEST(Mil, ZeroClassifierGivesUniformPrediction) {
  MilModel m = init_mil(small_arch(), 5);
  std::fill(m.classifier_weight.values().begin(), m.classifier_weight.values().end(), 0.0);
  std::mt19937_64 rng(5);
  const auto res = mil_forward_loss(test::random_matrix(5, 8, rng), 1, m);
  EXPECT_NEAR(res.value, std::log(3.0), 1e-12);
  for (double p : res.prediction.probabilities.values()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);
  EXPECT_EQ(res.prediction.predicted_class, 0u);
  EXPECT_THROW(mil_forward_loss(test::random_matrix(5, 8, rng), 3, m), InvalidParameter);
}

TEST(Mil, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    MilModel m = init_mil(small_arch(), seed);
    const Matrix x = test::random_matrix(7, 8, rng);
    m.scaler = FeatureScaler::fit(x);
    const std::size_t label = seed % 3;
    const auto res = mil_forward_loss(x, label, m);
    const ParamList params = mil_params(m);
    const ConstParamList grads = mil_params(res.grads);
    ASSERT_EQ(params.size(), grads.size());
    for (std::size_t t = 0; t < params.size(); ++t) {
      const auto num = test::numeric_grad(params[t].values, [&] { return mil_forward_loss(x, label, m).value; }, 1e-6);
      EXPECT_LT(test::max_rel_error(grads[t].values, num), 1e-4) << params[t].name;
    }
  }
}

TEST(Mil, EncoderGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  Mlp enc = init_mlp({{5, 10, 8}, Activation::tanh, Activation::tanh}, 21);
  MilModel m = init_mil(small_arch(), 22);
  const Matrix x = test::random_matrix(4, 5, rng);
  m.scaler = FeatureScaler::fit(forward(enc, x));
  const auto res = mil_forward_loss(x, 2, m, &enc, true);
  ASSERT_TRUE(res.encoder_grads.has_value());
  const ParamList params = params_of(enc, "enc");
  const ConstParamList grads = params_of(*res.encoder_grads, "enc");
  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto num = test::numeric_grad(params[t].values, [&] { return mil_forward_loss(x, 2, m, &enc, true).value; }, 1e-6);
    EXPECT_LT(test::max_rel_error(grads[t].values, num), 1e-4) << params[t].name;
  }
}

TEST(Mil, FrozenEncoderReceivesNoGradient) {
  std::mt19937_64 rng(8);
  const Mlp enc = init_mlp({{5, 8}, Activation::relu, Activation::tanh}, 31);
  const MilModel m = init_mil(small_arch(), 32);
  const Matrix x = test::random_matrix(4, 5, rng);
  const auto frozen = mil_forward_loss(x, 0, m, &enc, false);
  EXPECT_FALSE(frozen.encoder_grads.has_value());
  const auto precomputed = mil_forward_loss(forward(enc, x), 0, m);
  EXPECT_NEAR(frozen.value, precomputed.value, 1e-14);
}

TEST(Mil, PermutationAndDuplicationInvariance) {
  const MilModel m = init_mil(small_arch(), 9);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + trial % 10;
    const Matrix x = test::random_matrix(n, 8, rng);
    const BagPrediction base = predict_bag(x, m);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), rng);
    const BagPrediction shuffled = predict_bag(rows_of(x, order), m);

    std::vector<std::size_t> twice(order);
    twice.insert(twice.end(), order.begin(), order.end());
    const BagPrediction doubled = predict_bag(rows_of(x, twice), m);

    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_NEAR(shuffled.logits[c], base.logits[c], 1e-9);
      EXPECT_NEAR(doubled.logits[c], base.logits[c], 1e-9);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(shuffled.attention(i, c), base.attention(order[i], c), 1e-12);
  }
}

TEST(Mil, DeterministicForSeed) {
  const MilModel a = init_mil(small_arch(), 10);
  const MilModel b = init_mil(small_arch(), 10);
  const MilModel c = init_mil(small_arch(), 11);
  const ConstParamList pa = mil_params(a), pb = mil_params(b), pc = mil_params(c);
  bool any_diff = false;
  for (std::size_t t = 0; t < pa.size(); ++t) {
    EXPECT_TRUE(std::ranges::equal(pa[t].values, pb[t].values)) << pa[t].name;
    any_diff = any_diff || !std::ranges::equal(pa[t].values, pc[t].values);
  }
  EXPECT_TRUE(any_diff);
  std::mt19937_64 rng(10);
  const Matrix x = test::random_matrix(5, 8, rng);
  EXPECT_EQ(predict_bag(x, a).logits.values()[0], predict_bag(x, b).logits.values()[0]);
}

TEST(FeatureScaler, StandardizesColumns) {
  std::mt19937_64 rng(11);
  Matrix x = test::random_matrix(50, 3, rng, 4.0);
  for (std::size_t r = 0; r < 50; ++r) x(r, 2) = 7.0;
  const FeatureScaler s = FeatureScaler::fit(x);
  const Matrix y = s.apply(x);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, ss = 0.0;
    for (std::size_t r = 0; r < 50; ++r) mean += y(r, c) / 50.0;
    for (std::size_t r = 0; r < 50; ++r) ss += (y(r, c) - mean) * (y(r, c) - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(ss / 49.0, 1.0, 1e-12);
  }
  for (std::size_t r = 0; r < 50; ++r) EXPECT_EQ(y(r, 2), 0.0);
  EXPECT_THROW(FeatureScaler::fit(Matrix(1, 3)), DegenerateInput);
}
