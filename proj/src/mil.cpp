#include "ssmil/mil.hpp"

#include <cmath>
#include <random>

#include "ssmil/error.hpp"

namespace ssmil {

Matrix FeatureScaler::apply(const Matrix& z) const {
  if (z.cols() != mean.size()) throw ShapeMismatch("FeatureScaler: width mismatch");
  Matrix out = z;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mean[c]) * inv_std[c];
  }
  return out;
}

FeatureScaler FeatureScaler::fit(const Matrix& features, double floor) {
  if (features.rows() < 2) throw DegenerateInput("FeatureScaler::fit: need at least two rows");
  FeatureScaler s;
  s.mean = column_mean(features);
  s.inv_std = Vector(features.cols(), 1.0);
  for (std::size_t c = 0; c < features.cols(); ++c) {
    double ss = 0.0;
    for (std::size_t r = 0; r < features.rows(); ++r) {
      const double d = features(r, c) - s.mean[c];
      ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(features.rows() - 1));
    if (sd >= floor) s.inv_std[c] = 1.0 / sd;
  }
  return s;
}

FeatureScaler FeatureScaler::identity(std::size_t dim) { return {Vector(dim, 0.0), Vector(dim, 1.0)}; }

MilModel init_mil(const MilArch& arch, std::uint64_t seed) {
  if (arch.reduced_dim >= arch.input_dim) throw InvalidParameter("init_mil: reduced dim must be below input dim");
  if (arch.n_classes < 2) throw InvalidParameter("init_mil: need at least two classes");
  MilModel m;
  m.scaler = FeatureScaler::identity(arch.input_dim);
  const std::size_t k = arch.input_dim;
  const std::size_t kr = arch.reduced_dim;
  m.reducer = init_mlp({{k, k, kr, kr, kr}, Activation::relu, Activation::relu}, seed);
  m.attention = init_mlp({{kr, arch.attention_hidden, arch.n_classes}, Activation::tanh, Activation::identity},
                         seed + 1);
  Mlp head = init_mlp({{kr, arch.n_classes}}, seed + 2);
  m.classifier_weight = std::move(head.layers[0].weight);
  m.classifier_bias = std::move(head.layers[0].bias);
  return m;
}

MilModel zeros_like(const MilModel& like) {
  MilModel z;
  z.reducer = zeros_like(like.reducer);
  z.attention = zeros_like(like.attention);
  z.classifier_weight = Matrix(like.classifier_weight.rows(), like.classifier_weight.cols());
  z.classifier_bias = Vector(like.classifier_bias.size());
  return z;
}

ParamList mil_params(MilModel& model) {
  ParamList out;
  append_params(model.reducer, "reducer", out);
  append_params(model.attention, "attention", out);
  out.push_back({"classifier.weight",
                 {model.classifier_weight.rows(), model.classifier_weight.cols()},
                 model.classifier_weight.values()});
  out.push_back({"classifier.bias", {model.classifier_bias.size()}, model.classifier_bias.values()});
  return out;
}

ConstParamList mil_params(const MilModel& model) {
  ConstParamList out;
  append_params(model.reducer, "reducer", out);
  append_params(model.attention, "attention", out);
  out.push_back({"classifier.weight",
                 {model.classifier_weight.rows(), model.classifier_weight.cols()},
                 model.classifier_weight.values()});
  out.push_back({"classifier.bias", {model.classifier_bias.size()}, model.classifier_bias.values()});
  return out;
}

Matrix reduce_instances(const Mlp& reducer, const Matrix& z) { return forward(reducer, z); }

namespace {

// Softmax over rows within each column.
Matrix column_softmax(const Matrix& raw) {
  Matrix a(raw.rows(), raw.cols());
  for (std::size_t c = 0; c < raw.cols(); ++c) {
    double mx = -INFINITY;
    for (std::size_t n = 0; n < raw.rows(); ++n) mx = std::max(mx, raw(n, c));
    double sum = 0.0;
    for (std::size_t n = 0; n < raw.rows(); ++n) {
      a(n, c) = std::exp(raw(n, c) - mx);
      sum += a(n, c);
    }
    for (std::size_t n = 0; n < raw.rows(); ++n) a(n, c) /= sum;
  }
  return a;
}

Vector class_logits(const MilModel& model, const Matrix& pooled) {
  Vector logits(model.n_classes());
  for (std::size_t c = 0; c < logits.size(); ++c)
    logits[c] = dot(model.classifier_weight.row(c), pooled.row(c)) + model.classifier_bias[c];
  return logits;
}

Vector softmax(const Vector& logits) {
  const double lse = log_sum_exp(logits);
  Vector p(logits.size());
  for (std::size_t c = 0; c < p.size(); ++c) p[c] = std::exp(logits[c] - lse);
  return p;
}

void check_bag(const Matrix& instances, const MilModel& model, const Mlp* encoder) {
  if (instances.rows() == 0) throw DegenerateInput("MIL: bag has no instances");
  const std::size_t expected = encoder ? encoder->input_dim() : model.input_dim();
  if (instances.cols() != expected) throw ShapeMismatch("MIL: instance width does not match the model");
  if (encoder && encoder->output_dim() != model.input_dim()) throw ShapeMismatch("MIL: encoder output != reducer input");
}

}  // namespace

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

Matrix attention_scores(const Mlp& attention, const Matrix& z_reduced) {
  if (z_reduced.rows() == 0) throw DegenerateInput("attention_scores: no instances");
  return column_softmax(forward(attention, z_reduced));
}

Matrix pool_bag(const Matrix& attention, const Matrix& z_reduced) {
  if (attention.rows() != z_reduced.rows()) throw ShapeMismatch("pool_bag: instance counts differ");
  return matmul_tn(attention, z_reduced);
}

MilLossResult mil_forward_loss(const Matrix& instances, std::size_t label, const MilModel& model, const Mlp* encoder,
                               bool train_encoder) {
  check_bag(instances, model, encoder);
  if (label >= model.n_classes()) throw InvalidParameter("mil_forward_loss: label out of range");

  MlpCache enc_cache, red_cache, att_cache;
  const Matrix z = encoder ? forward(*encoder, instances, train_encoder ? &enc_cache : nullptr) : instances;
  const Matrix zs = model.scaler.apply(z);
  const Matrix r = forward(model.reducer, zs, &red_cache);
  const Matrix raw = forward(model.attention, r, &att_cache);
  const Matrix a = column_softmax(raw);
  const Matrix pooled = matmul_tn(a, r);  // C x k'
  const Vector logits = class_logits(model, pooled);
  const Vector probs = softmax(logits);

  MilLossResult out;
  out.value = log_sum_exp(logits) - logits[label];
  out.prediction = {logits, probs, a, argmax(logits.values())};

  const std::size_t n_cls = model.n_classes();
  const std::size_t kr = model.reduced_dim();
  out.grads = zeros_like(model);
  Matrix d_pooled(n_cls, kr);
  for (std::size_t c = 0; c < n_cls; ++c) {
    const double dl = probs[c] - (c == label ? 1.0 : 0.0);
    out.grads.classifier_bias[c] = dl;
    auto gw = out.grads.classifier_weight.row(c);
    auto dp = d_pooled.row(c);
    auto p = pooled.row(c);
    auto w = model.classifier_weight.row(c);
    for (std::size_t j = 0; j < kr; ++j) {
      gw[j] = dl * p[j];
      dp[j] = dl * w[j];
    }
  }

  Matrix d_r = matmul(a, d_pooled);         // through the weighted sum
  const Matrix d_a = matmul_nt(r, d_pooled);  // N x C
  Matrix d_raw(a.rows(), a.cols());
  for (std::size_t c = 0; c < n_cls; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < a.rows(); ++n) s += a(n, c) * d_a(n, c);
    for (std::size_t n = 0; n < a.rows(); ++n) d_raw(n, c) = a(n, c) * (d_a(n, c) - s);
  }
  MlpGrads att_grads = backward(model.attention, att_cache, d_raw, true);
  out.grads.attention = std::move(att_grads.params);
  d_r += att_grads.input;

  MlpGrads red_grads = backward(model.reducer, red_cache, d_r, encoder && train_encoder);
  out.grads.reducer = std::move(red_grads.params);

  if (encoder && train_encoder) {
    Matrix d_z = std::move(red_grads.input);
    for (std::size_t n = 0; n < d_z.rows(); ++n) {
      auto row = d_z.row(n);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] *= model.scaler.inv_std[c];
    }
    out.encoder_grads = backward(*encoder, enc_cache, d_z, false).params;
  }
  return out;
}

BagPrediction predict_bag(const Matrix& instances, const MilModel& model, const Mlp* encoder) {
  check_bag(instances, model, encoder);
  const Matrix z = encoder ? forward(*encoder, instances) : instances;
  const Matrix r = forward(model.reducer, model.scaler.apply(z));
  const Matrix a = column_softmax(forward(model.attention, r));
  const Vector logits = class_logits(model, matmul_tn(a, r));
  return {logits, softmax(logits), a, argmax(logits.values())};
}

}  // namespace ssmil
