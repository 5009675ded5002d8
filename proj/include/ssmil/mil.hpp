#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssmil/linalg.hpp"
#include "ssmil/nn.hpp"

namespace ssmil {

/// One patient: a set of instances sharing a single label.
struct Bag {
  Matrix instances;  // N x feature dim
  std::size_t label = 0;
  std::string bag_id;
  std::vector<std::string> instance_ids;
};

/// Fixed per-feature standardization applied to encoder outputs before the
/// reducer. Fitted once on training embeddings; never trained.
struct FeatureScaler {
  Vector mean;
  Vector inv_std;

  bool empty() const { return mean.empty(); }
  Matrix apply(const Matrix& z) const;
  /// Columns whose standard deviation is below `floor` are centered but not scaled.
  static FeatureScaler fit(const Matrix& features, double floor = 1e-3);
  static FeatureScaler identity(std::size_t dim);
};

struct MilArch {
  std::size_t input_dim = 128;       // k
  std::size_t reduced_dim = 32;      // k'
  std::size_t attention_hidden = 64;
  std::size_t n_classes = 5;         // C
};

/// Reducer g, class-wise attention scorer v and per-class classifier head.
struct MilModel {
  FeatureScaler scaler;
  Mlp reducer;                // k -> k -> k' -> k' -> k', rectifier after every layer
  Mlp attention;              // k' -> hidden -> C, tanh hidden layer
  Matrix classifier_weight;   // C x k'
  Vector classifier_bias;     // C

  std::size_t n_classes() const { return classifier_weight.rows(); }
  std::size_t input_dim() const { return reducer.input_dim(); }
  std::size_t reduced_dim() const { return reducer.output_dim(); }
};

MilModel init_mil(const MilArch& arch, std::uint64_t seed);
MilModel zeros_like(const MilModel& like);

/// Trainable tensors only; the scaler is excluded.
ParamList mil_params(MilModel& model);
ConstParamList mil_params(const MilModel& model);

Matrix reduce_instances(const Mlp& reducer, const Matrix& z);

/// Raw per-instance class scores, softmax-normalized over instances within
/// each class column.
Matrix attention_scores(const Mlp& attention, const Matrix& z_reduced);

/// Row c = sum_n attention(n, c) * z_reduced(n, :).
Matrix pool_bag(const Matrix& attention, const Matrix& z_reduced);

struct BagPrediction {
  Vector logits;
  Vector probabilities;
  Matrix attention;  // N x C
  std::size_t predicted_class = 0;
};

struct MilLossResult {
  double value = 0.0;
  MilModel grads;                     // same shapes as the model; scaler is empty
  std::optional<Mlp> encoder_grads;   // present only for a trainable encoder
  BagPrediction prediction;
};

/// Cross entropy of the bag prediction against `label`.
///
/// With `encoder == nullptr` the rows of `instances` are already encoder
/// outputs. A non-null encoder is run forward; it receives gradients only when
/// `train_encoder` is set.
MilLossResult mil_forward_loss(const Matrix& instances, std::size_t label, const MilModel& model,
                               const Mlp* encoder = nullptr, bool train_encoder = false);

BagPrediction predict_bag(const Matrix& instances, const MilModel& model, const Mlp* encoder = nullptr);

/// Lowest index among the maxima.
std::size_t argmax(std::span<const double> v);

}  // namespace ssmil
