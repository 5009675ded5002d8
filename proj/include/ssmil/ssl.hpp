#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ssmil/linalg.hpp"
#include "ssmil/nn.hpp"

namespace ssmil {

/// Embeddings of two augmented views of the same N samples.
struct ViewPairBatch {
  Matrix z1;
  Matrix z2;
};

/// Scalar loss plus gradients keyed by input name ("z1", "z2", "prototypes",
/// "student_logits", "view<i>", ...). Every gradient has its input's shape.
struct LossResult {
  double value = 0.0;
  std::map<std::string, Matrix> grads;

  const Matrix& grad(const std::string& name) const;
};

/// Mean over all 2N anchors of the normalized-temperature cross entropy.
/// Embeddings are L2-normalized internally; the returned gradients include
/// the normalization Jacobian.
LossResult nt_xent_loss(const ViewPairBatch& batch, double tau = 0.1);

/// Soft cluster assignments with balanced marginals.
struct CodeMatrix {
  Matrix q;  // N x |J|
};

/// Sinkhorn-Knopp on exp(scores / epsilon): `iters` rounds of column then row
/// rescaling towards column sums N/|J| and row sums 1. The result is a
/// constant; no gradient flows through it.
CodeMatrix sinkhorn_codes(const Matrix& scores, double epsilon = 0.05, std::size_t iters = 3);

/// Largest absolute deviation of the row sums from 1 and the column sums from N/|J|.
double marginal_violation(const Matrix& q);

/// SwAV cluster centroids, one unit-norm row per prototype.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  explicit PrototypeBank(Matrix c);
  static PrototypeBank random(std::size_t count, std::size_t dim, std::uint64_t seed);

  const Matrix& c() const { return c_; }
  Matrix& mutable_c() { return c_; }
  std::size_t count() const { return c_.rows(); }
  std::size_t dim() const { return c_.cols(); }
  /// Restores the unit-norm invariant after an optimizer step.
  void renormalize();

 private:
  Matrix c_;
};

struct SwavOptions {
  double tau = 0.1;
  double epsilon = 0.05;
  std::size_t sinkhorn_iters = 3;
};

/// Swapped prediction over two views: l(z1, q2) + l(z2, q1), averaged over
/// the batch. Codes come from sinkhorn_codes on normalize(z) c^T.
LossResult swav_loss(const ViewPairBatch& batch, const PrototypeBank& bank, const SwavOptions& opts = {});

/// The same loss with caller-supplied (frozen) codes for each view.
LossResult swav_loss_with_codes(const ViewPairBatch& batch, const PrototypeBank& bank, const Matrix& q1,
                                const Matrix& q2, double tau);

/// (code_view, predicting_view) pairs.
using ViewPairs = std::vector<std::pair<std::size_t, std::size_t>>;

/// Every listed teacher/global view crossed with every other view.
ViewPairs cross_view_pairs(std::size_t n_global, std::size_t n_total);

/// Multi-crop SwAV: codes are computed for every view appearing as a code
/// view; the value is the mean over pairs of l(z_pred, q_code). Gradients are
/// keyed "view<i>" and "prototypes".
LossResult swav_multicrop_loss(const std::vector<Matrix>& views, const PrototypeBank& bank, const ViewPairs& pairs,
                               const SwavOptions& opts = {});

/// DINO teacher side: parameters, running center and temperatures.
struct TeacherState {
  std::vector<Mlp> networks;  // same shapes as the student networks
  Vector center;
  double tau_s = 0.1;
  double tau_t = 0.04;
  double ema_momentum = 0.996;
  double center_momentum = 0.9;

  std::size_t soft_classes() const { return center.size(); }
  void validate() const;
};

/// Cross entropy between the centered, sharpened teacher distribution and
/// the student distribution, averaged over rows. Only "student_logits"
/// receives a gradient.
LossResult dino_loss(const Matrix& student_logits, const Matrix& teacher_logits, const TeacherState& state);

/// Multi-crop DINO: mean of dino_loss over (teacher_view, student_view)
/// pairs. Gradients are keyed "student<i>".
LossResult dino_multicrop_loss(const std::vector<Matrix>& student_views, const std::vector<Matrix>& teacher_views,
                               const ViewPairs& pairs, const TeacherState& state);

/// center' = m * center + (1 - m) * column-mean(teacher_outputs).
TeacherState update_center(TeacherState state, const Matrix& teacher_outputs);

/// theta_t' = m * theta_t + (1 - m) * theta_s for every scalar.
void ema_update(const ParamList& teacher, const ConstParamList& student, double m);

}  // namespace ssmil
