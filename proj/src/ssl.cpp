#include "ssmil/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "ssmil/error.hpp"

namespace ssmil {

const Matrix& LossResult::grad(const std::string& name) const {
  auto it = grads.find(name);
  if (it == grads.end()) throw InvalidParameter("LossResult: no gradient named '" + name + "'");
  return it->second;
}

namespace {

// Pulls d(loss)/d(normalized rows) back through row-wise L2 normalization.
Matrix normalize_backward(const Matrix& raw, const Matrix& unit, const Matrix& d_unit) {
  Matrix d_raw(raw.rows(), raw.cols());
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    const double n = norm(raw.row(r));
    const double proj = dot(unit.row(r), d_unit.row(r));
    auto out = d_raw.row(r);
    auto u = unit.row(r);
    auto du = d_unit.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = (du[c] - u[c] * proj) / n;
  }
  return d_raw;
}

void require_tau(double tau, const char* what) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidParameter(std::string(what) + ": temperature must be positive");
}

}  // namespace

LossResult nt_xent_loss(const ViewPairBatch& batch, double tau) {
  require_tau(tau, "nt_xent_loss");
  if (!batch.z1.same_shape(batch.z2)) throw ShapeMismatch("nt_xent_loss: views differ in shape");
  const std::size_t n = batch.z1.rows();
  const std::size_t d = batch.z1.cols();
  if (n == 0) throw DegenerateInput("nt_xent_loss: empty batch");

  const std::size_t two_n = 2 * n;
  Matrix z(two_n, d);
  std::copy(batch.z1.values().begin(), batch.z1.values().end(), z.values().begin());
  std::copy(batch.z2.values().begin(), batch.z2.values().end(), z.values().begin() + static_cast<std::ptrdiff_t>(n * d));
  const Matrix u = l2_normalize_rows(z);
  Matrix s = matmul_nt(u, u);
  s *= 1.0 / tau;

  // g(i,k) = d(loss)/d(s_ik), zero on the diagonal.
  Matrix g(two_n, two_n);
  double total = 0.0;
  const double inv_anchors = 1.0 / static_cast<double>(two_n);
  for (std::size_t i = 0; i < two_n; ++i) {
    const std::size_t pos = i < n ? i + n : i - n;
    auto row = s.row(i);
    double mx = -INFINITY;
    for (std::size_t k = 0; k < two_n; ++k)
      if (k != i) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < two_n; ++k)
      if (k != i) sum += std::exp(row[k] - mx);
    const double lse = mx + std::log(sum);
    total += lse - row[pos];
    auto grow = g.row(i);
    for (std::size_t k = 0; k < two_n; ++k) {
      if (k == i) continue;
      grow[k] = std::exp(row[k] - lse) * inv_anchors;
    }
    grow[pos] -= inv_anchors;
  }

  Matrix g_sym = g + transpose(g);
  Matrix du = matmul(g_sym, u);
  du *= 1.0 / tau;
  const Matrix dz = normalize_backward(z, u, du);

  LossResult result;
  result.value = total * inv_anchors;
  Matrix dz1(n, d), dz2(n, d);
  std::copy_n(dz.values().begin(), n * d, dz1.values().begin());
  std::copy_n(dz.values().begin() + static_cast<std::ptrdiff_t>(n * d), n * d, dz2.values().begin());
  result.grads.emplace("z1", std::move(dz1));
  result.grads.emplace("z2", std::move(dz2));
  return result;
}

CodeMatrix sinkhorn_codes(const Matrix& scores, double epsilon, std::size_t iters) {
  if (!(epsilon > 0.0)) throw InvalidParameter("sinkhorn_codes: epsilon must be positive");
  if (iters == 0) throw InvalidParameter("sinkhorn_codes: need at least one iteration");
  if (scores.empty()) throw DegenerateInput("sinkhorn_codes: empty score matrix");

  const std::size_t n = scores.rows();
  const std::size_t j = scores.cols();
  const double mx = *std::max_element(scores.values().begin(), scores.values().end());
  Matrix q(n, j);
  for (std::size_t i = 0; i < q.size(); ++i) q.data()[i] = std::exp((scores.data()[i] - mx) / epsilon);

  const double col_target = static_cast<double>(n) / static_cast<double>(j);
  std::vector<double> col(j);
  for (std::size_t it = 0; it < iters; ++it) {
    std::fill(col.begin(), col.end(), 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < j; ++c) col[c] += q(r, c);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < j; ++c) q(r, c) *= col_target / col[c];
    for (std::size_t r = 0; r < n; ++r) {
      auto row = q.row(r);
      double s = 0.0;
      for (double x : row) s += x;
      for (double& x : row) x /= s;
    }
  }
  return {std::move(q)};
}

double marginal_violation(const Matrix& q) {
  const double col_target = static_cast<double>(q.rows()) / static_cast<double>(q.cols());
  double worst = 0.0;
  std::vector<double> col(q.cols(), 0.0);
  for (std::size_t r = 0; r < q.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < q.cols(); ++c) {
      s += q(r, c);
      col[c] += q(r, c);
    }
    worst = std::max(worst, std::abs(s - 1.0));
  }
  for (double c : col) worst = std::max(worst, std::abs(c - col_target));
  return worst;
}

PrototypeBank::PrototypeBank(Matrix c) : c_(std::move(c)) { renormalize(); }

PrototypeBank PrototypeBank::random(std::size_t count, std::size_t dim, std::uint64_t seed) {
  if (count == 0 || dim == 0) throw InvalidParameter("PrototypeBank: empty bank");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix c(count, dim);
  for (double& x : c.values()) x = normal(rng);
  return PrototypeBank(std::move(c));
}

// In place, so views of the storage held by an optimizer stay valid.
void PrototypeBank::renormalize() {
  const Matrix unit = l2_normalize_rows(c_);
  std::copy(unit.values().begin(), unit.values().end(), c_.values().begin());
}

namespace {

struct SwavTerm {
  std::size_t code_view;
  std::size_t pred_view;
};

// Loss and gradients for sum_{pairs} weight * l(z_pred, q_code).
LossResult swav_terms(const std::vector<Matrix>& views, const PrototypeBank& bank, const std::vector<Matrix>& codes,
                      const ViewPairs& pairs, double tau, double weight) {
  require_tau(tau, "swav_loss");
  const Matrix& c = bank.c();
  std::vector<Matrix> unit(views.size());
  std::vector<Matrix> logits(views.size());
  std::vector<Matrix> log_p(views.size());
  std::set<std::size_t> used;
  for (const auto& [code, pred] : pairs) used.insert(pred);
  for (std::size_t v : used) {
    unit[v] = l2_normalize_rows(views[v]);
    logits[v] = matmul_nt(unit[v], c);
    log_p[v] = log_softmax_rows(logits[v], tau);
  }

  LossResult result;
  std::vector<Matrix> d_logits(views.size());
  for (std::size_t v : used) d_logits[v] = Matrix(views[v].rows(), c.rows());

  for (const auto& [code, pred] : pairs) {
    const Matrix& q = codes[code];
    const Matrix& lp = log_p[pred];
    const std::size_t n = lp.rows();
    const double scale = weight / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto qr = q.row(i);
      auto lr = lp.row(i);
      double qsum = 0.0;
      for (std::size_t j = 0; j < qr.size(); ++j) {
        result.value -= scale * qr[j] * lr[j];
        qsum += qr[j];
      }
      auto dl = d_logits[pred].row(i);
      for (std::size_t j = 0; j < qr.size(); ++j) dl[j] += scale * (std::exp(lr[j]) * qsum - qr[j]) / tau;
    }
  }

  Matrix d_c(c.rows(), c.cols());
  for (std::size_t v = 0; v < views.size(); ++v) {
    Matrix dz(views[v].rows(), views[v].cols());
    if (used.count(v)) {
      d_c += matmul_tn(d_logits[v], unit[v]);
      dz = normalize_backward(views[v], unit[v], matmul(d_logits[v], c));
    }
    result.grads.emplace("view" + std::to_string(v), std::move(dz));
  }
  result.grads.emplace("prototypes", std::move(d_c));
  return result;
}

void check_views(const std::vector<Matrix>& views, std::size_t dim, const char* what) {
  if (views.empty()) throw DegenerateInput(std::string(what) + ": no views");
  for (const auto& v : views) {
    if (!v.same_shape(views.front())) throw ShapeMismatch(std::string(what) + ": views differ in shape");
    if (v.cols() != dim) throw ShapeMismatch(std::string(what) + ": embedding dim does not match prototypes");
  }
  if (views.front().rows() == 0) throw DegenerateInput(std::string(what) + ": empty batch");
}

void check_pairs(const ViewPairs& pairs, std::size_t n_views, const char* what) {
  if (pairs.empty()) throw InvalidParameter(std::string(what) + ": no view pairs");
  for (const auto& [a, b] : pairs)
    if (a >= n_views || b >= n_views) throw InvalidParameter(std::string(what) + ": view pair index out of range");
}

}  // namespace

LossResult swav_loss_with_codes(const ViewPairBatch& batch, const PrototypeBank& bank, const Matrix& q1,
                                const Matrix& q2, double tau) {
  check_views({batch.z1, batch.z2}, bank.dim(), "swav_loss");
  if (q1.rows() != batch.z1.rows() || q1.cols() != bank.count() || !q1.same_shape(q2)) {
    throw ShapeMismatch("swav_loss: codes must be N x |J|");
  }
  LossResult r = swav_terms({batch.z1, batch.z2}, bank, {q1, q2}, {{1, 0}, {0, 1}}, tau, 1.0);
  r.grads.emplace("z1", std::move(r.grads.at("view0")));
  r.grads.emplace("z2", std::move(r.grads.at("view1")));
  r.grads.erase("view0");
  r.grads.erase("view1");
  return r;
}

LossResult swav_loss(const ViewPairBatch& batch, const PrototypeBank& bank, const SwavOptions& opts) {
  check_views({batch.z1, batch.z2}, bank.dim(), "swav_loss");
  const Matrix q1 = sinkhorn_codes(matmul_nt(l2_normalize_rows(batch.z1), bank.c()), opts.epsilon, opts.sinkhorn_iters).q;
  const Matrix q2 = sinkhorn_codes(matmul_nt(l2_normalize_rows(batch.z2), bank.c()), opts.epsilon, opts.sinkhorn_iters).q;
  return swav_loss_with_codes(batch, bank, q1, q2, opts.tau);
}

ViewPairs cross_view_pairs(std::size_t n_global, std::size_t n_total) {
  if (n_global == 0 || n_global > n_total) throw InvalidParameter("cross_view_pairs: need 1 <= n_global <= n_total");
  ViewPairs pairs;
  for (std::size_t t = 0; t < n_global; ++t)
    for (std::size_t s = 0; s < n_total; ++s)
      if (s != t) pairs.emplace_back(t, s);
  if (pairs.empty()) throw InvalidParameter("cross_view_pairs: a single view has no partner");
  return pairs;
}

LossResult swav_multicrop_loss(const std::vector<Matrix>& views, const PrototypeBank& bank, const ViewPairs& pairs,
                               const SwavOptions& opts) {
  check_views(views, bank.dim(), "swav_multicrop_loss");
  check_pairs(pairs, views.size(), "swav_multicrop_loss");
  std::vector<Matrix> codes(views.size());
  for (const auto& [code, pred] : pairs) {
    if (codes[code].empty()) {
      codes[code] =
          sinkhorn_codes(matmul_nt(l2_normalize_rows(views[code]), bank.c()), opts.epsilon, opts.sinkhorn_iters).q;
    }
  }
  return swav_terms(views, bank, codes, pairs, opts.tau, 1.0 / static_cast<double>(pairs.size()));
}

void TeacherState::validate() const {
  if (!(tau_s > 0.0) || !(tau_t > 0.0)) throw InvalidParameter("TeacherState: temperatures must be positive");
  if (!(tau_t < tau_s)) throw InvalidParameter("TeacherState: teacher temperature must be below student temperature");
  if (ema_momentum < 0.0 || ema_momentum > 1.0) throw InvalidParameter("TeacherState: ema momentum outside [0,1]");
  if (center_momentum < 0.0 || center_momentum > 1.0) throw InvalidParameter("TeacherState: center momentum outside [0,1]");
}

namespace {

// Adds weight * CE(teacher, student) to `value` and its student gradient to `d_student`.
void dino_term(const Matrix& student_logits, const Matrix& teacher_logits, const TeacherState& state, double weight,
               double& value, Matrix& d_student) {
  const std::size_t n = student_logits.rows();
  const std::size_t k = student_logits.cols();
  Matrix centered = teacher_logits;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = centered.row(r);
    for (std::size_t c = 0; c < k; ++c) row[c] -= state.center[c];
  }
  const Matrix p_t = softmax_rows(centered, state.tau_t);
  const Matrix log_p_s = log_softmax_rows(student_logits, state.tau_s);
  const double scale = weight / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto pt = p_t.row(r);
    auto lps = log_p_s.row(r);
    auto d = d_student.row(r);
    double pt_sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      value -= scale * pt[c] * lps[c];
      pt_sum += pt[c];
    }
    for (std::size_t c = 0; c < k; ++c) d[c] += scale * (std::exp(lps[c]) * pt_sum - pt[c]) / state.tau_s;
  }
}

void check_dino_shapes(const Matrix& student, const Matrix& teacher, const TeacherState& state) {
  if (!student.same_shape(teacher)) throw ShapeMismatch("dino_loss: student and teacher logits differ in shape");
  if (student.cols() != state.center.size()) throw ShapeMismatch("dino_loss: logit width does not match center length");
  if (student.rows() == 0) throw DegenerateInput("dino_loss: empty batch");
}

}  // namespace

LossResult dino_loss(const Matrix& student_logits, const Matrix& teacher_logits, const TeacherState& state) {
  state.validate();
  check_dino_shapes(student_logits, teacher_logits, state);
  LossResult result;
  Matrix d(student_logits.rows(), student_logits.cols());
  dino_term(student_logits, teacher_logits, state, 1.0, result.value, d);
  result.grads.emplace("student_logits", std::move(d));
  return result;
}

LossResult dino_multicrop_loss(const std::vector<Matrix>& student_views, const std::vector<Matrix>& teacher_views,
                               const ViewPairs& pairs, const TeacherState& state) {
  state.validate();
  if (pairs.empty()) throw InvalidParameter("dino_multicrop_loss: no view pairs");
  for (const auto& [t, s] : pairs) {
    if (t >= teacher_views.size() || s >= student_views.size())
      throw InvalidParameter("dino_multicrop_loss: view pair index out of range");
    check_dino_shapes(student_views[s], teacher_views[t], state);
  }
  LossResult result;
  std::vector<Matrix> d;
  for (const auto& v : student_views) d.emplace_back(v.rows(), v.cols());
  const double weight = 1.0 / static_cast<double>(pairs.size());
  for (const auto& [t, s] : pairs) dino_term(student_views[s], teacher_views[t], state, weight, result.value, d[s]);
  for (std::size_t s = 0; s < d.size(); ++s) result.grads.emplace("student" + std::to_string(s), std::move(d[s]));
  return result;
}

TeacherState update_center(TeacherState state, const Matrix& teacher_outputs) {
  if (teacher_outputs.cols() != state.center.size()) throw ShapeMismatch("update_center: width does not match center");
  const Vector mean = column_mean(teacher_outputs);
  const double m = state.center_momentum;
  for (std::size_t c = 0; c < mean.size(); ++c) state.center[c] = m * state.center[c] + (1.0 - m) * mean[c];
  return state;
}

void ema_update(const ParamList& teacher, const ConstParamList& student, double m) {
  if (m < 0.0 || m > 1.0) throw InvalidParameter("ema_update: momentum outside [0,1]");
  require_matching(as_const(teacher), student, "ema_update");
  for (std::size_t t = 0; t < teacher.size(); ++t) {
    auto tv = teacher[t].values;
    auto sv = student[t].values;
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = m * tv[i] + (1.0 - m) * sv[i];
  }
}

}  // namespace ssmil
