#include "ssmil/optim.hpp"

#include <utility>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "ssmil/error.hpp"

namespace ssmil {

ParamBuffers ParamBuffers::zeros_like(const ConstParamList& like) {
  ParamBuffers b;
  for (const auto& p : like) {
    b.names.push_back(p.name);
    b.shapes.push_back(p.shape);
    b.values.emplace_back(p.values.size(), 0.0);
  }
  return b;
}

ParamBuffers ParamBuffers::copy_of(const ConstParamList& src) {
  ParamBuffers b;
  for (const auto& p : src) {
    b.names.push_back(p.name);
    b.shapes.push_back(p.shape);
    b.values.emplace_back(p.values.begin(), p.values.end());
  }
  return b;
}

ConstParamList ParamBuffers::view() const {
  ConstParamList out;
  for (std::size_t i = 0; i < values.size(); ++i) out.push_back({names[i], shapes[i], values[i]});
  return out;
}

ParamList ParamBuffers::view() {
  ParamList out;
  for (std::size_t i = 0; i < values.size(); ++i) out.push_back({names[i], shapes[i], values[i]});
  return out;
}

void ParamBuffers::copy_into(const ParamList& dst) const {
  require_matching(view(), as_const(dst), "ParamBuffers::copy_into");
  for (std::size_t i = 0; i < values.size(); ++i) std::copy(values[i].begin(), values[i].end(), dst[i].values.begin());
}

std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd_nesterov: return "sgd_nesterov";
    case OptimizerKind::sgd_larc: return "sgd_larc";
    case OptimizerKind::adamw: return "adamw";
  }
  return "sgd_nesterov";
}

OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "sgd_nesterov") return OptimizerKind::sgd_nesterov;
  if (s == "sgd_larc") return OptimizerKind::sgd_larc;
  if (s == "adamw") return OptimizerKind::adamw;
  throw InvalidParameter("unknown optimizer '" + std::string(s) + "'");
}

Optimizer::Optimizer(OptimizerConfig config, const ConstParamList& params)
    : config_(config), first_(ParamBuffers::zeros_like(params)) {
  if (config_.momentum < 0.0 || config_.momentum >= 1.0) throw InvalidParameter("optimizer: momentum must be in [0,1)");
  if (config_.weight_decay < 0.0) throw InvalidParameter("optimizer: weight decay must be nonnegative");
  if (config_.kind == OptimizerKind::adamw) second_ = ParamBuffers::zeros_like(params);
}

void Optimizer::step(const ParamList& params, const ConstParamList& grads, double lr_now) {
  if (!(lr_now >= 0.0) || !std::isfinite(lr_now)) throw InvalidParameter("optimizer: lr must be finite and >= 0");
  require_matching(std::as_const(first_).view(), as_const(params), "Optimizer::step (params)");
  require_matching(std::as_const(first_).view(), grads, "Optimizer::step (grads)");
  for (const auto& g : grads)
    for (double x : g.values)
      if (!std::isfinite(x)) throw TrainingDivergence("optimizer: non-finite gradient in '" + g.name + "'");

  ++step_count_;
  const double wd = config_.weight_decay;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto w = params[t].values;
    auto g = grads[t].values;
    auto& m = first_.values[t];
    const std::size_t n = w.size();

    if (config_.kind == OptimizerKind::adamw) {
      auto& v = second_.values[t];
      const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
      const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
      for (std::size_t i = 0; i < n; ++i) {
        w[i] *= 1.0 - lr_now * wd;
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= lr_now * mhat / (std::sqrt(vhat) + config_.eps);
      }
      continue;
    }

    // SGD family: d = g + wd * w, optionally scaled by the LARC trust ratio.
    double scale = 1.0;
    if (config_.kind == OptimizerKind::sgd_larc && lr_now > 0.0) {
      const double w_norm = norm(std::span<const double>(w.data(), n));
      const double g_norm = norm(g);
      if (w_norm > 0.0 && g_norm > 0.0) {
        const double trust = config_.larc_eta * w_norm / (g_norm + wd * w_norm);
        scale = std::min(trust / lr_now, 1.0);
      }
    }
    const double mu = config_.momentum;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (g[i] + wd * w[i]) * scale;
      m[i] = mu * m[i] + d;
      w[i] -= lr_now * (d + mu * m[i]);
    }
  }
}

std::string_view to_string(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "constant"; }

ScheduleKind schedule_from_string(std::string_view s) {
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "constant") return ScheduleKind::constant;
  throw InvalidParameter("unknown schedule '" + std::string(s) + "'");
}

double lr_at(const LrSchedule& schedule, std::size_t step) {
  if (!(schedule.base_lr > 0.0)) throw InvalidParameter("lr_at: base_lr must be positive");
  if (schedule.warmup_steps > schedule.total_steps) throw InvalidParameter("lr_at: warmup longer than schedule");
  if (step > schedule.total_steps) throw InvalidParameter("lr_at: step beyond total_steps");

  const double base = schedule.base_lr;
  if (step < schedule.warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(schedule.warmup_steps + 1);
  }
  if (schedule.kind == ScheduleKind::constant || schedule.total_steps == schedule.warmup_steps) return base;

  const double progress = static_cast<double>(step - schedule.warmup_steps) /
                          static_cast<double>(schedule.total_steps - schedule.warmup_steps);
  const double lr = base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return lr <= 1e-8 * base ? 0.0 : lr;
}

GradAccumulator::GradAccumulator(const ConstParamList& like) : sum_(ParamBuffers::zeros_like(like)) {}

void GradAccumulator::add(const ConstParamList& grads) {
  require_matching(std::as_const(sum_).view(), grads, "GradAccumulator::add");
  for (std::size_t t = 0; t < grads.size(); ++t) {
    auto& s = sum_.values[t];
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += grads[t].values[i];
  }
  ++count_;
}

ParamBuffers GradAccumulator::flush() {
  if (count_ == 0) throw DegenerateInput("GradAccumulator::flush: nothing accumulated");
  ParamBuffers mean = sum_;
  const double inv = 1.0 / static_cast<double>(count_);
  for (auto& v : mean.values)
    for (double& x : v) x *= inv;
  for (auto& v : sum_.values) std::fill(v.begin(), v.end(), 0.0);
  count_ = 0;
  return mean;
}

double cosine_ramp(double start, double end, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0 || step >= total_steps) return end;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return end - (end - start) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace ssmil
