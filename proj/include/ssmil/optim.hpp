#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ssmil/nn.hpp"

namespace ssmil {

/// Owning storage with the same layout as a parameter list. Used for
/// optimizer moments, gradient accumulators and snapshots.
struct ParamBuffers {
  std::vector<std::string> names;
  std::vector<std::vector<std::size_t>> shapes;
  std::vector<std::vector<double>> values;

  static ParamBuffers zeros_like(const ConstParamList& like);
  static ParamBuffers copy_of(const ConstParamList& src);
  ConstParamList view() const;
  ParamList view();
  void copy_into(const ParamList& dst) const;
};

enum class OptimizerKind { sgd_nesterov, sgd_larc, adamw };

std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(std::string_view s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_nesterov;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double larc_eta = 0.001;  // trust coefficient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First-order optimizer with per-tensor state. The parameter list passed to
/// step() must keep the order and shapes given at construction.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const ConstParamList& params);

  /// One update with learning rate lr_now >= 0. Throws TrainingDivergence on
  /// a non-finite gradient before touching any parameter.
  void step(const ParamList& params, const ConstParamList& grads, double lr_now);

  const OptimizerConfig& config() const { return config_; }
  std::size_t step_count() const { return step_count_; }
  const ParamBuffers& first_moment() const { return first_; }

 private:
  OptimizerConfig config_;
  ParamBuffers first_;   // momentum buffer, or Adam m
  ParamBuffers second_;  // Adam v (unused for SGD)
  std::size_t step_count_ = 0;
};

enum class ScheduleKind { cosine, constant };

std::string_view to_string(ScheduleKind k);
ScheduleKind schedule_from_string(std::string_view s);

struct LrSchedule {
  double base_lr = 0.015;
  std::size_t total_steps = 1;
  std::size_t warmup_steps = 0;
  ScheduleKind kind = ScheduleKind::cosine;
};

/// Linear warmup to base_lr, then cosine decay to 0 at total_steps.
double lr_at(const LrSchedule& schedule, std::size_t step);

/// Running sum of gradients; flush() returns their mean and resets.
class GradAccumulator {
 public:
  explicit GradAccumulator(const ConstParamList& like);

  void add(const ConstParamList& grads);
  ParamBuffers flush();
  std::size_t count() const { return count_; }

 private:
  ParamBuffers sum_;
  std::size_t count_ = 0;
};

/// Cosine ramp from `start` to `end` over total_steps (used for EMA momentum
/// and the teacher temperature warmup).
double cosine_ramp(double start, double end, std::size_t step, std::size_t total_steps);

}  // namespace ssmil
