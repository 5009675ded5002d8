#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ssmil {

struct GradcheckOptions {
  std::size_t shapes_per_component = 20;
  std::uint64_t seed = 2024;
  double step = 1e-5;
  double rtol = 1e-4;
  double atol = 1e-6;
  std::size_t max_coords_per_tensor = 24;
  /// Components to run; empty runs all.
  std::vector<std::string> scope;
  /// Test hook: perturbs the analytic gradient of this component.
  std::string corrupt;
};

struct GradcheckEntry {
  std::string component;
  std::string covers;
  std::size_t shapes = 0;
  std::size_t coordinates = 0;
  std::size_t skipped_kinks = 0;  // coordinates whose stencil crossed a rectifier kink
  double max_rel_error = 0.0;
  std::string worst;              // tensor holding the worst coordinate
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double seconds = 0.0;

  bool passed() const;
  std::string to_text() const;
};

/// "nt_xent", "swav", "dino", "mil".
const std::vector<std::string>& gradcheck_components();

/// |a - n| / max(|a|, |n|, atol / rtol); below rtol exactly when the pair
/// passes a mixed rtol/atol test.
double gradcheck_error(double analytic, double numeric, double rtol, double atol);

GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace ssmil
