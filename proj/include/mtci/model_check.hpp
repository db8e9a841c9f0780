#pragma once
// Finite-difference check of the whole model: gradients of both raw head
// outputs with respect to every parameter and the input feature map.

#include <cstdint>
#include <string>

#include "mtci/grad_check.hpp"
#include "mtci/model.hpp"

namespace mtci {

/// Initial step of the Richardson tableau.
inline constexpr double kModelCheckStep = 0.1;

struct ModelGradCheck {
  /// Per head, over all parameters followed by the input.
  GradCheckResult mu;
  GradCheckResult sigma;
  std::size_t checked = 0;  // elements per head

  /// Worst literal relative error over both heads and where it occurred.
  double max_rel_error = 0.0;
  std::string worst_name;
  std::size_t worst_element = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  double max_rel_error_resolved = 0.0;
  double max_abs_error_unresolved = 0.0;
  std::size_t unresolved = 0;
  std::size_t kink_limited = 0;
};

/// Parameters are initialized from cfg.seed; the input, U[-1, 1] over
/// [n_blocks * C x H x W], from `input_seed`.
ModelGradCheck model_grad_check(const ModelConfig& cfg, std::uint64_t input_seed,
                                double h = kModelCheckStep, double resolution = kGradResolution,
                                FdScheme scheme = FdScheme::ridders);

}  // namespace mtci
