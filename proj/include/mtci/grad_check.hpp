#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "mtci/tensor.hpp"

namespace mtci {

struct GradCheckResult {
  double max_rel_error = 0.0;
  /// Location of the worst element: index into the checked inputs, then
  /// flat element index.
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;

  /// Elements with max(|a|, |n|) below the resolution sit under what
  /// central differences resolve in double precision. They are summarized by
  /// absolute error; the rest by relative error.
  double max_rel_error_resolved = 0.0;
  double max_abs_error_unresolved = 0.0;
  std::size_t unresolved = 0;
  /// Elements whose step was shrunk because x +- h changed a relu/abs branch,
  /// and elements still straddling a kink after every halving. The latter
  /// sit on a non-differentiable point and are left out of every error above.
  std::size_t refined = 0;
  std::size_t kink_limited = 0;
};

enum class FdScheme {
  central,  // one central difference per element
  ridders,  // Richardson extrapolation over steps shrinking from h
};

/// Default split between relatively and absolutely judged elements.
inline constexpr double kGradResolution = 1e-8;
inline constexpr int kMaxRefinements = 20;

/// Compares backward() against central differences for every element of
/// every input. `f` must rebuild its graph from the current leaf values on
/// each call and return a single-element tensor. Inputs must be leaves with
/// requires_grad set; their grads are zeroed before and left populated after.
///
/// Relative error per element is |a - n| / max(|a|, |n|, 1e-12). When either
/// perturbed pass takes a different relu/abs branch than the unperturbed one,
/// the step for that element is halved, at most kMaxRefinements times, so the
/// largest step that stays on one linear piece is used.
///
/// With FdScheme::ridders that step starts a Richardson tableau (Ridders'
/// method), which tolerates a much larger h, and so less roundoff, for the
/// same truncation error.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                           double h = 1e-6, double resolution = kGradResolution,
                           FdScheme scheme = FdScheme::central);

/// Single-input form; returns the max relative error.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-6);

}  // namespace mtci
