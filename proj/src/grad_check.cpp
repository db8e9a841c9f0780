#include "mtci/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "mtci/error.hpp"

namespace mtci {

namespace {

// Richardson tableau over steps shrinking by kShrink from `step`, keeping the
// entry with the smallest error estimate. Stops early once the diagonal
// starts to diverge or a step crosses a branch.
template <typename Central>
double ridders(Central& central, double step, double first) {
  constexpr double kShrink = 1.4;
  constexpr double kShrink2 = kShrink * kShrink;
  constexpr int kTable = 10;
  constexpr double kSafe = 2.0;
  double a[kTable][kTable];
  a[0][0] = first;
  double best = first;
  double err = std::numeric_limits<double>::max();
  for (int i = 1; i < kTable; ++i) {
    step /= kShrink;
    if (!central(step, a[0][i])) break;
    double fac = kShrink2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= kShrink2;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= kSafe * err) break;
  }
  return best;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs, double h,
                           double resolution, FdScheme scheme) {
  for (auto& x : inputs) {
    if (!x.is_leaf() || !x.requires_grad()) {
      throw Error("grad_check: inputs must be leaves with requires_grad");
    }
    x.zero_grad();
  }
  std::uint64_t base_branches = 0;
  {
    BranchProbe probe;
    f().backward();
    base_branches = probe.fingerprint();
  }
  auto eval = [&](std::uint64_t& branches) {
    BranchProbe probe;
    const double v = f().item();
    branches = probe.fingerprint();
    return v;
  };

  GradCheckResult result;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor& x = inputs[t];
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto values = x.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      // Central difference at `step`; false when x +- step changes a branch.
      auto central = [&](double step, double& out) {
        // Divide by the step actually taken after rounding x +- step.
        const double up = saved + step;
        const double down = saved - step;
        std::uint64_t up_branches = 0, down_branches = 0;
        values[i] = up;
        const double plus = eval(up_branches);
        values[i] = down;
        const double minus = eval(down_branches);
        values[i] = saved;
        out = (plus - minus) / (up - down);
        return up_branches == base_branches && down_branches == base_branches;
      };

      double numeric = 0.0;
      double step = h;
      bool at_kink = false;
      for (int attempt = 0;; ++attempt) {
        if (central(step, numeric)) break;
        if (attempt == kMaxRefinements) {
          at_kink = true;
          break;
        }
        ++result.refined;
        step /= 2.0;
      }
      if (!at_kink && scheme == FdScheme::ridders) numeric = ridders(central, step, numeric);

      if (at_kink) {
        ++result.kink_limited;
        continue;
      }
      const double magnitude = std::max(std::abs(analytic[i]), std::abs(numeric));
      const double abs_err = std::abs(analytic[i] - numeric);
      const double err = abs_err / std::max(magnitude, 1e-12);
      if (magnitude >= resolution) {
        result.max_rel_error_resolved = std::max(result.max_rel_error_resolved, err);
      } else {
        result.max_abs_error_unresolved = std::max(result.max_abs_error_unresolved, abs_err);
        if (magnitude > 0.0) ++result.unresolved;
      }
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = t;
        result.worst_element = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  Tensor inputs[] = {x};
  return grad_check([&] { return f(x); }, inputs, h).max_rel_error;
}

}  // namespace mtci
