#include "mtci/model_check.hpp"

#include <algorithm>
#include <vector>

#include "mtci/rng.hpp"

namespace mtci {

ModelGradCheck model_grad_check(const ModelConfig& cfg, std::uint64_t input_seed, double h,
                                double resolution, FdScheme scheme) {
  cfg.validate();
  auto params = init_parameters(cfg);
  Rng rng(input_seed);
  std::vector<double> values(cfg.total_channels() * cfg.spatial * cfg.spatial);
  for (auto& v : values) v = rng.uniform(-1.0, 1.0);
  const Tensor features = Tensor::from_data({cfg.total_channels(), cfg.spatial, cfg.spatial},
                                            std::move(values), true);

  auto named = params.named();
  named.emplace_back("input", features);
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : named) inputs.push_back(t);

  ModelGradCheck out;
  for (const auto& t : inputs) out.checked += t.numel();
  out.mu = grad_check([&] { return forward_features(params, cfg, features).raw[0]; }, inputs, h, resolution, scheme);
  out.sigma = grad_check([&] { return forward_features(params, cfg, features).raw[1]; }, inputs, h, resolution, scheme);

  for (const auto* r : {&out.mu, &out.sigma}) {
    if (r == &out.mu || r->max_rel_error > out.max_rel_error) {
      out.max_rel_error = r->max_rel_error;
      out.worst_name = named[r->worst_input].first;
      out.worst_element = r->worst_element;
      out.worst_analytic = r->analytic;
      out.worst_numeric = r->numeric;
    }
    out.max_rel_error_resolved = std::max(out.max_rel_error_resolved, r->max_rel_error_resolved);
    out.max_abs_error_unresolved = std::max(out.max_abs_error_unresolved, r->max_abs_error_unresolved);
    out.unresolved += r->unresolved;
    out.kink_limited += r->kink_limited;
  }
  return out;
}

}  // namespace mtci
