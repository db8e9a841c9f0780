#include "mtci/losses.hpp"

#include <cmath>

#include "mtci/error.hpp"

namespace mtci {

void LossConfig::validate() const {
  if (!(alpha_mu >= 0)) throw ConfigError("alpha_mu", "must be >= 0");
  if (!(alpha_sigma >= 0)) throw ConfigError("alpha_sigma", "must be >= 0");
  if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("lambda", "must lie in [0, 1]");
  if (!(tau >= 0)) throw ConfigError("tau", "must be >= 0");
  if (!(z > 0)) throw ConfigError("z", "must be > 0");
}

std::size_t PairSet::gated_count() const {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.gated ? 1 : 0;
  return n;
}

bool gate_l_ci(const ScoreLabel& a, const ScoreLabel& b, const LossConfig& cfg) {
  return cfg.z * sigma_of_difference(a, b) > cfg.tau;
}

PairSet build_pairs(std::span<const ScoreLabel> labels, const LossConfig& cfg) {
  PairSet set;
  const std::size_t n = labels.size();
  set.pairs.reserve(n * (n > 0 ? n - 1 : 0) / 2);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      set.pairs.push_back({a, b, gate_l_ci(labels[a], labels[b], cfg)});
  return set;
}

namespace {

void require_non_empty(const Batch& batch, const char* who) {
  if (batch.size() == 0) throw ShapeError(std::string(who) + ": empty batch");
  if (batch.labels.size() != batch.size()) {
    throw ShapeError(std::string(who) + ": " + std::to_string(batch.size()) + " predictions but " +
                     std::to_string(batch.labels.size()) + " labels");
  }
}

template <typename Fn>
Tensor mean_abs_error(const Batch& batch, Fn&& pick) {
  Tensor total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& [pred, target] = pick(i);
    Tensor err = abs(pred - Tensor::scalar(target));
    total = i == 0 ? err : total + err;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

}  // namespace

Tensor loss_sigma(const Batch& batch) {
  require_non_empty(batch, "loss_sigma");
  return mean_abs_error(batch, [&](std::size_t i) {
    return std::pair<const Tensor&, double>(batch.predictions[i].sigma_hat, batch.labels[i].sigma);
  });
}

Tensor loss_mae_mu(const Batch& batch) {
  require_non_empty(batch, "loss_mu");
  return mean_abs_error(batch, [&](std::size_t i) {
    return std::pair<const Tensor&, double>(batch.predictions[i].mu_hat, batch.labels[i].mu);
  });
}

Tensor loss_ci(const Batch& batch, const PairSet& pairs, const LossConfig&) {
  Tensor total;
  std::size_t gated = 0;
  for (const auto& pair : pairs.pairs) {
    if (!pair.gated) continue;
    const auto& la = batch.labels[pair.a];
    const auto& lb = batch.labels[pair.b];
    const Tensor gap_hat = abs(batch.predictions[pair.a].mu_hat - batch.predictions[pair.b].mu_hat);
    // The operand is already nonnegative, so the outer max(0, .) never binds.
    const Tensor term = relu(abs(Tensor::scalar(std::abs(la.mu - lb.mu)) - gap_hat));
    total = gated == 0 ? term : total + term;
    ++gated;
  }
  if (gated == 0) return Tensor::scalar(0.0);
  return scale(total, 1.0 / static_cast<double>(gated));
}

LossTerms loss_terms(const Batch& batch, const PairSet& pairs, const LossConfig& cfg) {
  LossTerms t;
  t.mae_mu = loss_mae_mu(batch);
  t.ci = loss_ci(batch, pairs, cfg);
  t.mu = scale(t.mae_mu, 1.0 - cfg.lambda) + scale(t.ci, cfg.lambda);
  t.sigma = loss_sigma(batch);
  t.total = scale(t.mu, cfg.alpha_mu) + scale(t.sigma, cfg.alpha_sigma);
  return t;
}

Tensor loss_mu(const Batch& batch, const PairSet& pairs, const LossConfig& cfg) {
  return scale(loss_mae_mu(batch), 1.0 - cfg.lambda) + scale(loss_ci(batch, pairs, cfg), cfg.lambda);
}

Tensor loss_mtl(const Batch& batch, const PairSet& pairs, const LossConfig& cfg) {
  return loss_terms(batch, pairs, cfg).total;
}

double loss_ci_oracle(std::span<const double> mus, std::span<const double> mu_hats,
                      std::span<const double> sigmas, std::span<const std::uint64_t> n_obs,
                      const LossConfig& cfg) {
  const std::size_t n = mus.size();
  if (mu_hats.size() != n || sigmas.size() != n || n_obs.size() != n) {
    throw ShapeError("loss_ci_oracle: input lengths differ");
  }
  double total = 0.0;
  std::size_t gated = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double sd = std::sqrt(sigmas[i] * sigmas[i] / static_cast<double>(n_obs[i]) +
                                  sigmas[j] * sigmas[j] / static_cast<double>(n_obs[j]));
      if (!(cfg.z * sd > cfg.tau)) continue;
      const double gap = std::abs(mus[i] - mus[j]);
      const double gap_hat = std::abs(mu_hats[i] - mu_hats[j]);
      total += std::max(0.0, std::abs(gap - gap_hat));
      ++gated;
    }
  }
  return gated == 0 ? 0.0 : total / static_cast<double>(gated);
}

}  // namespace mtci
