#pragma once
// Training objective: joint multi-task loss over a mean-score loss (MAE blended
// with a gated confidence-interval ranking loss) and a deviation MAE loss.

#include <cstdint>
#include <span>
#include <vector>

#include "mtci/model.hpp"
#include "mtci/stats.hpp"
#include "mtci/tensor.hpp"

namespace mtci {

struct LossConfig {
  double alpha_mu = 0.6;
  double alpha_sigma = 0.4;
  double lambda = 0.5;  // weight of the CI ranking term inside the mu loss
  /// Gate margin in score units. A pair enters the CI loss only when
  /// z * sigma_of_difference exceeds it; +inf disables the term.
  double tau = 0.2;
  double z = 1.96;

  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct Batch {
  std::vector<Prediction> predictions;
  std::vector<ScoreLabel> labels;
  std::size_t size() const { return predictions.size(); }
};

struct PairSet {
  struct Pair {
    std::size_t a = 0;
    std::size_t b = 0;
    bool gated = false;
  };
  std::vector<Pair> pairs;  // every unordered pair, a < b, lexicographic order
  std::size_t gated_count() const;
};

/// 1 iff z * sigma_of_difference(a, b) > tau (strict); ground truth only.
bool gate_l_ci(const ScoreLabel& a, const ScoreLabel& b, const LossConfig& cfg);

PairSet build_pairs(std::span<const ScoreLabel> labels, const LossConfig& cfg);

/// mean |sigma - sigma_hat|
Tensor loss_sigma(const Batch& batch);

/// mean |mu - mu_hat|
Tensor loss_mae_mu(const Batch& batch);

/// Mean over gated pairs of max(0, | |mu_a - mu_b| - |mu_hat_a - mu_hat_b| |).
/// With no gated pair the result is a constant 0 with no graph history.
Tensor loss_ci(const Batch& batch, const PairSet& pairs, const LossConfig& cfg);

/// (1 - lambda) * MAE(mu) + lambda * loss_ci
Tensor loss_mu(const Batch& batch, const PairSet& pairs, const LossConfig& cfg);

/// alpha_mu * loss_mu + alpha_sigma * loss_sigma
Tensor loss_mtl(const Batch& batch, const PairSet& pairs, const LossConfig& cfg);

/// Every term of loss_mtl, sharing one graph.
struct LossTerms {
  Tensor total;
  Tensor mu;
  Tensor mae_mu;
  Tensor ci;
  Tensor sigma;
};
LossTerms loss_terms(const Batch& batch, const PairSet& pairs, const LossConfig& cfg);

/// Plain double-loop evaluation of the CI loss, independent of the graph.
double loss_ci_oracle(std::span<const double> mus, std::span<const double> mu_hats,
                      std::span<const double> sigmas, std::span<const std::uint64_t> n_obs,
                      const LossConfig& cfg);

}  // namespace mtci
