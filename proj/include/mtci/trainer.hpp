#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtci/data.hpp"
#include "mtci/kv.hpp"
#include "mtci/losses.hpp"
#include "mtci/model.hpp"

namespace mtci {

struct TrainConfig {
  double initial_lr = 1e-4;
  std::size_t lr_decay_every = 20;  // epochs
  double lr_decay_factor = 10.0;
  std::size_t batch_size = 16;
  std::size_t epochs = 60;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double acc_cutoff = 5.0;
  std::uint64_t seed = 0;
  LossConfig loss;
  ModelConfig model;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Every field of `cfg` as `model.*`, `loss.*` and `train.*` keys.
KeyValues config_to_kv(const TrainConfig& cfg);
/// Overrides fields of `base` with the keys present in `kv`; unknown keys
/// raise ConfigError.
TrainConfig config_from_kv(const KeyValues& kv, TrainConfig base = {});
ModelConfig model_config_from_kv(const KeyValues& kv, ModelConfig base = {});

struct Model {
  ModelConfig cfg;
  Parameters params;
};

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static OptimizerState for_params(std::span<const Tensor> params);
  static OptimizerState for_params(const Parameters& params);
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected ADAM update from the accumulated grads, which are zeroed
/// afterwards. Throws ShapeError when `state` does not mirror `params`.
void adam_step(std::span<Tensor> params, OptimizerState& state, double lr, const AdamHyper& hyper = {});
void adam_step(Parameters& params, OptimizerState& state, double lr, const AdamHyper& hyper = {});

/// initial_lr / decay_factor ^ floor(epoch / decay_every)
double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

/// Item visiting order for one epoch: a permutation of [0, n) seeded by
/// (seed, epoch) only, so resumed runs reproduce it.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t steps = 0;
  /// Means over the epoch's batches.
  double total = 0.0;
  double mae_mu = 0.0;
  double ci = 0.0;
  double sigma = 0.0;
  std::size_t pairs = 0;
  std::size_t gated_pairs = 0;
};

/// One pass over `items` in epoch_order; each batch runs forward, the joint
/// loss, backward and one adam_step. Tail batches of one item contribute a
/// zero CI term. With lambda == 0 no pairs are built, so the CI term and the
/// pair counts are 0.
EpochMetrics train_epoch(Model& model, std::span<const DatasetItem* const> items,
                         const TrainConfig& cfg, OptimizerState& state, std::size_t epoch);

struct Predictions {
  std::vector<double> mu;
  std::vector<double> sigma;
};
Predictions predict(const Model& model, std::span<const DatasetItem* const> items);

/// A correlation is absent when undefined (constant input); `notes` says why.
struct EvalReport {
  std::size_t n = 0;
  std::optional<double> pcc_mu, scc_mu, pcc_sigma, scc_sigma;
  double acc = 0.0;
  double mae_mu = 0.0;
  double mae_sigma = 0.0;
  /// Mean of z * sigma_hat / sqrt(n_obs) with each item's own n_obs.
  double mean_ci_half_width = 0.0;
  std::vector<std::string> notes;

  KeyValues to_kv() const;
};

/// Scores `pred` (aligned with `items`) against the items' labels.
EvalReport evaluate_predictions(const Predictions& pred, std::span<const DatasetItem* const> items,
                                const LossConfig& loss, double cutoff = 5.0);
EvalReport evaluate(const Model& model, std::span<const DatasetItem* const> items,
                    const LossConfig& loss, double cutoff = 5.0);

struct Checkpoint {
  TrainConfig cfg;
  Parameters params;
  OptimizerState state;
  std::size_t epochs_done = 0;
};

/// FTNS file: `__config__` (key=value text), `__epochs_done__`,
/// `__adam_step__`, one entry per parameter, and `adam.m/<name>`,
/// `adam.v/<name>` moment buffers.
void save_checkpoint(const std::filesystem::path& path, const Parameters& params,
                     const TrainConfig& cfg, const OptimizerState& state, std::size_t epochs_done);
/// Validates every parameter's shape against the stored ModelConfig.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// As above, and throws ConfigError if the stored ModelConfig differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

struct FitResult {
  std::vector<EpochMetrics> history;
  std::vector<EvalReport> selection;  // per epoch, on the selection split
  std::size_t best_epoch = 0;
  double best_scc_mu = 0.0;
};

struct FitHooks {
  std::function<void(const EpochMetrics&, const EvalReport&)> on_epoch;
  /// Called when the selection SCC(mu) improves.
  std::function<void(const Model&, const OptimizerState&, std::size_t epochs_done)> on_best;
};

/// Trains epochs [start_epoch, cfg.epochs). Model selection uses the best
/// SCC(mu) on the val split, falling back to train when val is empty.
FitResult fit(Model& model, const Dataset& ds, const TrainConfig& cfg, OptimizerState& state,
              std::size_t start_epoch = 0, const FitHooks& hooks = {});

}  // namespace mtci
