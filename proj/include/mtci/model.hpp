#pragma once
// Multi-task attention network predicting the mean and the standard
// deviation of opinion scores from a backbone feature map.
//
// The backbone feature map is split along channels into `n_blocks` chunks.
// Each chunk passes through a block of three shared streams (1x1 conv, 3x3
// conv, 3x3 average pool + 1x1 conv). Every stream output p feeds two
// attention-mask subnets, one per task, whose sigmoid masks gate p
// element-wise. Per block, the gated features of each task and the ungated
// shared features are concatenated over streams and globally average pooled.
// Per task the head input is the concatenation over blocks of [task, shared];
// it runs through three shared FC layers, each followed by a per-task mask,
// and a per-task scalar output. sigma_hat passes through softplus.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtci/tensor.hpp"

namespace mtci {

enum class Task : std::size_t { mu = 0, sigma = 1 };
inline constexpr std::size_t kTasks = 2;
inline constexpr std::size_t kStreams = 3;  // 1x1, 3x3, pool + 1x1, in that order
inline constexpr std::size_t kFcLayers = 3;

struct ModelConfig {
  std::size_t n_blocks = 4;
  std::size_t in_channels = 16;  // channels of one block's input chunk
  std::size_t spatial = 5;       // H == W
  std::size_t stream_out_channels = 16;
  std::size_t attn_hidden_channels = 8;
  std::array<std::size_t, kFcLayers> fc_sizes{64, 32, 16};
  /// Constant added to the mu head so an untrained model starts mid-scale.
  double mu_offset = 5.5;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  std::size_t total_channels() const { return n_blocks * in_channels; }
  /// Length of one task's head input: n_blocks * 2 * 3 * stream_out_channels.
  std::size_t head_input_size() const { return n_blocks * 2 * kStreams * stream_out_channels; }

  /// Two blocks of 8 channels on a 5x5 grid; small enough for exhaustive
  /// finite-difference checks.
  static ModelConfig toy();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Closed-form parameter count, with C = in_channels, S = stream_out_channels,
/// A = attn_hidden_channels, B = n_blocks, F1..F3 = fc_sizes, D = 6BS:
///   per block   streams   11CS + 3S
///               masks     6 (2SA + A + S)
///   shared FC             D F1 + F1 + F1 F2 + F2 + F2 F3 + F3
///   head masks            2 sum_k (Fk^2 + Fk)
///   outputs               2 (F3 + 1)
std::size_t parameter_count(const ModelConfig& cfg);

struct Conv {
  Tensor weight;  // [out x in x k x k]
  Tensor bias;    // [out]
};

struct Dense {
  Tensor weight;  // [in x out]
  Tensor bias;    // [1 x out]
};

/// conv1x1 -> relu -> conv1x1 -> sigmoid
struct MaskNet {
  Conv reduce;
  Conv expand;
};

struct BlockParams {
  std::array<Conv, kStreams> streams;
  std::array<std::array<MaskNet, kTasks>, kStreams> masks;  // [stream][task]
};

struct Parameters {
  std::vector<BlockParams> blocks;
  std::array<Dense, kFcLayers> fc;
  std::array<std::array<Dense, kFcLayers>, kTasks> fc_masks;  // [task][layer]
  std::array<Dense, kTasks> heads;

  using Named = std::vector<std::pair<std::string, Tensor>>;
  /// Handles to every parameter under a stable, unique name.
  Named named() const;
  std::size_t count() const;
  void zero_grad();
  /// Independent copy (fresh leaves with the same values).
  Parameters clone() const;
};

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn in `named()` order from
/// std::mt19937_64 seeded with cfg.seed; biases zero.
Parameters init_parameters(const ModelConfig& cfg);

struct StreamOutputs {
  std::array<Tensor, kStreams> shared;                         // p
  std::array<std::array<Tensor, kStreams>, kTasks> masks;      // A, [task][stream]
  std::array<std::array<Tensor, kStreams>, kTasks> task;       // A (.) p, [task][stream]
};

struct BlockFeatures {
  Tensor f_mu;
  Tensor f_sigma;
  Tensor f_shared;
};

struct ActivationBundle {
  std::vector<StreamOutputs> streams;
  std::vector<BlockFeatures> features;
  std::array<Tensor, kTasks> head_input;
};

struct Prediction {
  Tensor mu_hat;     // rank-0
  Tensor sigma_hat;  // rank-0, >= 0
  double mu() const { return mu_hat.item(); }
  double sigma() const { return sigma_hat.item(); }
};

struct ForwardResult {
  Prediction prediction;
  ActivationBundle activations;
  /// Head outputs before the mu offset and the softplus, [task].
  std::array<Tensor, kTasks> raw;
};

StreamOutputs lmlsp_forward(const Parameters& params, const ModelConfig& cfg,
                            std::size_t block_index, const Tensor& x);

BlockFeatures block_features(const StreamOutputs& streams);

ForwardResult forward(const Parameters& params, const ModelConfig& cfg,
                      std::span<const Tensor> blocks_input);

/// Splits a [n_blocks * C x H x W] map and runs forward.
ForwardResult forward_features(const Parameters& params, const ModelConfig& cfg,
                               const Tensor& features);

/// Contiguous, order-preserving channel chunks; differentiable.
std::vector<Tensor> split_features(const Tensor& full, std::size_t n_blocks);

}  // namespace mtci
