#pragma once
// Feature/label ingestion, the FTNS tensor container, dataset splits and the
// synthetic opinion-score generator.
//
// FTNS layout (all integers little-endian u32, values little-endian IEEE-754
// binary64, row-major):
//
//   "FTNS" | version = 1 | entry count
//   per entry: name length | UTF-8 name | rank | extent * rank | values

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mtci/kv.hpp"
#include "mtci/stats.hpp"
#include "mtci/tensor.hpp"

namespace mtci {

inline constexpr std::uint32_t kFtnsVersion = 1;

struct TensorEntry {
  std::string name;
  Shape shape;  // empty for a scalar
  std::vector<double> data;
  friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

std::vector<std::uint8_t> encode_tensors(std::span<const TensorEntry> entries);
/// Throws FormatError (bad magic, unsupported version, truncated payload,
/// duplicate name, trailing bytes) carrying the offending byte offset.
std::vector<TensorEntry> decode_tensors(std::span<const std::uint8_t> bytes);

void write_tensor_file(const std::filesystem::path& path, std::span<const TensorEntry> entries);
std::vector<TensorEntry> read_tensor_file(const std::filesystem::path& path);

/// Stores text as a rank-1 tensor of byte values.
TensorEntry text_entry(std::string name, std::string_view text);
std::string entry_text(const TensorEntry& entry);

/// Parses a comma-separated label table whose header is either
/// `id,n_obs,mu,sigma` or `id,n_obs,v1,...,v10`. Errors carry 1-based rows.
std::vector<ScoreLabel> parse_labels(std::istream& in);
std::vector<ScoreLabel> load_labels(const std::filesystem::path& path);
/// Histogram form when every label has votes, direct form otherwise.
void write_labels(const std::filesystem::path& path, std::span<const ScoreLabel> labels);

enum class Split : std::uint8_t { train, val, test };
const char* split_name(Split s);
Split parse_split(const std::string& name);

struct DatasetItem {
  std::string id;
  Tensor features;  // [C_total x H x W]
  ScoreLabel label;
  Split split = Split::train;
};

struct Dataset {
  std::vector<DatasetItem> items;

  /// Unique ids, one shared feature shape; throws ConfigError otherwise.
  void validate() const;
  std::vector<const DatasetItem*> subset(Split s) const;
  bool has_split(Split s) const { return !subset(s).empty(); }
  const Shape& feature_shape() const;
};

/// Writes features.ftns, labels.csv and splits.csv into `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
/// Reads a directory written by save_dataset; splits.csv is optional (all
/// items become train). Feature and label ids must match one-to-one.
Dataset load_dataset(const std::filesystem::path& dir);

/// Deterministic shuffled partition. Train and val sizes are the rounded
/// fractions of the item count, test takes the remainder.
Dataset split_dataset(Dataset ds, std::array<double, 3> fractions, std::uint64_t seed);

struct SynthSpec {
  std::size_t n_items = 256;
  std::size_t channels = 64;  // C_total
  std::size_t spatial = 5;
  std::uint64_t seed = 0;
  std::uint64_t n_obs = 210;
  double mu_center = 5.5;
  double mu_spread = 1.0;
  double sigma_min = 0.3;
  double sigma_max = 2.5;

  void validate() const;
  KeyValues to_kv() const;
};

struct SyntheticData {
  Dataset dataset;
  std::vector<double> latent_mu;
  std::vector<double> latent_sigma;
};

/// Features ~ U[-1, 1]. With g = GAP(features) and k = sqrt(9HW / C) (which
/// makes w.g unit-variance for w ~ U[-1, 1]^C):
///   mu*    = clip(mu_center + mu_spread * k * w_mu.g, 1.5, 9.5)
///   sigma* = sigma_min + (sigma_max - sigma_min) * (1 - exp(-softplus(k * w_sigma.g)))
/// Each of the n_obs votes is round(N(mu*, sigma*)) clipped to 1..10.
SyntheticData generate_synthetic(const SynthSpec& spec);

}  // namespace mtci
