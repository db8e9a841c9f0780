#pragma once
// Subcommands of the mtci tool. Each writes its result block to `out` as
// key=value lines and throws mtci::Error subclasses on invalid input.

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mtci/error.hpp"

namespace mtci::cli {

/// Invalid flag combination or value; exit code 2 like every input error.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// The finite-difference check ran and did not meet the tolerance.
class CheckFailed : public Error {
 public:
  using Error::Error;
};

struct GenSynthOptions {
  std::string out;
  std::size_t n = 256;
  std::uint64_t seed = 0;
  std::size_t channels = 16;  // per block
  std::size_t blocks = 4;
  std::size_t spatial = 5;
  std::uint64_t n_obs = 210;
  std::array<double, 3> split{0.8, 0.1, 0.1};
};
void gen_synth(const GenSynthOptions& o, std::ostream& out);

struct TrainOptions {
  std::string data;
  std::string out;
  std::optional<std::string> config;
  std::optional<std::size_t> epochs;
  std::optional<double> tau;
  std::optional<double> lambda;
  std::optional<double> alpha_mu;
  std::optional<double> alpha_sigma;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
};
void train(const TrainOptions& o, std::ostream& out);

struct EvalOptions {
  std::string data;
  std::optional<std::string> checkpoint;
  std::optional<std::uint64_t> fresh_seed;
  std::string split = "test";
};
void eval(const EvalOptions& o, std::ostream& out);

struct RankOptions {
  std::string data;
  std::string checkpoint;
  std::vector<std::string> pairs;  // "a:b"
  bool all_pairs = false;
  double z = 1.96;
  std::uint64_t n_obs_assumed = 210;
};
void rank(const RankOptions& o, std::ostream& out);

struct GradCheckOptions {
  std::optional<std::string> config;
  std::uint64_t seed = 0;
  double tolerance = 1e-5;
};
/// Throws CheckFailed after printing the report when the tolerance is missed.
void grad_check(const GradCheckOptions& o, std::ostream& out);

}  // namespace mtci::cli
