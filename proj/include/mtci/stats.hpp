#pragma once
// Opinion-score statistics: confidence intervals of mean scores and of score
// differences, significance decisions, and the correlation/accuracy metrics.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mtci {

inline constexpr std::size_t kScoreBins = 10;  // integer scores 1..10
using VoteHistogram = std::array<std::uint64_t, kScoreBins>;

/// Ground-truth opinion statistics for one item. `sigma` is the population
/// standard deviation of the votes.
struct ScoreLabel {
  std::string item_id;
  std::uint64_t n_obs = 1;
  std::optional<VoteHistogram> votes;
  double mu = 0.0;
  double sigma = 0.0;
};

struct CIConfig {
  double z = 1.96;  // two-sided 95 %
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double half_width() const { return (hi - lo) / 2.0; }
};

/// mu and population sigma of a vote histogram; throws ConfigError when empty.
ScoreLabel label_from_votes(const VoteHistogram& votes, std::string item_id);

/// Checks the ScoreLabel invariants, throwing ConfigError on violation.
void validate_label(const ScoreLabel& label);

/// mu +- z * sigma / sqrt(n_obs)
Interval ci_mean(const ScoreLabel& label, const CIConfig& cfg = {});

/// sqrt(sigma_a^2 / n_a + sigma_b^2 / n_b)
double sigma_of_difference(const ScoreLabel& a, const ScoreLabel& b);

/// |mu_a - mu_b| +- z * sigma_of_difference(a, b). The lower bound is not
/// clamped and may be negative.
Interval ci_difference(const ScoreLabel& a, const ScoreLabel& b, const CIConfig& cfg = {});

/// True iff the two mean-score intervals are disjoint.
bool significantly_different(const ScoreLabel& a, const ScoreLabel& b, const CIConfig& cfg = {});

enum class Verdict { a_better, b_better, not_significant };

/// Disjoint mean-score intervals decide the order; overlap means no verdict.
Verdict compare_items(const ScoreLabel& a, const ScoreLabel& b, const CIConfig& cfg = {});
/// "A>B", "B>A" or "not-significant".
const char* verdict_name(Verdict v);

/// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> values);

/// Pearson correlation. Throws UndefinedCorrelation if either input is
/// constant and ShapeError on length mismatch or fewer than two samples.
double pcc(std::span<const double> x, std::span<const double> y);

/// Spearman correlation: pcc over average ranks.
double scc(std::span<const double> x, std::span<const double> y);

/// Fraction of items whose predicted and true scores fall on the same side of
/// `cutoff`. A score equal to the cutoff counts as "not above".
double binary_accuracy(std::span<const double> gt_mu, std::span<const double> pred_mu,
                       double cutoff = 5.0);

}  // namespace mtci
