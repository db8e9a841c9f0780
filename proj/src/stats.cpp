#include "mtci/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtci/error.hpp"

namespace mtci {

ScoreLabel label_from_votes(const VoteHistogram& votes, std::string item_id) {
  std::uint64_t n = 0;
  double weighted = 0.0;
  for (std::size_t b = 0; b < kScoreBins; ++b) {
    n += votes[b];
    weighted += static_cast<double>(b + 1) * static_cast<double>(votes[b]);
  }
  if (n == 0) throw ConfigError("votes", "histogram for '" + item_id + "' has no votes");
  const double nd = static_cast<double>(n);
  const double mu = weighted / nd;
  double ss = 0.0;
  for (std::size_t b = 0; b < kScoreBins; ++b) {
    const double d = static_cast<double>(b + 1) - mu;
    ss += static_cast<double>(votes[b]) * d * d;
  }
  ScoreLabel label;
  label.item_id = std::move(item_id);
  label.n_obs = n;
  label.votes = votes;
  label.mu = mu;
  label.sigma = std::sqrt(ss / nd);
  return label;
}

void validate_label(const ScoreLabel& label) {
  if (label.n_obs < 1) throw ConfigError("n_obs", "'" + label.item_id + "' has no observers");
  if (!(label.sigma >= 0.0)) throw ConfigError("sigma", "'" + label.item_id + "' has negative sigma");
  if (label.votes) {
    const auto derived = label_from_votes(*label.votes, label.item_id);
    if (derived.n_obs != label.n_obs) {
      throw ConfigError("n_obs", "'" + label.item_id + "' n_obs does not equal the vote count");
    }
    if (std::abs(derived.mu - label.mu) > 1e-9 || std::abs(derived.sigma - label.sigma) > 1e-9) {
      throw ConfigError("votes", "'" + label.item_id + "' mu/sigma disagree with its histogram");
    }
  }
}

Interval ci_mean(const ScoreLabel& label, const CIConfig& cfg) {
  const double half = cfg.z * label.sigma / std::sqrt(static_cast<double>(label.n_obs));
  return {label.mu - half, label.mu + half};
}

double sigma_of_difference(const ScoreLabel& a, const ScoreLabel& b) {
  return std::sqrt(a.sigma * a.sigma / static_cast<double>(a.n_obs) +
                   b.sigma * b.sigma / static_cast<double>(b.n_obs));
}

Interval ci_difference(const ScoreLabel& a, const ScoreLabel& b, const CIConfig& cfg) {
  const double center = std::abs(a.mu - b.mu);
  const double half = cfg.z * sigma_of_difference(a, b);
  return {center - half, center + half};
}

bool significantly_different(const ScoreLabel& a, const ScoreLabel& b, const CIConfig& cfg) {
  const auto ia = ci_mean(a, cfg);
  const auto ib = ci_mean(b, cfg);
  return ia.hi < ib.lo || ib.hi < ia.lo;
}

Verdict compare_items(const ScoreLabel& a, const ScoreLabel& b, const CIConfig& cfg) {
  if (!significantly_different(a, b, cfg)) return Verdict::not_significant;
  return a.mu > b.mu ? Verdict::a_better : Verdict::b_better;
}

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::a_better: return "A>B";
    case Verdict::b_better: return "B>A";
    case Verdict::not_significant: break;
  }
  return "not-significant";
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // positions i..j (0-based) share ranks i+1..j+1
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double pcc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw ShapeError("pcc: length mismatch " + std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()));
  }
  if (x.size() < 2) throw ShapeError("pcc: need at least two samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw UndefinedCorrelation("correlation undefined: " +
                               std::string(sxx == 0.0 ? "first" : "second") + " input is constant");
  }
  return sxy / std::sqrt(sxx * syy);
}

double scc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw ShapeError("scc: length mismatch " + std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()));
  }
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pcc(rx, ry);
}

double binary_accuracy(std::span<const double> gt_mu, std::span<const double> pred_mu,
                       double cutoff) {
  if (gt_mu.size() != pred_mu.size()) {
    throw ShapeError("binary_accuracy: length mismatch " + std::to_string(gt_mu.size()) + " vs " +
                     std::to_string(pred_mu.size()));
  }
  if (gt_mu.empty()) throw ShapeError("binary_accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gt_mu.size(); ++i) {
    if ((gt_mu[i] > cutoff) == (pred_mu[i] > cutoff)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(gt_mu.size());
}

}  // namespace mtci
