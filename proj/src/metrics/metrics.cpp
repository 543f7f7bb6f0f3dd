#include "kcrl/metrics.hpp"

#include "kcrl/error.hpp"
#include "kcrl/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kcrl::metrics {

namespace {

// Mid-ranks (1-based) with ties sharing their average rank.
std::vector<double> mid_ranks(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> ranks(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::vector<double> auc_contributions(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  std::vector<double> out(scores.size(), 0.0);
  double pos = 0.0;
  for (int y : labels) pos += y ? 1.0 : 0.0;
  const double neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0.0 || neg == 0.0) {
    if (!labels.empty()) {
      for (double& v : out) v = 0.5 / static_cast<double>(out.size());
    }
    return out;
  }
  // A positive of mid-rank r outranks (r - 1) - (positives below it) examples;
  // summing r - (pos + 1) / 2 over positives gives the usual U statistic.
  const auto ranks = mid_ranks(scores);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) out[i] = (ranks[i] - (pos + 1.0) / 2.0) / (pos * neg);
  }
  return out;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  const auto parts = auc_contributions(scores, labels);
  return std::accumulate(parts.begin(), parts.end(), 0.0);
}

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

Interval bootstrap_mean_ci(std::span<const double> v, double level, int resamples, std::uint64_t seed) {
  if (v.empty()) throw DataError("bootstrap of an empty sample");
  if (!(level > 0.0 && level < 1.0) || resamples < 1) throw ConfigError("bootstrap needs 0 < level < 1 and resamples >= 1");
  Rng rng(derive_seed(seed, 0xB007));
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (double& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[uniform_index(rng, v.size())];
    m = s / static_cast<double>(v.size());
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  auto pick = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::clamp(std::floor(q * static_cast<double>(resamples)), 0.0,
                                                         static_cast<double>(resamples - 1)));
    return means[idx];
  };
  return {pick(alpha), pick(1.0 - alpha)};
}

}  // namespace kcrl::metrics
