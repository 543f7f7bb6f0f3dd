#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace kcrl::metrics {

/// Area under the ROC curve by the rank-sum statistic; ties count one half.
/// Returns 0.5 when either class is absent.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Per-example share of the AUC: for a positive, the fraction of negatives it
/// outranks (ties one half) divided by the number of positives; zero for
/// negatives. The shares sum to auc().
std::vector<double> auc_contributions(std::span<const double> scores, std::span<const int> labels);

double mean(std::span<const double> v);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap interval of the mean.
Interval bootstrap_mean_ci(std::span<const double> v, double level, int resamples, std::uint64_t seed);

}  // namespace kcrl::metrics
