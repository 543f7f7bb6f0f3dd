#pragma once

#include "kcrl/numcore/tape.hpp"

#include <functional>
#include <string>
#include <vector>

namespace kcrl::nc {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor: error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
};

/// Compares tape gradients of a scalar function against central differences,
/// entry by entry over every listed parameter. `fn` must rebuild the whole
/// graph from the parameters' current values on the tape it is handed.
GradCheckReport grad_check(const std::function<Var(Tape&)>& fn,
                           const std::vector<Parameter*>& params,
                           const GradCheckOptions& options = {});

}  // namespace kcrl::nc
