#include "kcrl/numcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace kcrl::nc {

namespace {

double evaluate(const std::function<Var(Tape&)>& fn) {
  Tape tape;
  return fn(tape).scalar();
}

}  // namespace

GradCheckReport grad_check(const std::function<Var(Tape&)>& fn,
                           const std::vector<Parameter*>& params,
                           const GradCheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = fn(tape);
    tape.backward(out);
  }
  GradCheckReport report;
  for (Parameter* p : params) {
    const Matrix analytic = p->grad;
    for (Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + options.step;
      const double plus = evaluate(fn);
      x = saved - options.step;
      const double minus = evaluate(fn);
      x = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.entries_checked;
      if (rel > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = std::max(rel, report.max_rel_error);
        if (rel >= report.max_rel_error) {
          report.worst_param = p->name;
          report.worst_index = i;
          report.worst_analytic = a;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace kcrl::nc
