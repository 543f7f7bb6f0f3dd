#include "kcrl/numcore/optim.hpp"

#include "kcrl/error.hpp"

#include <cmath>

namespace kcrl::nc {

AdamState make_adam_state(const std::vector<Parameter*>& params, const AdamConfig& config) {
  AdamState s;
  s.config = config;
  for (const Parameter* p : params) {
    s.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    s.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  return s;
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state) {
  if (params.size() != state.first_moment.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters vs " +
                         std::to_string(state.first_moment.size()) + " moment slots");
  }
  double sq_norm = 0.0;
  for (const Parameter* p : params) {
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) {
      throw DimensionError("adam_step: grad " + shape_str(p->grad) + " vs value " +
                           shape_str(p->value) + " for " + p->name);
    }
    for (Index i = 0; i < p->grad.size(); ++i) {
      const double g = p->grad.data()[i];
      if (!std::isfinite(g)) {
        throw TrainingError("non-finite gradient in " + p->name + " at entry " + std::to_string(i) +
                            " (step " + std::to_string(state.step + 1) + ")");
      }
      sq_norm += g * g;
    }
  }
  const AdamConfig& c = state.config;
  double clip = 1.0;
  if (c.max_grad_norm > 0.0) {
    const double norm = std::sqrt(sq_norm);
    if (norm > c.max_grad_norm) clip = c.max_grad_norm / norm;
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Matrix& m = state.first_moment[k];
    Matrix& v = state.second_moment[k];
    for (Index i = 0; i < p.value.size(); ++i) {
      const double g = clip * p.grad.data()[i];
      double& mi = m.data()[i];
      double& vi = v.data()[i];
      mi = c.beta1 * mi + (1.0 - c.beta1) * g;
      vi = c.beta2 * vi + (1.0 - c.beta2) * g * g;
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p.value.data()[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

void init_uniform(Parameter& p, Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
  p.zero_grad();
}

void soft_update(const std::vector<Parameter*>& online, const std::vector<Parameter*>& target,
                 double tau) {
  if (online.size() != target.size()) {
    throw DimensionError("soft_update: parameter lists differ in length");
  }
  for (std::size_t k = 0; k < online.size(); ++k) {
    if (online[k]->value.rows() != target[k]->value.rows() ||
        online[k]->value.cols() != target[k]->value.cols()) {
      throw DimensionError("soft_update: " + shape_str(online[k]->value) + " vs " +
                           shape_str(target[k]->value));
    }
    if (tau == 1.0) {
      target[k]->value = online[k]->value;
    } else {
      target[k]->value = tau * online[k]->value + (1.0 - tau) * target[k]->value;
    }
  }
}

}  // namespace kcrl::nc
