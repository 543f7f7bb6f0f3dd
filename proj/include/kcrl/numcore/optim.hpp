#pragma once

#include "kcrl/numcore/tape.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace kcrl::nc {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double max_grad_norm = 0.0;  // global-norm clipping; 0 disables
};

struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::int64_t step = 0;
  AdamConfig config;
};

AdamState make_adam_state(const std::vector<Parameter*>& params, const AdamConfig& config);

/// One bias-corrected adaptive-moment update using each parameter's grad.
/// Throws TrainingError (naming parameter and entry) on a non-finite gradient,
/// leaving parameters and state untouched.
void adam_step(const std::vector<Parameter*>& params, AdamState& state);

class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Parameter*> params, const AdamConfig& config)
      : params_(std::move(params)), state_(make_adam_state(params_, config)) {}

  void step() { adam_step(params_, state_); }
  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }
  const AdamState& state() const { return state_; }
  const std::vector<Parameter*>& params() const { return params_; }
  void set_learning_rate(double lr) { state_.config.learning_rate = lr; }

 private:
  std::vector<Parameter*> params_;
  AdamState state_;
};

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
void init_uniform(Parameter& p, Index fan_in, std::mt19937_64& rng);

/// target <- tau * online + (1 - tau) * target, entry by entry.
void soft_update(const std::vector<Parameter*>& online, const std::vector<Parameter*>& target,
                 double tau);

}  // namespace kcrl::nc
