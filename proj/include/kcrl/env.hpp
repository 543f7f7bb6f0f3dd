#pragma once

#include "kcrl/kt.hpp"
#include "kcrl/random.hpp"

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace kcrl::env {

using nc::Index;
using nc::Matrix;
using nc::RowVector;

enum class ActionMode { continuous, discrete };

/// How the knowledge target evolves within an episode.
enum class TargetRule {
  fixed,    // per-student weights set at reset
  weakest,  // one-hot on the lowest predicted KC, re-selected after every step
};

struct EnvConfig {
  int horizon = 10;
  int warmup = 100;
  double reward_scale = 1000.0;
  double gamma = 0.99;
  ActionMode action_mode = ActionMode::continuous;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// A batch of environments advanced in lockstep; row b is student b.
struct EnvState {
  std::vector<int> student_ids;
  Matrix hidden;  // [N, state_dim]
  Matrix cell;
  Matrix targets;        // [N, K] target weights; each row sums to 1
  TargetRule rule = TargetRule::fixed;
  Matrix kc_knowledge;   // [N, K] predict_knowledge of the current state for every KC
  std::vector<double> knowledge;  // targets . kc_knowledge, per row
  std::vector<Rng> streams;       // one per student
  int step = 0;
  bool done = false;

  Index size() const { return hidden.rows(); }
};

/// Result of one batched transition. Per-row vectors share the state's order.
struct StepOutcome {
  std::vector<int> student_ids;
  std::vector<int> question;       // -1 for a raw continuous action
  std::vector<double> y_hat;       // P(correct) for the chosen action
  std::vector<int> response;
  std::vector<double> reward;      // scaled
  std::vector<int> target_kc;      // -1 when the target spans several KCs
  std::vector<double> knowledge_before;
  std::vector<double> knowledge_after;  // same target as knowledge_before
  Matrix targets;                  // [N, K] weights the reward was computed with
  bool done = false;
};

/// The calibrated KT model wrapped as a batched MDP. Read-only after
/// construction; all randomness lives in the per-student streams of EnvState.
class Environment {
 public:
  Environment(kt::KTModel model, Matrix fused_questions, Matrix kc_vectors, EnvConfig config);

  const EnvConfig& config() const { return config_; }
  const kt::KTModel& model() const { return model_; }
  const Matrix& questions() const { return questions_; }
  const Matrix& kcs() const { return kcs_; }
  Index num_questions() const { return questions_.rows(); }
  Index num_kcs() const { return kcs_.rows(); }
  int dim() const { return model_.dim(); }
  /// Width of observation(): [hidden | cell | target embedding].
  int observation_dim() const { return 2 * model_.state_dim() + model_.dim(); }
  /// Largest absolute entry of the question table; continuous actions live in [-bound, bound]^d.
  double action_bound() const { return action_bound_; }

  /// Warms every student up on its first `warmup` interactions. For TargetRule::weakest
  /// `targets` is ignored (pass an empty matrix). Throws DataError listing short traces.
  EnvState reset(const std::vector<corpus::StudentTrace>& traces, const Matrix& targets, TargetRule rule) const;
  /// Reset from explicit states (used by tests and the historical baseline).
  EnvState reset_states(std::vector<int> student_ids, const Matrix& hidden, const Matrix& cell, const Matrix& targets,
                        TargetRule rule) const;

  /// One transition per row with raw action vectors [N, d].
  StepOutcome step(EnvState& state, const Matrix& actions) const;
  /// One transition per row with question ids; the action is the question's fused embedding.
  StepOutcome step_questions(EnvState& state, std::span<const int> questions) const;
  /// Transition with caller-supplied responses instead of Bernoulli draws.
  StepOutcome step_observed(EnvState& state, std::span<const int> questions, std::span<const int> responses) const;

  /// [N, K] knowledge of every KC for a batch of hidden states.
  Matrix knowledge_all(const Matrix& hidden) const;
  /// [N, observation_dim()].
  Matrix observation(const EnvState& state) const;

 private:
  StepOutcome transition(EnvState& state, const Matrix& actions, std::vector<int> questions,
                         std::span<const int> forced_responses) const;
  void refresh_targets(EnvState& state) const;

  kt::KTModel model_;
  Matrix questions_;
  Matrix kcs_;
  Matrix question_feats_;
  Matrix kc_feats_;
  EnvConfig config_;
  double action_bound_ = 1.0;
};

/// Index of the row of `table` with the highest cosine similarity to `raw`;
/// ties go to the lowest id. Throws DataError for an empty table.
int nearest_question(const Matrix& table, const RowVector& raw);
std::vector<int> nearest_questions(const Matrix& table, const Matrix& raw);

/// Actions for a batch: either raw vectors or question ids (exactly one non-empty).
struct Action {
  Matrix vectors;
  std::vector<int> questions;
};
using Policy = std::function<Action(const EnvState& state, const Matrix& observations)>;

struct Trajectory {
  std::vector<StepOutcome> steps;
  Matrix initial_knowledge;  // [N, K] before the first step
  Matrix final_knowledge;    // [N, K] after the last step
};

/// Runs the remaining horizon. With use_retrieval, raw vectors are snapped to
/// the nearest question before they reach the model.
Trajectory rollout(const Environment& env, EnvState& state, const Policy& policy, bool use_retrieval);

/// CSV: student_id,step,question_id,response,y_hat,target_kc,knowledge_before,knowledge_after,reward
void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& trajectory);

}  // namespace kcrl::env
