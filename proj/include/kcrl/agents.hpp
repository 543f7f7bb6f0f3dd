#pragma once

#include "kcrl/env.hpp"
#include "kcrl/numcore/optim.hpp"
#include "kcrl/tasks.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace kcrl::agents {

using nc::Index;
using nc::Matrix;
using nc::RowVector;

// ---------------------------------------------------------------------------
// Replay.

struct TransitionRecord {
  RowVector state;        // observation at t: [hidden | cell | target embedding]
  RowVector action;       // action vector fed to the model
  int action_id = -1;     // question id (discrete agents)
  double reward = 0.0;    // scaled
  RowVector next_state;
  bool done = false;
  RowVector target;       // KC weights the reward used
  RowVector next_target;  // KC weights at t+1
  double y_hat = 0.0;     // response probability of the chosen action
  double prior = 0.0;     // knowledge of `target` before the step
  double next_prior = 0.0;  // knowledge of `next_target` after the step
};

struct Batch {
  Matrix state, action, next_state, target, next_target;
  Matrix reward, done, y_hat, prior, next_prior;  // [B, 1]
  std::vector<int> action_id;

  Index size() const { return state.rows(); }
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  /// Overwrites the oldest record once full.
  void push(TransitionRecord record);
  std::size_t size() const { return records_.size(); }
  std::size_t capacity() const { return capacity_; }
  /// i-th record counted from the oldest still stored.
  const TransitionRecord& at(std::size_t i) const;

  /// `n` distinct slots, uniformly. Throws ProtocolError when n exceeds the fill level.
  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const;
  Batch sample(std::size_t n, Rng& rng) const;
  Batch gather(const std::vector<std::size_t>& slots) const;

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<TransitionRecord> records_;
};

// ---------------------------------------------------------------------------
// Networks.

/// Fully connected stack: ReLU between layers, linear output.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, const std::vector<int>& sizes, std::mt19937_64& rng);

  /// Frozen layers enter the tape as constants so no gradient reaches them.
  nc::Var forward(nc::Tape& tape, nc::Var x, bool trainable);
  Matrix forward(const Matrix& x) const;

  std::vector<nc::Parameter*> params();
  int in_dim() const { return static_cast<int>(weights_.front().value.rows()); }
  int out_dim() const { return static_cast<int>(weights_.back().value.cols()); }

 private:
  std::vector<nc::Parameter> weights_;
  std::vector<nc::Parameter> biases_;
};

/// Unscaled expected knowledge gain: y_hat * y1 + (1 - y_hat) * y0 - prior.
double mve_combine(double y_hat, double y1, double y0, double prior);

/// Critic built from a copy of the calibrated KT model: the recurrent cell
/// rolls the state forward under both responses, the classifier reads the
/// target's knowledge in each branch and the response head weighs them.
struct MVECritic {
  kt::KTModel model;
  Matrix kcs;  // [K, d] KC vectors, fixed
  double reward_scale = 1.0;

  MVECritic() = default;
  MVECritic(const kt::KTModel& kt_model, Matrix kc_vectors, double reward_scale)
      : model(kt_model), kcs(std::move(kc_vectors)), reward_scale(reward_scale) {}

  struct Parts {
    double y_hat, y1, y0;
  };
  /// Branch quantities for one state; `target` holds KC weights.
  Parts parts(const RowVector& hidden, const RowVector& cell, const RowVector& action, const RowVector& target) const;
  /// reward_scale * mve_combine(...).
  double q_value(const RowVector& hidden, const RowVector& cell, const RowVector& action, const RowVector& target,
                 double prior) const;

  /// Tape form over a batch of observations [B, 2S + d]; returns [B, 1].
  nc::Var q(nc::Tape& tape, const kt::KTModel::Bound& bound, nc::Var observation, nc::Var action,
            const Matrix& target, const Matrix& prior) const;
  kt::KTModel::Bound bind(nc::Tape& tape, bool trainable);
};

// ---------------------------------------------------------------------------
// Agents.

enum class Algorithm { ddpg, td3, sac, dqn };
/// replace: the model-based critic is used as is; blend: it is also regressed
/// on Bellman targets with weight mve_weight.
enum class MveMode { off, replace, blend };

std::string algorithm_name(Algorithm a);
Algorithm parse_algorithm(const std::string& text);
std::string mve_mode_name(MveMode m);
MveMode parse_mve_mode(const std::string& text);

struct AgentConfig {
  Algorithm algorithm = Algorithm::ddpg;
  MveMode mve = MveMode::off;
  double mve_weight = 0.1;

  int actor_hidden = 128;
  int critic_up = 256;      // first critic layer
  int critic_hidden = 64;   // second critic layer
  double actor_lr = 1e-4;
  double critic_lr = 1e-3;
  double mve_lr = 1e-5;
  double tau = 0.01;
  double max_grad_norm = 10.0;

  // TD3
  double policy_noise = 0.2;  // fraction of the action bound
  double noise_clip = 0.5;
  int actor_update_freq = 2;
  // SAC
  double alpha = 0.2;
  bool deterministic_eval = true;
  // DQN
  double q_lr = 1e-4;
  bool double_dqn = true;
  int target_update_freq = 100;  // in updates; 0 never refreshes
  double eps_start = 1.0;
  double eps_end = 0.05;
  double eps_decay_fraction = 0.5;  // of the epochs
  // Continuous exploration: Gaussian noise, fraction of the action bound, decayed linearly to zero.
  double explore_sigma = 0.1;

  // Loop
  int epochs = 200;
  int students_per_epoch = 64;
  int updates_per_epoch = 10;
  int batch_size = 128;
  int buffer_capacity = 50000;
  int eval_every = 10;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

nlohmann::json to_json(const AgentConfig& config);
/// Starts from defaults and applies `j`. Unknown keys raise ConfigError.
AgentConfig agent_config_from_json(const nlohmann::json& j);

/// Sizes fixed by the environment.
struct AgentShape {
  int obs_dim = 0;
  int state_dim = 0;  // KT state width; observation = [hidden | cell | target]
  int action_dim = 0;
  int num_questions = 0;
  double action_bound = 1.0;
  double reward_scale = 1000.0;
  double gamma = 0.99;

  static AgentShape from_env(const env::Environment& env);
};

struct UpdateStats {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  bool actor_updated = false;
};

/// log pi of a tanh-squashed Gaussian sample a = bound * tanh(mu + sigma * eps),
/// summed over dimensions.
double squashed_gaussian_log_prob(const RowVector& mu, const RowVector& log_sigma, const RowVector& eps, double bound);

/// TD3 target-policy smoothing noise in units of the action bound: N(0, sigma^2) clipped to [-clip, clip].
Matrix smoothing_noise(Index rows, Index cols, double sigma, double clip, Rng& rng);

class Agent {
 public:
  Agent() = default;
  /// `kt_model` and `kc_vectors` seed the model-based critic and are required when config.mve != off.
  Agent(const AgentConfig& config, const AgentShape& shape, const kt::KTModel* kt_model = nullptr,
        const Matrix* kc_vectors = nullptr);

  const AgentConfig& config() const { return config_; }
  const AgentShape& shape() const { return shape_; }
  bool discrete() const { return config_.algorithm == Algorithm::dqn; }
  bool uses_mve() const { return config_.mve != MveMode::off; }

  /// Greedy continuous actions [N, d] (SAC: tanh of the mean when deterministic_eval).
  Matrix act(const Matrix& obs, Rng* rng = nullptr) const;
  /// Behaviour actions with exploration; sigma is a fraction of the action bound.
  Matrix explore(const Matrix& obs, double sigma, Rng& rng) const;
  /// Greedy (eps = 0) or eps-greedy question ids.
  std::vector<int> act_discrete(const Matrix& obs, double eps, Rng& rng) const;
  /// Evaluation policy. The agent must outlive it.
  env::Policy policy(std::uint64_t seed) const;

  /// Critic estimate for a batch; uses the first critic (or the model-based one).
  Matrix q_values(const Matrix& obs, const Matrix& actions, const Matrix& target, const Matrix& prior) const;
  /// [N, num_questions] for DQN.
  Matrix q_all(const Matrix& obs) const;

  UpdateStats update(const Batch& batch, Rng& rng);

  std::vector<nc::Parameter*> params();  // every network, online and target
  std::int64_t updates() const { return updates_; }

  // Networks are public so tests can inspect and seed them.
  Mlp actor, actor_target;
  Mlp critic1, critic2, critic1_target, critic2_target;
  Mlp q_net, q_target;
  MVECritic mve, mve_target;

 private:
  nc::Var actor_forward(nc::Tape& tape, Mlp& net, nc::Var obs, bool trainable) const;
  Matrix actor_forward(const Mlp& net, const Matrix& obs) const;
  nc::Var critic_forward(nc::Tape& tape, Mlp& net, nc::Var obs, nc::Var action, bool trainable) const;
  Matrix critic_forward(const Mlp& net, const Matrix& obs, const Matrix& action) const;
  /// SAC sample with its log-probability ([N, d], [N, 1]); eps are fixed draws.
  struct Sample {
    nc::Var action, log_prob;
  };
  Sample sac_sample(nc::Tape& tape, Mlp& net, nc::Var obs, const Matrix& eps, bool trainable) const;

  UpdateStats update_continuous(const Batch& b, Rng& rng);
  UpdateStats update_dqn(const Batch& b);

  std::vector<nc::Parameter*> critic_params();

  AgentConfig config_;
  AgentShape shape_;
  // Optimizer moments only; parameter lists are rebuilt per step so agents stay copyable.
  nc::AdamState actor_opt_, critic_opt_, mve_opt_, q_opt_;
  std::int64_t updates_ = 0;
};

// ---------------------------------------------------------------------------
// Training.

struct CurvePoint {
  int epoch = 0;
  double mean_score = 0.0;  // normalized, evaluation students
  double std = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  Agent agent;
  std::vector<CurvePoint> curve;
};

/// Interleaves batched exploratory rollouts on training students with
/// replay updates. Raw continuous actions reach the model during training;
/// evaluation snaps them to questions. Throws TrainingError on divergence,
/// after writing the last evaluated agent to `divergence_checkpoint` when set.
TrainResult train_agent(const env::Environment& env, const corpus::Corpus& corpus,
                        const std::vector<corpus::StudentTrace>& train_traces,
                        const std::vector<corpus::StudentTrace>& eval_traces, tasks::TaskKind task,
                        const tasks::TransitionMatrix* matrix, const AgentConfig& config,
                        const std::filesystem::path& divergence_checkpoint = {});

/// Learning curve CSV: epoch,mean_score,std.
void write_curve_csv(const std::filesystem::path& path, const std::vector<CurvePoint>& curve);

inline constexpr int kAgentCheckpointVersion = 1;
void save_agent(const std::filesystem::path& path, Agent& agent);
Agent load_agent(const std::filesystem::path& path);

}  // namespace kcrl::agents
