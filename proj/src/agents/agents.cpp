#include "kcrl/agents.hpp"

#include "kcrl/error.hpp"
#include "kcrl/numcore/io.hpp"
#include "kcrl/numcore/ops.hpp"
#include "kcrl/numcore/rowwise.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>

namespace kcrl::agents {

namespace {

constexpr double kLogSigmaMin = -5.0;
constexpr double kLogSigmaMax = 2.0;

bool all_finite(const Matrix& m) { return m.allFinite(); }

// log(cosh(u)) with d/du = tanh(u); stable for large |u|.
nc::Var log_cosh(nc::Var u) {
  Matrix v = u.value().unaryExpr([](double x) {
    const double a = std::abs(x);
    return a + std::log1p(std::exp(-2.0 * a)) - std::numbers::ln2;
  });
  return u.tape()->record(std::move(v), {u}, [u](nc::Tape& t, std::size_t self) {
    t.grad(u.id()).array() += t.grad(self).array() * u.value().array().tanh();
  });
}

// Batched model-based value, row by row independent of the batch.
Matrix mve_batch(const MVECritic& c, const Matrix& obs, const Matrix& action, const Matrix& target,
                 const Matrix& prior) {
  const kt::KTModel& m = c.model;
  const int s = m.state_dim();
  const Index n = obs.rows();
  const Matrix hidden = obs.leftCols(s);
  const Matrix cell = obs.middleCols(s, s);
  const Matrix kc_feats = m.query_features(c.kcs);
  const Matrix sf = m.state_features(hidden);
  const Matrix qf = m.query_features(action);
  std::vector<int> ones(static_cast<std::size_t>(n), 1), zeros(static_cast<std::size_t>(n), 0);
  const kt::BatchState now{hidden, cell};
  const Matrix s1 = m.state_features(m.advance(now, action, ones).hidden);
  const Matrix s0 = m.state_features(m.advance(now, action, zeros).hidden);
  Matrix q(n, 1);
  for (Index r = 0; r < n; ++r) {
    // Zero weights add exactly zero, so skipping them matches the full sum.
    double y1 = 0.0, y0 = 0.0;
    for (Index k = 0; k < target.cols(); ++k) {
      const double w = target(r, k);
      if (w == 0.0) continue;
      y1 += w * m.score(s1.row(r), kc_feats.row(k));
      y0 += w * m.score(s0.row(r), kc_feats.row(k));
    }
    const double y_hat = m.score(sf.row(r), qf.row(r));
    q(r, 0) = c.reward_scale * mve_combine(y_hat, y1, y0, prior(r, 0));
  }
  return q;
}

// Copy of `net` whose parameters carry `name` as prefix, so checkpoints keep online and target apart.
Mlp renamed(Mlp net, const std::string& name) {
  for (nc::Parameter* p : net.params()) p->name = name + p->name.substr(p->name.find('.'));
  return net;
}

}  // namespace

// ---------------------------------------------------------------------------
// Replay.

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("replay capacity must be positive");
  records_.reserve(std::min<std::size_t>(capacity, 1 << 16));
}

void ReplayBuffer::push(TransitionRecord record) {
  if (records_.size() < capacity_) {
    records_.push_back(std::move(record));
  } else {
    records_[next_] = std::move(record);
  }
  next_ = (next_ + 1) % capacity_;
}

const TransitionRecord& ReplayBuffer::at(std::size_t i) const {
  if (i >= records_.size()) throw ProtocolError("replay index out of range");
  const std::size_t oldest = records_.size() < capacity_ ? 0 : next_;
  return records_[(oldest + i) % records_.size()];
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, Rng& rng) const {
  if (n > records_.size()) {
    throw ProtocolError("cannot sample " + std::to_string(n) + " transitions from a buffer holding " +
                        std::to_string(records_.size()));
  }
  // Partial Fisher-Yates over slot ids.
  std::vector<std::size_t> ids(records_.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  for (std::size_t i = 0; i < n; ++i) std::swap(ids[i], ids[i + uniform_index(rng, ids.size() - i)]);
  ids.resize(n);
  return ids;
}

Batch ReplayBuffer::sample(std::size_t n, Rng& rng) const { return gather(sample_indices(n, rng)); }

Batch ReplayBuffer::gather(const std::vector<std::size_t>& slots) const {
  Batch b;
  const Index n = static_cast<Index>(slots.size());
  if (n == 0) return b;
  const TransitionRecord& first = records_.at(slots[0]);
  b.state.resize(n, first.state.size());
  b.action.resize(n, first.action.size());
  b.next_state.resize(n, first.next_state.size());
  b.target.resize(n, first.target.size());
  b.next_target.resize(n, first.next_target.size());
  b.reward.resize(n, 1);
  b.done.resize(n, 1);
  b.y_hat.resize(n, 1);
  b.prior.resize(n, 1);
  b.next_prior.resize(n, 1);
  b.action_id.resize(slots.size());
  for (Index i = 0; i < n; ++i) {
    const TransitionRecord& r = records_.at(slots[static_cast<std::size_t>(i)]);
    b.state.row(i) = r.state;
    b.action.row(i) = r.action;
    b.next_state.row(i) = r.next_state;
    b.target.row(i) = r.target;
    b.next_target.row(i) = r.next_target;
    b.reward(i, 0) = r.reward;
    b.done(i, 0) = r.done ? 1.0 : 0.0;
    b.y_hat(i, 0) = r.y_hat;
    b.prior(i, 0) = r.prior;
    b.next_prior(i, 0) = r.next_prior;
    b.action_id[static_cast<std::size_t>(i)] = r.action_id;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Networks.

Mlp::Mlp(const std::string& name, const std::vector<int>& sizes, std::mt19937_64& rng) {
  if (sizes.size() < 2) throw ConfigError(name + ": a network needs at least two layer sizes");
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    if (sizes[i] < 1 || sizes[i + 1] < 1) throw ConfigError(name + ": layer sizes must be positive");
    weights_.emplace_back(name + ".w" + std::to_string(i), sizes[i], sizes[i + 1]);
    biases_.emplace_back(name + ".b" + std::to_string(i), 1, sizes[i + 1]);
    nc::init_uniform(weights_.back(), sizes[i], rng);
    nc::init_uniform(biases_.back(), sizes[i], rng);
  }
}

nc::Var Mlp::forward(nc::Tape& tape, nc::Var x, bool trainable) {
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    nc::Var w = trainable ? tape.parameter(weights_[i]) : tape.constant(weights_[i].value);
    nc::Var b = trainable ? tape.parameter(biases_[i]) : tape.constant(biases_[i].value);
    x = nc::affine(x, w, b);
    if (i + 1 < weights_.size()) x = nc::relu(x);
  }
  return x;
}

Matrix Mlp::forward(const Matrix& x) const {
  Matrix h = x;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    Matrix z = h * weights_[i].value;
    z.rowwise() += biases_[i].value.row(0);
    if (i + 1 < weights_.size()) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return h;
}

std::vector<nc::Parameter*> Mlp::params() {
  std::vector<nc::Parameter*> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(&weights_[i]);
    out.push_back(&biases_[i]);
  }
  return out;
}

double mve_combine(double y_hat, double y1, double y0, double prior) {
  return y_hat * y1 + (1.0 - y_hat) * y0 - prior;
}

MVECritic::Parts MVECritic::parts(const RowVector& hidden, const RowVector& cell, const RowVector& action,
                                  const RowVector& target) const {
  const kt::StudentState now{hidden, cell, 0};
  const Matrix kc_feats = model.query_features(kcs);
  auto branch = [&](int response) {
    const kt::StudentState next = model.advance_state(now, action, response);
    const Matrix k = model.score_all(model.state_features(next.hidden), kc_feats);
    double y = 0.0;
    for (Index c = 0; c < target.size(); ++c) y += target(c) * k(0, c);
    return y;
  };
  Parts p;
  p.y_hat = model.score(model.state_features(hidden).row(0), model.query_features(action).row(0));
  p.y1 = branch(1);
  p.y0 = branch(0);
  return p;
}

double MVECritic::q_value(const RowVector& hidden, const RowVector& cell, const RowVector& action,
                          const RowVector& target, double prior) const {
  const Parts p = parts(hidden, cell, action, target);
  return reward_scale * mve_combine(p.y_hat, p.y1, p.y0, prior);
}

kt::KTModel::Bound MVECritic::bind(nc::Tape& tape, bool trainable) {
  if (trainable) return model.bind(tape);
  kt::KTModel::Bound b;
  b.lstm = {tape.constant(model.lstm.w_input.value), tape.constant(model.lstm.w_hidden.value),
            tape.constant(model.lstm.bias.value)};
  b.response_emb = tape.constant(model.response_emb.value);
  b.proj_w = tape.constant(model.proj_w.value);
  b.proj_b = tape.constant(model.proj_b.value);
  b.w_state = tape.constant(model.w_state.value);
  b.w_query = tape.constant(model.w_query.value);
  b.b_hidden = tape.constant(model.b_hidden.value);
  b.w_out = tape.constant(model.w_out.value);
  b.b_out = tape.constant(model.b_out.value);
  return b;
}

nc::Var MVECritic::q(nc::Tape& tape, const kt::KTModel::Bound& b, nc::Var observation, nc::Var action,
                     const Matrix& target, const Matrix& prior) const {
  const Index n = observation.rows();
  const Index k = kcs.rows();
  const Index s = model.state_dim();
  nc::Var hidden = nc::slice_cols(observation, 0, s);
  nc::Var cell = nc::slice_cols(observation, s, s);
  nc::Var y_hat = kt::KTModel::classify(b, hidden, action);

  nc::Var kc_feats = nc::affine(tape.constant(kcs), b.w_query, b.b_hidden);
  // Only (student, KC) pairs with a nonzero target weight are scored; the
  // weights then fold the pair scores back into one value per student.
  std::vector<Index> pair_row, pair_kc;
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < k; ++c) {
      if (target(r, c) != 0.0) {
        pair_row.push_back(r);
        pair_kc.push_back(c);
      }
    }
  }
  Matrix fold = Matrix::Zero(n, static_cast<Index>(pair_row.size()));
  for (std::size_t i = 0; i < pair_row.size(); ++i) {
    fold(pair_row[i], static_cast<Index>(i)) = target(pair_row[i], pair_kc[i]);
  }
  nc::Var fold_var = tape.constant(std::move(fold));
  nc::Var pair_feats = nc::select_rows(kc_feats, pair_kc);
  auto branch = [&](Index response) {
    const std::vector<Index> responses(static_cast<std::size_t>(n), response);
    const nc::CellState next = kt::KTModel::step(b, {hidden, cell}, action, responses);
    nc::Var sf = nc::matmul(nc::affine(next.hidden, b.proj_w, b.proj_b), b.w_state);
    nc::Var pre = nc::add(nc::select_rows(sf, pair_row), pair_feats);
    nc::Var p = nc::sigmoid(nc::affine(nc::tanh(pre), b.w_out, b.b_out));
    return nc::matmul(fold_var, p);
  };
  nc::Var y1 = branch(1);
  nc::Var y0 = branch(0);
  nc::Var gain = nc::sub(nc::add(nc::mul(y_hat, nc::sub(y1, y0)), y0), tape.constant(prior));
  return nc::scale(gain, reward_scale);
}

// ---------------------------------------------------------------------------
// Names and config.

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::ddpg: return "ddpg";
    case Algorithm::td3: return "td3";
    case Algorithm::sac: return "sac";
    case Algorithm::dqn: return "dqn";
  }
  return "?";
}

Algorithm parse_algorithm(const std::string& text) {
  for (Algorithm a : {Algorithm::ddpg, Algorithm::td3, Algorithm::sac, Algorithm::dqn}) {
    if (algorithm_name(a) == text) return a;
  }
  throw ConfigError("unknown algorithm '" + text + "' (expected ddpg, td3, sac or dqn)");
}

std::string mve_mode_name(MveMode m) {
  switch (m) {
    case MveMode::off: return "off";
    case MveMode::replace: return "replace";
    case MveMode::blend: return "blend";
  }
  return "?";
}

MveMode parse_mve_mode(const std::string& text) {
  for (MveMode m : {MveMode::off, MveMode::replace, MveMode::blend}) {
    if (mve_mode_name(m) == text) return m;
  }
  throw ConfigError("unknown mve mode '" + text + "' (expected off, replace or blend)");
}

void AgentConfig::validate() const {
  auto positive = [](const char* key, double v) {
    if (!(v > 0.0)) throw ConfigError(std::string("agent.") + key + " must be positive");
  };
  auto unit = [](const char* key, double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("agent.") + key + " must lie in [0, 1]");
  };
  if (!(mve_weight >= 0.0)) throw ConfigError("agent.mve_weight must be >= 0");
  positive("actor_hidden", actor_hidden);
  positive("critic_up", critic_up);
  positive("critic_hidden", critic_hidden);
  positive("actor_lr", actor_lr);
  positive("critic_lr", critic_lr);
  positive("q_lr", q_lr);
  positive("mve_lr", mve_lr);
  unit("tau", tau);
  if (!(max_grad_norm >= 0.0)) throw ConfigError("agent.max_grad_norm must be >= 0");
  if (!(policy_noise >= 0.0)) throw ConfigError("agent.policy_noise must be >= 0");
  if (!(noise_clip >= 0.0)) throw ConfigError("agent.noise_clip must be >= 0");
  positive("actor_update_freq", actor_update_freq);
  if (!(alpha >= 0.0)) throw ConfigError("agent.alpha must be >= 0");
  if (target_update_freq < 0) throw ConfigError("agent.target_update_freq must be >= 0");
  unit("eps_start", eps_start);
  unit("eps_end", eps_end);
  unit("eps_decay_fraction", eps_decay_fraction);
  if (!(explore_sigma >= 0.0)) throw ConfigError("agent.explore_sigma must be >= 0");
  positive("epochs", epochs);
  positive("students_per_epoch", students_per_epoch);
  if (updates_per_epoch < 0) throw ConfigError("agent.updates_per_epoch must be >= 0");
  positive("batch_size", batch_size);
  positive("buffer_capacity", buffer_capacity);
  positive("eval_every", eval_every);
  if (algorithm == Algorithm::dqn && mve != MveMode::off) {
    throw ConfigError("agent.mve applies to continuous agents only, not dqn");
  }
}

#define KCRL_AGENT_FIELDS(X)                                                                              \
  X(mve_weight) X(actor_hidden) X(critic_up) X(critic_hidden) X(actor_lr) X(critic_lr) X(mve_lr) X(tau) \
  X(max_grad_norm) X(policy_noise) X(noise_clip) X(actor_update_freq) X(alpha) X(deterministic_eval)    \
  X(q_lr) X(double_dqn) X(target_update_freq) X(eps_start) X(eps_end) X(eps_decay_fraction) X(explore_sigma)    \
  X(epochs) X(students_per_epoch) X(updates_per_epoch) X(batch_size) X(buffer_capacity) X(eval_every)  \
  X(seed)

nlohmann::json to_json(const AgentConfig& c) {
  nlohmann::json j;
  j["algorithm"] = algorithm_name(c.algorithm);
  j["mve"] = mve_mode_name(c.mve);
#define X(f) j[#f] = c.f;
  KCRL_AGENT_FIELDS(X)
#undef X
  return j;
}

AgentConfig agent_config_from_json(const nlohmann::json& j) {
  AgentConfig c;
  if (!j.is_object()) throw ConfigError("agent config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "algorithm") {
        c.algorithm = parse_algorithm(value.get<std::string>());
        continue;
      }
      if (key == "mve") {
        c.mve = parse_mve_mode(value.get<std::string>());
        continue;
      }
#define X(f)                             \
  if (key == #f) {                       \
    c.f = value.get<decltype(c.f)>();    \
    continue;                            \
  }
      KCRL_AGENT_FIELDS(X)
#undef X
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("agent." + key + " has the wrong type");
    }
    throw ConfigError("unknown key agent." + key);
  }
  c.validate();
  return c;
}

AgentShape AgentShape::from_env(const env::Environment& env) {
  AgentShape s;
  s.obs_dim = env.observation_dim();
  s.state_dim = env.model().state_dim();
  s.action_dim = env.dim();
  s.num_questions = static_cast<int>(env.num_questions());
  s.action_bound = env.action_bound();
  s.reward_scale = env.config().reward_scale;
  s.gamma = env.config().gamma;
  return s;
}

double squashed_gaussian_log_prob(const RowVector& mu, const RowVector& log_sigma, const RowVector& eps,
                                  double bound) {
  double lp = 0.0;
  for (Index j = 0; j < mu.size(); ++j) {
    const double u = mu(j) + std::exp(log_sigma(j)) * eps(j);
    const double a = std::abs(u);
    const double log_cosh = a + std::log1p(std::exp(-2.0 * a)) - std::numbers::ln2;
    lp += -0.5 * eps(j) * eps(j) - log_sigma(j) - 0.5 * std::log(2.0 * std::numbers::pi) + 2.0 * log_cosh -
          std::log(bound);
  }
  return lp;
}

Matrix smoothing_noise(Index rows, Index cols, double sigma, double clip, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::clamp(sigma * normal01(rng), -clip, clip);
  return m;
}

// ---------------------------------------------------------------------------
// Agent.

Agent::Agent(const AgentConfig& config, const AgentShape& shape, const kt::KTModel* kt_model,
             const Matrix* kc_vectors)
    : config_(config), shape_(shape) {
  config_.validate();
  if (shape.obs_dim < 1 || shape.action_dim < 1 || shape.num_questions < 1 || !(shape.action_bound > 0.0)) {
    throw DimensionError("agent shape must have positive sizes and action bound");
  }
  std::mt19937_64 rng(derive_seed(config.seed, 0xA6E17));
  const int obs = shape.obs_dim, d = shape.action_dim;
  const int h = config.actor_hidden;
  const auto critic_sizes = std::vector<int>{obs + d, config.critic_up, config.critic_hidden, 1};
  const bool twin = config.algorithm == Algorithm::td3 || config.algorithm == Algorithm::sac;

  const nc::AdamConfig actor_cfg{config.actor_lr, 0.9, 0.999, 1e-8, config.max_grad_norm};
  const nc::AdamConfig critic_cfg{config.critic_lr, 0.9, 0.999, 1e-8, config.max_grad_norm};

  if (config.algorithm == Algorithm::dqn) {
    q_net = Mlp("q", {obs, h, h, shape.num_questions}, rng);
    q_target = renamed(q_net, "q_target");
    q_opt_ = nc::make_adam_state(q_net.params(), nc::AdamConfig{config.q_lr, 0.9, 0.999, 1e-8, config.max_grad_norm});
    return;
  }

  const int actor_out = config.algorithm == Algorithm::sac ? 2 * d : d;
  actor = Mlp("actor", {obs, h, h, actor_out}, rng);
  actor_target = renamed(actor, "actor_target");
  actor_opt_ = nc::make_adam_state(actor.params(), actor_cfg);

  if (uses_mve()) {
    if (kt_model == nullptr || kc_vectors == nullptr) {
      throw ConfigError("the model-based critic needs the KT model and KC vectors");
    }
    if (kt_model->dim() != d || 2 * kt_model->state_dim() + kt_model->dim() != obs ||
        kc_vectors->cols() != kt_model->dim()) {
      throw DimensionError("KT model does not match the agent's observation and action sizes");
    }
    mve = MVECritic(*kt_model, *kc_vectors, shape.reward_scale);
    for (nc::Parameter* p : mve.model.params()) p->name = "mve." + p->name;
    mve_target = mve;
    for (nc::Parameter* p : mve_target.model.params()) p->name = "mve_target." + p->name.substr(4);
    mve_opt_ = nc::make_adam_state(mve.model.params(), nc::AdamConfig{config.mve_lr, 0.9, 0.999, 1e-8,
                                                                      config.max_grad_norm});
    return;
  }
  critic1 = Mlp("critic1", critic_sizes, rng);
  critic1_target = renamed(critic1, "critic1_target");
  if (twin) {
    critic2 = Mlp("critic2", critic_sizes, rng);
    critic2_target = renamed(critic2, "critic2_target");
  }
  critic_opt_ = nc::make_adam_state(critic_params(), critic_cfg);
}

std::vector<nc::Parameter*> Agent::critic_params() {
  std::vector<nc::Parameter*> out = critic1.params();
  if (config_.algorithm != Algorithm::ddpg) {
    for (nc::Parameter* p : critic2.params()) out.push_back(p);
  }
  return out;
}

std::vector<nc::Parameter*> Agent::params() {
  std::vector<nc::Parameter*> out;
  auto add = [&](std::vector<nc::Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  if (discrete()) {
    add(q_net.params());
    add(q_target.params());
    return out;
  }
  add(actor.params());
  add(actor_target.params());
  if (uses_mve()) {
    add(mve.model.params());
    add(mve_target.model.params());
    return out;
  }
  add(critic1.params());
  add(critic1_target.params());
  if (config_.algorithm != Algorithm::ddpg) {
    add(critic2.params());
    add(critic2_target.params());
  }
  return out;
}

nc::Var Agent::actor_forward(nc::Tape& tape, Mlp& net, nc::Var obs, bool trainable) const {
  return nc::scale(nc::tanh(net.forward(tape, obs, trainable)), shape_.action_bound);
}

Matrix Agent::actor_forward(const Mlp& net, const Matrix& obs) const {
  Matrix out = net.forward(obs);
  if (config_.algorithm == Algorithm::sac) out = out.leftCols(shape_.action_dim).eval();
  return shape_.action_bound * out.array().tanh().matrix();
}

nc::Var Agent::critic_forward(nc::Tape& tape, Mlp& net, nc::Var obs, nc::Var action, bool trainable) const {
  return net.forward(tape, nc::concat_cols({obs, nc::scale(action, 1.0 / shape_.action_bound)}), trainable);
}

Matrix Agent::critic_forward(const Mlp& net, const Matrix& obs, const Matrix& action) const {
  Matrix x(obs.rows(), obs.cols() + action.cols());
  x.leftCols(obs.cols()) = obs;
  x.rightCols(action.cols()) = action / shape_.action_bound;
  return net.forward(x);
}

Agent::Sample Agent::sac_sample(nc::Tape& tape, Mlp& net, nc::Var obs, const Matrix& eps, bool trainable) const {
  const Index d = shape_.action_dim;
  nc::Var out = net.forward(tape, obs, trainable);
  nc::Var mu = nc::slice_cols(out, 0, d);
  nc::Var log_sigma = nc::clamp(nc::slice_cols(out, d, d), kLogSigmaMin, kLogSigmaMax);
  nc::Var u = nc::add(mu, nc::mul(nc::exp(log_sigma), tape.constant(eps)));
  Sample s;
  s.action = nc::scale(nc::tanh(u), shape_.action_bound);
  const double per_dim = 0.5 * std::log(2.0 * std::numbers::pi) + std::log(shape_.action_bound);
  Matrix c = -0.5 * eps.array().square().rowwise().sum().matrix();
  c.array() -= static_cast<double>(d) * per_dim;
  s.log_prob = nc::add(nc::sub(nc::scale(nc::row_sum(log_cosh(u)), 2.0), nc::row_sum(log_sigma)), tape.constant(c));
  return s;
}

Matrix Agent::act(const Matrix& obs, Rng* rng) const {
  if (discrete()) throw ProtocolError("act() is for continuous agents; use act_discrete()");
  if (obs.cols() != shape_.obs_dim) throw DimensionError("observation width does not match the agent");
  if (config_.algorithm == Algorithm::sac && !config_.deterministic_eval) {
    if (rng == nullptr) throw ProtocolError("stochastic evaluation needs a random stream");
    const Index d = shape_.action_dim;
    const Matrix out = actor.forward(obs);
    Matrix a(obs.rows(), d);
    for (Index r = 0; r < obs.rows(); ++r) {
      for (Index j = 0; j < d; ++j) {
        const double ls = std::clamp(out(r, d + j), kLogSigmaMin, kLogSigmaMax);
        a(r, j) = shape_.action_bound * std::tanh(out(r, j) + std::exp(ls) * normal01(*rng));
      }
    }
    return a;
  }
  return actor_forward(actor, obs);
}

Matrix Agent::explore(const Matrix& obs, double sigma, Rng& rng) const {
  if (config_.algorithm == Algorithm::sac) {
    // The stochastic policy explores on its own.
    const Index d = shape_.action_dim;
    const Matrix out = actor.forward(obs);
    Matrix a(obs.rows(), d);
    for (Index r = 0; r < obs.rows(); ++r) {
      for (Index j = 0; j < d; ++j) {
        const double ls = std::clamp(out(r, d + j), kLogSigmaMin, kLogSigmaMax);
        a(r, j) = shape_.action_bound * std::tanh(out(r, j) + std::exp(ls) * normal01(rng));
      }
    }
    return a;
  }
  Matrix a = act(obs);
  const double b = shape_.action_bound;
  for (Index i = 0; i < a.size(); ++i) {
    a.data()[i] = std::clamp(a.data()[i] + sigma * b * normal01(rng), -b, b);
  }
  return a;
}

std::vector<int> Agent::act_discrete(const Matrix& obs, double eps, Rng& rng) const {
  if (!discrete()) throw ProtocolError("act_discrete() is for the discrete agent");
  const Matrix q = q_all(obs);
  std::vector<int> out(static_cast<std::size_t>(obs.rows()));
  for (Index r = 0; r < obs.rows(); ++r) {
    if (eps > 0.0 && uniform01(rng) < eps) {
      out[static_cast<std::size_t>(r)] = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(q.cols())));
      continue;
    }
    Index best = 0;
    for (Index c = 1; c < q.cols(); ++c) {
      if (q(r, c) > q(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

env::Policy Agent::policy(std::uint64_t seed) const {
  auto rng = std::make_shared<Rng>(seed);
  return [this, rng](const env::EnvState&, const Matrix& obs) {
    env::Action a;
    if (discrete()) {
      a.questions = act_discrete(obs, 0.0, *rng);
    } else {
      a.vectors = act(obs, rng.get());
    }
    return a;
  };
}

Matrix Agent::q_values(const Matrix& obs, const Matrix& actions, const Matrix& target, const Matrix& prior) const {
  if (discrete()) throw ProtocolError("q_values() is for continuous agents; use q_all()");
  if (uses_mve()) return mve_batch(mve, obs, actions, target, prior);
  return critic_forward(critic1, obs, actions);
}

Matrix Agent::q_all(const Matrix& obs) const {
  if (!discrete()) throw ProtocolError("q_all() is for the discrete agent");
  if (obs.cols() != shape_.obs_dim) throw DimensionError("observation width does not match the agent");
  return q_net.forward(obs);
}

UpdateStats Agent::update(const Batch& batch, Rng& rng) {
  if (batch.size() == 0) throw ProtocolError("empty batch");
  ++updates_;
  return discrete() ? update_dqn(batch) : update_continuous(batch, rng);
}

UpdateStats Agent::update_continuous(const Batch& b, Rng& rng) {
  const Index n = b.size();
  const Index d = shape_.action_dim;
  const bool sac = config_.algorithm == Algorithm::sac;
  const bool td3 = config_.algorithm == Algorithm::td3;
  UpdateStats stats;

  // Bellman targets.
  Matrix next_action;
  Matrix next_log_prob;
  if (sac) {
    Matrix eps(n, d);
    for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal01(rng);
    nc::Tape tape;
    const Sample s = sac_sample(tape, actor, tape.constant(b.next_state), eps, false);
    next_action = s.action.value();
    next_log_prob = s.log_prob.value();
  } else {
    next_action = actor_forward(actor_target, b.next_state);
    if (td3) {
      const double bound = shape_.action_bound;
      next_action += bound * smoothing_noise(n, d, config_.policy_noise, config_.noise_clip, rng);
      next_action = next_action.cwiseMax(-bound).cwiseMin(bound);
    }
  }
  Matrix q_next;
  if (uses_mve()) {
    q_next = mve_batch(mve_target, b.next_state, next_action, b.next_target, b.next_prior);
  } else {
    q_next = critic_forward(critic1_target, b.next_state, next_action);
    if (sac || td3) q_next = q_next.cwiseMin(critic_forward(critic2_target, b.next_state, next_action));
  }
  if (sac) q_next -= config_.alpha * next_log_prob;
  const Matrix y = b.reward + shape_.gamma * (Matrix::Ones(n, 1) - b.done).cwiseProduct(q_next);
  if (!all_finite(y)) throw TrainingError("non-finite Bellman target at update " + std::to_string(updates_));

  // Critic regression.
  if (config_.mve == MveMode::blend && config_.mve_weight > 0.0) {
    nc::Tape tape;
    const auto bound = mve.bind(tape, true);
    nc::Var q = mve.q(tape, bound, tape.constant(b.state), tape.constant(b.action), b.target, b.prior);
    nc::Var loss = nc::mse_loss(q, y);
    stats.critic_loss = loss.scalar();
    if (!std::isfinite(stats.critic_loss)) {
      throw TrainingError("critic loss is not finite at update " + std::to_string(updates_));
    }
    const auto ps = mve.model.params();
    for (nc::Parameter* p : ps) p->zero_grad();
    tape.backward(nc::scale(loss, config_.mve_weight));
    nc::adam_step(ps, mve_opt_);
  } else if (!uses_mve()) {
    nc::Tape tape;
    nc::Var obs = tape.constant(b.state);
    nc::Var act = tape.constant(b.action);
    nc::Var loss = nc::mse_loss(critic_forward(tape, critic1, obs, act, true), y);
    if (sac || td3) loss = nc::add(loss, nc::mse_loss(critic_forward(tape, critic2, obs, act, true), y));
    stats.critic_loss = loss.scalar();
    if (!std::isfinite(stats.critic_loss)) {
      throw TrainingError("critic loss is not finite at update " + std::to_string(updates_));
    }
    const auto ps = critic_params();
    for (nc::Parameter* p : ps) p->zero_grad();
    tape.backward(loss);
    nc::adam_step(ps, critic_opt_);
  }

  // Policy step; TD3 delays it together with the target refresh.
  if (td3 && updates_ % config_.actor_update_freq != 0) return stats;
  {
    nc::Tape tape;
    nc::Var obs = tape.constant(b.state);
    nc::Var action;
    nc::Var log_prob;
    if (sac) {
      Matrix eps(n, d);
      for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal01(rng);
      const Sample s = sac_sample(tape, actor, obs, eps, true);
      action = s.action;
      log_prob = s.log_prob;
    } else {
      action = actor_forward(tape, actor, obs, true);
    }
    nc::Var q;
    if (uses_mve()) {
      q = mve.q(tape, mve.bind(tape, false), obs, action, b.target, b.prior);
    } else {
      q = critic_forward(tape, critic1, obs, action, false);
      if (sac) q = nc::minimum(q, critic_forward(tape, critic2, obs, action, false));
    }
    nc::Var loss = sac ? nc::mean(nc::sub(nc::scale(log_prob, config_.alpha), q)) : nc::scale(nc::mean(q), -1.0);
    stats.actor_loss = loss.scalar();
    if (!std::isfinite(stats.actor_loss)) {
      throw TrainingError("actor loss is not finite at update " + std::to_string(updates_));
    }
    const auto ps = actor.params();
    for (nc::Parameter* p : ps) p->zero_grad();
    tape.backward(loss);
    nc::adam_step(ps, actor_opt_);
    stats.actor_updated = true;
  }

  const double tau = config_.tau;
  nc::soft_update(actor.params(), actor_target.params(), tau);
  if (uses_mve()) {
    if (config_.mve == MveMode::blend) nc::soft_update(mve.model.params(), mve_target.model.params(), tau);
  } else {
    nc::soft_update(critic1.params(), critic1_target.params(), tau);
    if (sac || td3) nc::soft_update(critic2.params(), critic2_target.params(), tau);
  }
  return stats;
}

UpdateStats Agent::update_dqn(const Batch& b) {
  const Index n = b.size();
  const Matrix next_target_q = q_target.forward(b.next_state);
  Matrix q_next(n, 1);
  if (config_.double_dqn) {
    const Matrix online = q_net.forward(b.next_state);
    for (Index r = 0; r < n; ++r) {
      Index best = 0;
      for (Index c = 1; c < online.cols(); ++c) {
        if (online(r, c) > online(r, best)) best = c;
      }
      q_next(r, 0) = next_target_q(r, best);
    }
  } else {
    q_next = next_target_q.rowwise().maxCoeff();
  }
  const Matrix y = b.reward + shape_.gamma * (Matrix::Ones(n, 1) - b.done).cwiseProduct(q_next);
  if (!all_finite(y)) throw TrainingError("non-finite Bellman target at update " + std::to_string(updates_));

  Matrix onehot = Matrix::Zero(n, shape_.num_questions);
  for (Index r = 0; r < n; ++r) {
    const int a = b.action_id[static_cast<std::size_t>(r)];
    if (a < 0 || a >= shape_.num_questions) throw DataError("transition without a valid question id");
    onehot(r, a) = 1.0;
  }
  nc::Tape tape;
  nc::Var qa = nc::row_sum(nc::mul(q_net.forward(tape, tape.constant(b.state), true), tape.constant(onehot)));
  nc::Var loss = nc::mse_loss(qa, y);
  UpdateStats stats;
  stats.critic_loss = loss.scalar();
  if (!std::isfinite(stats.critic_loss)) {
    throw TrainingError("Q loss is not finite at update " + std::to_string(updates_));
  }
  const auto ps = q_net.params();
  for (nc::Parameter* p : ps) p->zero_grad();
  tape.backward(loss);
  nc::adam_step(ps, q_opt_);
  if (config_.target_update_freq > 0 && updates_ % config_.target_update_freq == 0) {
    nc::soft_update(q_net.params(), q_target.params(), 1.0);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Training.

namespace {

struct WarmStates {
  std::vector<int> ids;
  Matrix hidden, cell;
};

WarmStates warm(const env::Environment& env, const std::vector<corpus::StudentTrace>& traces) {
  // Targets do not affect the warm state; uniform weights keep reset happy.
  const Index k = env.num_kcs();
  const Matrix uniform = Matrix::Constant(static_cast<Index>(traces.size()), k, 1.0 / static_cast<double>(k));
  env::EnvState st = env.reset(traces, uniform, env::TargetRule::fixed);
  return {st.student_ids, st.hidden, st.cell};
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

Matrix pick_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = m.row(static_cast<Index>(idx[i]));
  return out;
}

}  // namespace

TrainResult train_agent(const env::Environment& env, const corpus::Corpus& corpus,
                        const std::vector<corpus::StudentTrace>& train_traces,
                        const std::vector<corpus::StudentTrace>& eval_traces, tasks::TaskKind task,
                        const tasks::TransitionMatrix* matrix, const AgentConfig& config,
                        const std::filesystem::path& divergence_checkpoint) {
  config.validate();
  if (train_traces.empty() || eval_traces.empty()) throw DataError("training needs train and evaluation students");
  const auto clock_start = std::chrono::steady_clock::now();
  const AgentShape shape = AgentShape::from_env(env);
  const int warmup = env.config().warmup;

  TrainResult result{Agent(config, shape, &env.model(), &env.kcs()), {}};
  Agent& agent = result.agent;
  Agent last_good = agent;
  ReplayBuffer buffer(static_cast<std::size_t>(config.buffer_capacity));
  Rng rng(derive_seed(config.seed, 0x7EA1));

  const WarmStates train_warm = warm(env, train_traces);
  const WarmStates eval_warm = warm(env, eval_traces);
  const tasks::TaskTargets eval_targets =
      tasks::make_targets(task, corpus, eval_traces, warmup, matrix, env.config().seed);

  auto evaluate = [&](int epoch) {
    env::EnvState st =
        env.reset_states(eval_warm.ids, eval_warm.hidden, eval_warm.cell, eval_targets.weights, eval_targets.rule);
    const double baseline = tasks::baseline_mean_knowledge(st.kc_knowledge);
    const env::Trajectory traj = env::rollout(env, st, agent.policy(derive_seed(config.seed, 0xE7A1)), true);
    std::vector<double> norm;
    for (double r : tasks::score(traj, task)) norm.push_back(tasks::normalize_score(r, baseline));
    CurvePoint p;
    p.epoch = epoch;
    double sum = 0.0;
    for (double v : norm) sum += v;
    p.mean_score = sum / static_cast<double>(norm.size());
    double ss = 0.0;
    for (double v : norm) ss += (v - p.mean_score) * (v - p.mean_score);
    p.std = norm.size() > 1 ? std::sqrt(ss / static_cast<double>(norm.size() - 1)) : 0.0;
    p.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    result.curve.push_back(p);
  };

  const std::size_t per_epoch = std::min<std::size_t>(static_cast<std::size_t>(config.students_per_epoch),
                                                      train_traces.size());
  std::vector<std::size_t> order(train_traces.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  try {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      const std::uint64_t epoch_seed = derive_seed(config.seed, 0x10000 + static_cast<std::uint64_t>(epoch));
      Rng pick_rng(epoch_seed);
      shuffle(order, pick_rng);
      std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(per_epoch));
      std::sort(chosen.begin(), chosen.end());
      const auto traces = pick(train_traces, chosen);
      const tasks::TaskTargets targets = tasks::make_targets(task, corpus, traces, warmup, matrix, epoch_seed);
      env::EnvState st = env.reset_states(pick(train_warm.ids, chosen), pick_rows(train_warm.hidden, chosen),
                                          pick_rows(train_warm.cell, chosen), targets.weights, targets.rule);
      // Fresh response streams each epoch so students are not replayed identically.
      for (std::size_t i = 0; i < st.streams.size(); ++i) {
        st.streams[i].seed(derive_seed(derive_seed(epoch_seed, 0x5EED), static_cast<std::uint64_t>(st.student_ids[i])));
      }

      const double progress = static_cast<double>(epoch) / static_cast<double>(config.epochs);
      const double sigma = config.explore_sigma * (1.0 - progress);
      const double decay_epochs = config.eps_decay_fraction * static_cast<double>(config.epochs);
      const double eps = decay_epochs > 0.0
                             ? config.eps_start + (config.eps_end - config.eps_start) *
                                                      std::min(1.0, static_cast<double>(epoch) / decay_epochs)
                             : config.eps_end;

      while (!st.done) {
        const Matrix obs = env.observation(st);
        env::StepOutcome out;
        Matrix actions;
        std::vector<int> ids;
        if (agent.discrete()) {
          ids = agent.act_discrete(obs, eps, rng);
          out = env.step_questions(st, ids);
          actions = pick_rows(env.questions(), std::vector<std::size_t>(ids.begin(), ids.end()));
        } else {
          actions = agent.explore(obs, sigma, rng);
          out = env.step(st, actions);
        }
        const Matrix next_obs = env.observation(st);
        for (Index r = 0; r < st.size(); ++r) {
          const auto i = static_cast<std::size_t>(r);
          TransitionRecord rec;
          rec.state = obs.row(r);
          rec.action = actions.row(r);
          rec.action_id = ids.empty() ? -1 : ids[i];
          rec.reward = out.reward[i];
          rec.next_state = next_obs.row(r);
          rec.done = out.done;
          rec.target = out.targets.row(r);
          rec.next_target = st.targets.row(r);
          rec.y_hat = out.y_hat[i];
          rec.prior = out.knowledge_before[i];
          rec.next_prior = st.knowledge[i];
          buffer.push(std::move(rec));
        }
      }

      const auto batch_size = static_cast<std::size_t>(config.batch_size);
      for (int u = 0; u < config.updates_per_epoch && buffer.size() >= batch_size; ++u) {
        agent.update(buffer.sample(batch_size, rng), rng);
      }
      if ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs) {
        evaluate(epoch + 1);
        if (!std::isfinite(result.curve.back().mean_score)) {
          throw TrainingError("evaluation score is not finite at epoch " + std::to_string(epoch + 1));
        }
        last_good = agent;
      }
    }
  } catch (const TrainingError&) {
    if (!divergence_checkpoint.empty()) save_agent(divergence_checkpoint, last_good);
    throw;
  }
  return result;
}

void write_curve_csv(const std::filesystem::path& path, const std::vector<CurvePoint>& curve) {
  // Timings stay out of the file so reruns produce identical bytes.
  std::string text = "epoch,mean_score,std\n";
  char buf[128];
  for (const CurvePoint& p : curve) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g\n", p.epoch, p.mean_score, p.std);
    text += buf;
  }
  nc::write_text_atomic(path, text);
}

void save_agent(const std::filesystem::path& path, Agent& agent) {
  nc::Blob blob;
  const AgentShape& s = agent.shape();
  blob.meta["kind"] = "kcrl.agent";
  blob.meta["version"] = kAgentCheckpointVersion;
  blob.meta["config"] = to_json(agent.config());
  blob.meta["shape"] = {{"obs_dim", s.obs_dim},           {"state_dim", s.state_dim},
                        {"action_dim", s.action_dim},     {"num_questions", s.num_questions},
                        {"action_bound", s.action_bound}, {"reward_scale", s.reward_scale},
                        {"gamma", s.gamma}};
  blob.meta["updates"] = agent.updates();
  if (agent.uses_mve()) {
    blob.meta["kt"] = {{"dim", agent.mve.model.dim()},
                       {"state_dim", agent.mve.model.state_dim()},
                       {"hidden_dim", agent.mve.model.hidden_dim()}};
    blob.put("mve.kcs", agent.mve.kcs);
  }
  nc::store_params(blob, agent.params());
  nc::write_blob(path, blob);
}

Agent load_agent(const std::filesystem::path& path) {
  const nc::Blob blob = nc::read_blob(path);
  if (blob.meta.value("kind", "") != "kcrl.agent") throw DataError(path.string() + " is not an agent checkpoint");
  const int version = blob.meta.value("version", 0);
  if (version != kAgentCheckpointVersion) {
    throw VersionError("agent checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kAgentCheckpointVersion) + ")");
  }
  const AgentConfig config = agent_config_from_json(blob.meta.at("config"));
  AgentShape s;
  const auto& sj = blob.meta.at("shape");
  s.obs_dim = sj.at("obs_dim");
  s.state_dim = sj.at("state_dim");
  s.action_dim = sj.at("action_dim");
  s.num_questions = sj.at("num_questions");
  s.action_bound = sj.at("action_bound");
  s.reward_scale = sj.at("reward_scale");
  s.gamma = sj.at("gamma");
  std::unique_ptr<Agent> agent;
  if (config.mve != MveMode::off) {
    const auto& k = blob.meta.at("kt");
    const kt::KTModel shell = kt::KTModel::zeros(k.at("dim"), k.at("state_dim"), k.at("hidden_dim"));
    const Matrix kcs = blob.get("mve.kcs");
    agent = std::make_unique<Agent>(config, s, &shell, &kcs);
  } else {
    agent = std::make_unique<Agent>(config, s);
  }
  nc::load_params(blob, agent->params());
  return *agent;
}

}  // namespace kcrl::agents
