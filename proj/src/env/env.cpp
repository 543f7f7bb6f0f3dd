#include "kcrl/env.hpp"

#include "kcrl/error.hpp"
#include "kcrl/numcore/rowwise.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace kcrl::env {

void EnvConfig::validate() const {
  if (horizon < 1) throw ConfigError("env.horizon must be >= 1");
  if (warmup < 0) throw ConfigError("env.warmup must be >= 0");
  if (!(reward_scale > 0.0)) throw ConfigError("env.reward_scale must be > 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("env.gamma must be in [0, 1]");
}

Environment::Environment(kt::KTModel model, Matrix fused_questions, Matrix kc_vectors, EnvConfig config)
    : model_(std::move(model)), questions_(std::move(fused_questions)), kcs_(std::move(kc_vectors)), config_(config) {
  config_.validate();
  if (questions_.rows() == 0) throw DataError("environment needs at least one question");
  if (kcs_.rows() == 0) throw DataError("environment needs at least one KC");
  if (questions_.cols() != model_.dim() || kcs_.cols() != model_.dim()) {
    throw DimensionError("question/KC tables do not match the KT model width");
  }
  question_feats_ = model_.query_features(questions_);
  kc_feats_ = model_.query_features(kcs_);
  action_bound_ = questions_.cwiseAbs().maxCoeff();
  if (!(action_bound_ > 0.0)) action_bound_ = 1.0;
}

Matrix Environment::knowledge_all(const Matrix& hidden) const {
  return model_.score_all(model_.state_features(hidden), kc_feats_);
}

Matrix Environment::observation(const EnvState& state) const {
  const Index n = state.size();
  const int s = model_.state_dim();
  Matrix obs(n, observation_dim());
  obs.leftCols(s) = state.hidden;
  obs.middleCols(s, s) = state.cell;
  // Target embedding, accumulated row by row so rows never interact.
  for (Index r = 0; r < n; ++r) {
    RowVector z = RowVector::Zero(model_.dim());
    for (Index k = 0; k < kcs_.rows(); ++k) {
      const double w = state.targets(r, k);
      if (w != 0.0) z += w * kcs_.row(k);
    }
    obs.block(r, 2 * s, 1, model_.dim()) = z;
  }
  return obs;
}

namespace {

double weighted(const Matrix& w, const Matrix& k, Index r) {
  double acc = 0.0;
  for (Index c = 0; c < w.cols(); ++c) acc += w(r, c) * k(r, c);
  return acc;
}

Index argmin_row(const Matrix& m, Index r) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c) {
    if (m(r, c) < m(r, best)) best = c;
  }
  return best;
}

int single_target(const Matrix& w, Index r) {
  int found = -1;
  for (Index c = 0; c < w.cols(); ++c) {
    if (w(r, c) == 0.0) continue;
    if (found >= 0) return -1;
    found = static_cast<int>(c);
  }
  return found;
}

}  // namespace

void Environment::refresh_targets(EnvState& state) const {
  if (state.rule == TargetRule::weakest) {
    state.targets.setZero(state.size(), num_kcs());
    for (Index r = 0; r < state.size(); ++r) state.targets(r, argmin_row(state.kc_knowledge, r)) = 1.0;
  }
  state.knowledge.resize(static_cast<std::size_t>(state.size()));
  for (Index r = 0; r < state.size(); ++r) {
    state.knowledge[static_cast<std::size_t>(r)] = weighted(state.targets, state.kc_knowledge, r);
  }
}

EnvState Environment::reset_states(std::vector<int> student_ids, const Matrix& hidden, const Matrix& cell,
                                   const Matrix& targets, TargetRule rule) const {
  const Index n = static_cast<Index>(student_ids.size());
  if (hidden.rows() != n || cell.rows() != n || hidden.cols() != model_.state_dim() ||
      cell.cols() != model_.state_dim()) {
    throw DimensionError("reset: state shape does not match the batch");
  }
  EnvState st;
  st.rule = rule;
  st.hidden = hidden;
  st.cell = cell;
  if (rule == TargetRule::fixed) {
    if (targets.rows() != n || targets.cols() != num_kcs()) throw DimensionError("reset: target weights must be [N, K]");
    for (Index r = 0; r < n; ++r) {
      if (std::abs(targets.row(r).sum() - 1.0) > 1e-9 || targets.row(r).minCoeff() < 0.0) {
        throw DataError("reset: target weights of student " + std::to_string(student_ids[static_cast<std::size_t>(r)]) +
                        " are not a distribution");
      }
    }
    st.targets = targets;
  }
  st.streams.reserve(static_cast<std::size_t>(n));
  for (int id : student_ids) st.streams.emplace_back(derive_seed(config_.seed, static_cast<std::uint64_t>(id)));
  st.student_ids = std::move(student_ids);
  st.kc_knowledge = knowledge_all(st.hidden);
  refresh_targets(st);
  return st;
}

EnvState Environment::reset(const std::vector<corpus::StudentTrace>& traces, const Matrix& targets,
                            TargetRule rule) const {
  std::string short_ids;
  for (const auto& t : traces) {
    if (static_cast<int>(t.steps.size()) < config_.warmup) short_ids += " " + std::to_string(t.student_id);
  }
  if (!short_ids.empty()) {
    throw DataError("traces shorter than the warmup of " + std::to_string(config_.warmup) + ": students" + short_ids);
  }
  const Index n = static_cast<Index>(traces.size());
  Matrix hidden(n, model_.state_dim()), cell(n, model_.state_dim());
  std::vector<int> ids;
  for (Index r = 0; r < n; ++r) {
    const auto& t = traces[static_cast<std::size_t>(r)];
    const auto s = kt::warmup_state(model_, t.steps, questions_, config_.warmup);
    hidden.row(r) = s.hidden;
    cell.row(r) = s.cell;
    ids.push_back(t.student_id);
  }
  return reset_states(std::move(ids), hidden, cell, targets, rule);
}

StepOutcome Environment::transition(EnvState& state, const Matrix& actions, std::vector<int> questions,
                                    std::span<const int> forced) const {
  if (state.done) throw ProtocolError("step called on a finished episode");
  const Index n = state.size();
  if (actions.rows() != n || actions.cols() != model_.dim()) {
    throw DimensionError("actions must be [" + std::to_string(n) + ", " + std::to_string(model_.dim()) + "]");
  }
  StepOutcome out;
  out.student_ids = state.student_ids;
  out.question = std::move(questions);
  out.targets = state.targets;
  out.knowledge_before = state.knowledge;
  out.y_hat.resize(static_cast<std::size_t>(n));
  out.response.resize(static_cast<std::size_t>(n));
  out.target_kc.resize(static_cast<std::size_t>(n));

  const Matrix sf = model_.state_features(state.hidden);
  Matrix qf;
  if (out.question.empty()) {
    qf = model_.query_features(actions);
    out.question.assign(static_cast<std::size_t>(n), -1);
  }
  for (Index r = 0; r < n; ++r) {
    const auto i = static_cast<std::size_t>(r);
    const int q = out.question[i];
    const double p = model_.score(sf.row(r), q >= 0 ? RowVector(question_feats_.row(q)) : RowVector(qf.row(r)));
    if (!(p > 0.0 && p < 1.0)) {
      throw ProtocolError("response probability " + std::to_string(p) + " outside (0, 1) for student " +
                          std::to_string(state.student_ids[i]));
    }
    out.y_hat[i] = p;
    // The draw is taken even when the response is forced so streams stay aligned.
    const double u = uniform01(state.streams[i]);
    out.response[i] = forced.empty() ? (u < p ? 1 : 0) : forced[i];
    out.target_kc[i] = single_target(state.targets, r);
  }

  Matrix x(n, 2 * model_.dim());
  x.leftCols(model_.dim()) = actions;
  for (Index r = 0; r < n; ++r) {
    x.block(r, model_.dim(), 1, model_.dim()) = model_.response_emb.value.row(out.response[static_cast<std::size_t>(r)]);
  }
  const auto next = nc::rowwise::lstm_step(state.hidden, state.cell, x, model_.lstm.w_input.value,
                                           model_.lstm.w_hidden.value, model_.lstm.bias.value);
  state.hidden = next.hidden;
  state.cell = next.cell;
  state.kc_knowledge = knowledge_all(state.hidden);

  out.knowledge_after.resize(static_cast<std::size_t>(n));
  out.reward.resize(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const auto i = static_cast<std::size_t>(r);
    out.knowledge_after[i] = weighted(out.targets, state.kc_knowledge, r);
    out.reward[i] = config_.reward_scale * (out.knowledge_after[i] - out.knowledge_before[i]);
  }
  refresh_targets(state);
  ++state.step;
  state.done = state.step >= config_.horizon;
  out.done = state.done;
  return out;
}

StepOutcome Environment::step(EnvState& state, const Matrix& actions) const {
  return transition(state, actions, {}, {});
}

StepOutcome Environment::step_questions(EnvState& state, std::span<const int> questions) const {
  return step_observed(state, questions, {});
}

StepOutcome Environment::step_observed(EnvState& state, std::span<const int> questions,
                                       std::span<const int> responses) const {
  const Index n = state.size();
  if (static_cast<Index>(questions.size()) != n) throw DimensionError("one question id per student required");
  if (!responses.empty() && static_cast<Index>(responses.size()) != n) {
    throw DimensionError("one response per student required");
  }
  for (int r : responses) {
    if (r != 0 && r != 1) throw DataError("responses must be 0 or 1");
  }
  Matrix actions(n, model_.dim());
  for (Index r = 0; r < n; ++r) {
    const int q = questions[static_cast<std::size_t>(r)];
    if (q < 0 || q >= num_questions()) throw DataError("unknown question id " + std::to_string(q));
    actions.row(r) = questions_.row(q);
  }
  return transition(state, actions, {questions.begin(), questions.end()}, responses);
}

int nearest_question(const Matrix& table, const RowVector& raw) {
  if (table.rows() == 0) throw DataError("cannot map an action onto an empty question table");
  if (raw.size() != table.cols()) throw DimensionError("action width does not match the question table");
  const double rn = raw.norm();
  int best = 0;
  double best_sim = -2.0;
  for (Index q = 0; q < table.rows(); ++q) {
    const double tn = table.row(q).norm();
    const double denom = rn * tn;
    const double sim = denom > 0.0 ? table.row(q).dot(raw) / denom : 0.0;
    // Similarities within rounding noise count as ties and keep the lower id.
    if (sim > best_sim + 1e-12) {
      best_sim = sim;
      best = static_cast<int>(q);
    }
  }
  return best;
}

std::vector<int> nearest_questions(const Matrix& table, const Matrix& raw) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(raw.rows()));
  for (Index r = 0; r < raw.rows(); ++r) out.push_back(nearest_question(table, raw.row(r)));
  return out;
}

Trajectory rollout(const Environment& env, EnvState& state, const Policy& policy, bool use_retrieval) {
  Trajectory traj;
  traj.initial_knowledge = state.kc_knowledge;
  while (!state.done) {
    Action a = policy(state, env.observation(state));
    if (!a.questions.empty()) {
      traj.steps.push_back(env.step_questions(state, a.questions));
    } else if (use_retrieval) {
      const auto ids = nearest_questions(env.questions(), a.vectors);
      traj.steps.push_back(env.step_questions(state, ids));
    } else {
      traj.steps.push_back(env.step(state, a.vectors));
    }
  }
  traj.final_knowledge = state.kc_knowledge;
  return traj;
}

void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "student_id,step,question_id,response,y_hat,target_kc,knowledge_before,knowledge_after,reward\n";
  char buf[256];
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const auto& s = traj.steps[t];
    for (std::size_t i = 0; i < s.student_ids.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%d,%zu,%d,%d,%.10g,%d,%.10g,%.10g,%.10g\n", s.student_ids[i], t, s.question[i],
                    s.response[i], s.y_hat[i], s.target_kc[i], s.knowledge_before[i], s.knowledge_after[i],
                    s.reward[i]);
      out << buf;
    }
  }
}

}  // namespace kcrl::env
