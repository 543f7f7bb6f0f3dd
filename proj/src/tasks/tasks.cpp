#include "kcrl/tasks.hpp"

#include "kcrl/error.hpp"
#include "kcrl/random.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>

namespace kcrl::tasks {

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::global: return "global";
    case TaskKind::practiced: return "practiced";
    case TaskKind::upcoming: return "upcoming";
    case TaskKind::weakest: return "weakest";
  }
  return "unknown";
}

TaskKind parse_task(const std::string& text) {
  if (text == "1" || text == "global") return TaskKind::global;
  if (text == "2" || text == "practiced") return TaskKind::practiced;
  if (text == "3" || text == "upcoming") return TaskKind::upcoming;
  if (text == "4" || text == "weakest") return TaskKind::weakest;
  throw ConfigError("unknown task '" + text + "' (expected 1-4 or global/practiced/upcoming/weakest)");
}

Windows windows_for(int warmup) {
  if (warmup < 10) throw ConfigError("task windows need a warmup of at least 10, got " + std::to_string(warmup));
  return {warmup - 10, warmup, warmup, warmup + 10};
}

namespace {

std::set<int> kcs_in(const corpus::Corpus& c, const corpus::StudentTrace& t, int begin, int end) {
  std::set<int> out;
  for (int i = begin; i < end && i < static_cast<int>(t.steps.size()); ++i) {
    for (int kc : c.questions.at(static_cast<std::size_t>(t.steps[static_cast<std::size_t>(i)].question)).kcs) {
      out.insert(kc);
    }
  }
  return out;
}

}  // namespace

int select_target_practiced(const corpus::Corpus& c, const corpus::StudentTrace& t, int warmup) {
  const Windows w = windows_for(warmup);
  if (static_cast<int>(t.steps.size()) < w.before_end) {
    throw DataError("student " + std::to_string(t.student_id) + " has fewer than " + std::to_string(warmup) +
                    " interactions");
  }
  std::vector<int> counts(static_cast<std::size_t>(c.num_kcs()), 0);
  for (int i = w.before_begin; i < w.before_end; ++i) {
    for (int kc : c.questions.at(static_cast<std::size_t>(t.steps[static_cast<std::size_t>(i)].question)).kcs) {
      ++counts[static_cast<std::size_t>(kc)];
    }
  }
  int best = 0;
  for (int k = 1; k < c.num_kcs(); ++k) {
    if (counts[static_cast<std::size_t>(k)] > counts[static_cast<std::size_t>(best)]) best = k;
  }
  return best;
}

TransitionMatrix build_transition_matrix(const corpus::Corpus& c, const std::vector<corpus::StudentTrace>& traces,
                                         int warmup) {
  const Windows w = windows_for(warmup);
  const Index k = c.num_kcs();
  TransitionMatrix m{Matrix::Zero(k, k), Matrix::Zero(k, k)};
  for (const auto& t : traces) {
    if (static_cast<int>(t.steps.size()) < w.after_end) continue;
    const auto before = kcs_in(c, t, w.before_begin, w.before_end);
    const auto after = kcs_in(c, t, w.after_begin, w.after_end);
    for (int a : before) {
      for (int b : after) m.counts(a, b) += 1.0;
    }
  }
  for (Index r = 0; r < k; ++r) {
    const double total = m.counts.row(r).sum();
    if (total > 0.0) m.probs.row(r) = m.counts.row(r) / total;
  }
  return m;
}

RowVector upcoming_distribution(const TransitionMatrix& m, const corpus::Corpus& c, const corpus::StudentTrace& t,
                                int warmup, bool* fell_back) {
  const Windows w = windows_for(warmup);
  const Index k = c.num_kcs();
  if (m.probs.rows() != k) throw DimensionError("transition matrix does not match the corpus KC count");
  std::vector<int> rows;
  for (int kc : kcs_in(c, t, w.before_begin, w.before_end)) {
    if (m.has_data(kc)) rows.push_back(kc);
  }
  if (fell_back) *fell_back = rows.empty();
  if (rows.empty()) return RowVector::Constant(k, 1.0 / static_cast<double>(k));
  RowVector p = RowVector::Zero(k);
  for (int r : rows) p += m.probs.row(r) / static_cast<double>(rows.size());
  return p;
}

int sample_target_upcoming(const TransitionMatrix& m, const corpus::Corpus& c, const corpus::StudentTrace& t,
                           int warmup, std::uint64_t seed, bool* fell_back) {
  const RowVector p = upcoming_distribution(m, c, t, warmup, fell_back);
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t.student_id)));
  const double u = uniform01(rng) * p.sum();
  double acc = 0.0;
  Index last = 0;
  for (Index i = 0; i < p.size(); ++i) {
    if (p(i) <= 0.0) continue;
    last = i;
    acc += p(i);
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(last);
}

int select_target_weakest(const RowVector& knowledge) {
  if (knowledge.size() == 0) throw DataError("no KCs to choose from");
  Index best = 0;
  for (Index i = 1; i < knowledge.size(); ++i) {
    if (knowledge(i) < knowledge(best)) best = i;
  }
  return static_cast<int>(best);
}

std::vector<int> select_targets_weakest(const Matrix& knowledge) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(knowledge.rows()));
  for (Index r = 0; r < knowledge.rows(); ++r) out.push_back(select_target_weakest(knowledge.row(r)));
  return out;
}

TaskTargets make_targets(TaskKind kind, const corpus::Corpus& c, const std::vector<corpus::StudentTrace>& traces,
                         int warmup, const TransitionMatrix* matrix, std::uint64_t seed) {
  const Index n = static_cast<Index>(traces.size());
  const Index k = c.num_kcs();
  TaskTargets out;
  switch (kind) {
    case TaskKind::global:
      out.weights = Matrix::Constant(n, k, 1.0 / static_cast<double>(k));
      break;
    case TaskKind::practiced:
      out.weights = Matrix::Zero(n, k);
      for (Index r = 0; r < n; ++r) {
        out.weights(r, select_target_practiced(c, traces[static_cast<std::size_t>(r)], warmup)) = 1.0;
      }
      break;
    case TaskKind::upcoming:
      if (!matrix) throw ConfigError("the upcoming-KC task needs a transition matrix");
      out.weights = Matrix::Zero(n, k);
      for (Index r = 0; r < n; ++r) {
        out.weights(r, sample_target_upcoming(*matrix, c, traces[static_cast<std::size_t>(r)], warmup, seed)) = 1.0;
      }
      break;
    case TaskKind::weakest:
      out.rule = env::TargetRule::weakest;
      break;
  }
  return out;
}

std::vector<double> score(const env::Trajectory& traj, TaskKind kind) {
  if (traj.steps.empty() || !traj.steps.back().done) throw ProtocolError("cannot score an unfinished trajectory");
  const Index n = traj.initial_knowledge.rows();
  const Matrix delta = traj.final_knowledge - traj.initial_knowledge;
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (Index r = 0; r < n; ++r) {
    double acc = 0.0;
    if (kind == TaskKind::weakest) {
      for (const auto& s : traj.steps) acc += delta(r, s.target_kc[static_cast<std::size_t>(r)]);
      acc /= static_cast<double>(traj.steps.size());
    } else {
      // Target set = KCs with non-zero weight at the first step.
      const auto& w = traj.steps.front().targets;
      int size = 0;
      for (Index c = 0; c < w.cols(); ++c) {
        if (w(r, c) != 0.0) {
          acc += delta(r, c);
          ++size;
        }
      }
      acc /= static_cast<double>(size);
    }
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

double baseline_mean_knowledge(const Matrix& kc_knowledge) {
  if (kc_knowledge.size() == 0) throw DataError("no knowledge values to average");
  return kc_knowledge.mean();
}

double normalize_score(double raw, double baseline) {
  if (!(baseline > 0.0 && baseline < 1.0)) {
    throw DataError("baseline mean knowledge must lie in (0, 1), got " + std::to_string(baseline));
  }
  return raw / (1.0 - baseline) * 100.0;
}

std::string format_percent(double pct) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", pct);
  return buf;
}

EvalResult evaluate_policy(const env::Environment& env, const corpus::Corpus& c,
                           const std::vector<corpus::StudentTrace>& traces, TaskKind kind,
                           const TransitionMatrix* matrix, const env::Policy& policy, bool use_retrieval,
                           std::uint64_t target_seed) {
  const TaskTargets targets = make_targets(kind, c, traces, env.config().warmup, matrix, target_seed);
  env::EnvState st = env.reset(traces, targets.weights, targets.rule);
  EvalResult out;
  out.student_ids = st.student_ids;
  out.baseline = baseline_mean_knowledge(st.kc_knowledge);
  out.trajectory = env::rollout(env, st, policy, use_retrieval);
  out.raw = score(out.trajectory, kind);
  for (double r : out.raw) out.normalized.push_back(normalize_score(r, out.baseline));
  return out;
}

env::Policy random_policy(Index num_questions, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng, num_questions](const env::EnvState& s, const Matrix&) {
    env::Action a;
    a.questions.reserve(static_cast<std::size_t>(s.size()));
    for (Index r = 0; r < s.size(); ++r) {
      a.questions.push_back(static_cast<int>(uniform_index(*rng, static_cast<std::size_t>(num_questions))));
    }
    return a;
  };
}

EvalResult baseline_random(const env::Environment& env, const corpus::Corpus& c,
                           const std::vector<corpus::StudentTrace>& traces, TaskKind kind,
                           const TransitionMatrix* matrix, std::uint64_t seed, std::uint64_t target_seed) {
  return evaluate_policy(env, c, traces, kind, matrix, random_policy(env.num_questions(), seed), true, target_seed);
}

EvalResult baseline_historical(const env::Environment& env, const corpus::Corpus& c,
                               const std::vector<corpus::StudentTrace>& traces, TaskKind kind,
                               const TransitionMatrix* matrix, std::uint64_t target_seed) {
  const int warmup = env.config().warmup;
  const int horizon = env.config().horizon;
  std::string short_ids;
  for (const auto& t : traces) {
    if (static_cast<int>(t.steps.size()) < warmup + horizon) short_ids += " " + std::to_string(t.student_id);
  }
  if (!short_ids.empty()) {
    throw DataError("historical baseline needs " + std::to_string(warmup + horizon) + " interactions: students" +
                    short_ids);
  }
  const TaskTargets targets = make_targets(kind, c, traces, warmup, matrix, target_seed);
  env::EnvState st = env.reset(traces, targets.weights, targets.rule);
  EvalResult out;
  out.student_ids = st.student_ids;
  out.baseline = baseline_mean_knowledge(st.kc_knowledge);
  out.trajectory.initial_knowledge = st.kc_knowledge;
  std::vector<int> qs(traces.size()), ys(traces.size());
  for (int t = 0; t < horizon; ++t) {
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const auto& it = traces[i].steps[static_cast<std::size_t>(warmup + t)];
      qs[i] = it.question;
      ys[i] = it.response;
    }
    out.trajectory.steps.push_back(env.step_observed(st, qs, ys));
  }
  out.trajectory.final_knowledge = st.kc_knowledge;
  out.raw = score(out.trajectory, kind);
  for (double r : out.raw) out.normalized.push_back(normalize_score(r, out.baseline));
  return out;
}

Summary summarize(const std::vector<double>& values, std::uint64_t seed, int resamples) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = metrics::mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  s.ci = metrics::bootstrap_mean_ci(values, 0.95, resamples, seed);
  return s;
}

void append_score_csv(std::ostream& out, TaskKind kind, const std::string& policy, const EvalResult& r, bool header) {
  if (header) out << "task,policy,student_id,raw_score,normalized_pct\n";
  char buf[256];
  for (std::size_t i = 0; i < r.raw.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%.10g,%.10g\n", task_name(kind).c_str(), policy.c_str(), r.student_ids[i],
                  r.raw[i], r.normalized[i]);
    out << buf;
  }
}

}  // namespace kcrl::tasks
