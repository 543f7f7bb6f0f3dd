#pragma once

#include "kcrl/env.hpp"
#include "kcrl/metrics.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace kcrl::tasks {

using nc::Index;
using nc::Matrix;
using nc::RowVector;

enum class TaskKind {
  global = 1,     // every KC
  practiced = 2,  // most frequent KC of the last warmup window
  upcoming = 3,   // KC sampled from the population's KC-to-KC transitions
  weakest = 4,    // lowest predicted KC, re-selected every step
};

std::string task_name(TaskKind kind);
/// Accepts "1".."4" or global/practiced/upcoming/weakest. Throws ConfigError otherwise.
TaskKind parse_task(const std::string& text);

/// Zero-based [begin, end) index windows around the end of the warmup:
/// the last ten warmup exercises and the ten after them.
struct Windows {
  int before_begin, before_end, after_begin, after_end;
};
Windows windows_for(int warmup);

/// Most frequent KC among the last ten warmup exercises; ties go to the lowest id.
int select_target_practiced(const corpus::Corpus& corpus, const corpus::StudentTrace& trace, int warmup);

struct TransitionMatrix {
  Matrix counts;  // [K, K], counts(c, c') = times c' followed c
  Matrix probs;   // row-normalised counts; rows without data stay zero

  bool has_data(int kc) const { return counts.row(kc).sum() > 0.0; }
};

/// For each trace, every KC seen in the before window is paired with every KC
/// seen in the after window. Traces shorter than warmup + 10 are skipped.
TransitionMatrix build_transition_matrix(const corpus::Corpus& corpus, const std::vector<corpus::StudentTrace>& traces,
                                         int warmup);

/// Marginal over the KCs of the before window (uniform prior, rows without
/// data left out). Falls back to uniform over all KCs when nothing is left.
RowVector upcoming_distribution(const TransitionMatrix& matrix, const corpus::Corpus& corpus,
                                const corpus::StudentTrace& trace, int warmup, bool* fell_back = nullptr);
int sample_target_upcoming(const TransitionMatrix& matrix, const corpus::Corpus& corpus,
                           const corpus::StudentTrace& trace, int warmup, std::uint64_t seed,
                           bool* fell_back = nullptr);

/// argmin of the knowledge vector; ties go to the lowest id.
int select_target_weakest(const RowVector& knowledge);
/// One argmin per row of an [N, K] knowledge matrix.
std::vector<int> select_targets_weakest(const Matrix& knowledge);

/// Target weights and rule for env::Environment::reset.
struct TaskTargets {
  env::TargetRule rule = env::TargetRule::fixed;
  Matrix weights;  // [N, K]; empty for the weakest-KC task
};
TaskTargets make_targets(TaskKind kind, const corpus::Corpus& corpus, const std::vector<corpus::StudentTrace>& traces,
                         int warmup, const TransitionMatrix* matrix, std::uint64_t seed);

/// Net knowledge improvement per student. Fixed tasks average final - initial
/// over the target set; the weakest-KC task averages it over the KC selected
/// at each step (repeats count). Throws ProtocolError for an unfinished trajectory.
std::vector<double> score(const env::Trajectory& trajectory, TaskKind kind);

/// Mean predicted knowledge over students and KCs.
double baseline_mean_knowledge(const Matrix& kc_knowledge);

/// Improvement as a percentage of the headroom 1 - baseline. Throws DataError
/// unless the baseline lies in (0, 1).
double normalize_score(double raw, double baseline_mean_knowledge);
/// One-decimal rendering used in reports, e.g. "68.2".
std::string format_percent(double pct);

struct EvalResult {
  std::vector<int> student_ids;
  std::vector<double> raw;
  std::vector<double> normalized;
  double baseline = 0.0;  // mean knowledge at reset
  env::Trajectory trajectory;
};

/// Resets `traces`, runs `policy` for the horizon and scores the task.
EvalResult evaluate_policy(const env::Environment& env, const corpus::Corpus& corpus,
                           const std::vector<corpus::StudentTrace>& traces, TaskKind kind,
                           const TransitionMatrix* matrix, const env::Policy& policy, bool use_retrieval,
                           std::uint64_t target_seed);

/// Uniform question choice at every step, drawn from a stream seeded by `seed`.
env::Policy random_policy(Index num_questions, std::uint64_t seed);

EvalResult baseline_random(const env::Environment& env, const corpus::Corpus& corpus,
                           const std::vector<corpus::StudentTrace>& traces, TaskKind kind,
                           const TransitionMatrix* matrix, std::uint64_t seed, std::uint64_t target_seed);

/// Replays each student's real next `horizon` interactions after the warmup,
/// with the recorded responses. Throws DataError for traces that are too short.
EvalResult baseline_historical(const env::Environment& env, const corpus::Corpus& corpus,
                               const std::vector<corpus::StudentTrace>& traces, TaskKind kind,
                               const TransitionMatrix* matrix, std::uint64_t target_seed);

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  metrics::Interval ci;
  std::size_t n = 0;
};
Summary summarize(const std::vector<double>& values, std::uint64_t seed, int resamples = 2000);

/// CSV rows: task,policy,student_id,raw_score,normalized_pct (header written when `header`).
void append_score_csv(std::ostream& out, TaskKind kind, const std::string& policy, const EvalResult& result,
                      bool header);

}  // namespace kcrl::tasks
