#pragma once

#include "kcrl/corpus.hpp"
#include "kcrl/embed.hpp"
#include "kcrl/numcore/lstm.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace kcrl::kt {

using nc::Index;
using nc::Matrix;
using nc::RowVector;

struct StudentState {
  RowVector hidden;
  RowVector cell;
  int step = 0;
};

/// States of many students advanced in lockstep; row b is student b.
struct BatchState {
  Matrix hidden;
  Matrix cell;
};

/// Recurrent student encoder plus a response classifier.
///
/// The recurrent input is [fused question | response embedding]. The
/// classifier projects the state to the embedding width, then scores
///   sigmoid(w_out . tanh(proj(s) W_state + query W_query + b_hidden) + b_out),
/// which is a one-hidden-layer perceptron over concat(proj(s), query) with its
/// first weight matrix split in two. The split lets many queries share the
/// per-state half of the work.
class KTModel {
 public:
  KTModel() = default;
  /// Uniform fan-in initialisation; forget-gate bias starts at 1.
  KTModel(int dim, int state_dim, int hidden_dim, std::uint64_t seed);
  static KTModel zeros(int dim, int state_dim, int hidden_dim);

  int dim() const { return static_cast<int>(response_emb.value.cols()); }
  int state_dim() const { return static_cast<int>(lstm.hidden_dim()); }
  int hidden_dim() const { return static_cast<int>(w_out.value.rows()); }

  std::vector<nc::Parameter*> params();
  std::vector<const nc::Parameter*> params() const;

  // Single-student inference.
  StudentState initial_state() const;
  StudentState advance_state(const StudentState& state, const RowVector& fused_question, int response) const;
  double predict_response(const StudentState& state, const RowVector& query) const;
  double predict_knowledge(const StudentState& state, const RowVector& kc_vector) const {
    return predict_response(state, kc_vector);
  }

  // Batched inference; row results never depend on the batch they sit in.
  BatchState initial_batch(Index students) const;
  BatchState advance(const BatchState& state, const Matrix& fused_questions, std::span<const int> responses) const;
  /// Per-state half of the classifier's hidden pre-activation, [B, hidden].
  Matrix state_features(const Matrix& hidden) const;
  /// Per-query half, bias included, [Q, hidden].
  Matrix query_features(const Matrix& queries) const;
  /// Probability for one (state features, query features) pair.
  double score(const RowVector& state_feature, const RowVector& query_feature) const;
  /// [B, Q] probabilities.
  Matrix score_all(const Matrix& state_feats, const Matrix& query_feats) const;

  // Tape forms for training.
  struct Bound {
    nc::LstmVars lstm;
    nc::Var response_emb, proj_w, proj_b, w_state, w_query, b_hidden, w_out, b_out;
  };
  Bound bind(nc::Tape& tape);
  static nc::Var classify(const Bound& b, nc::Var hidden, nc::Var queries);
  static nc::CellState step(const Bound& b, const nc::CellState& prev, nc::Var fused_questions,
                            std::span<const Index> responses);

  nc::LstmParams lstm;
  nc::Parameter response_emb;  // [2, d]: row y is z^{y}
  nc::Parameter proj_w;        // [state_dim, d]
  nc::Parameter proj_b;        // [1, d]
  nc::Parameter w_state;       // [d, hidden]
  nc::Parameter w_query;       // [d, hidden]
  nc::Parameter b_hidden;      // [1, hidden]
  nc::Parameter w_out;         // [hidden, 1]
  nc::Parameter b_out;         // [1, 1]

 private:
  RowVector input_row(const RowVector& fused, int response) const;
};

/// Fixed per-KC question samples for the sampling oracle.
class OracleSampler {
 public:
  OracleSampler() = default;
  /// Draws up to sample_size original questions of each KC, without
  /// replacement, on a stream fixed per KC. Throws DataError for a KC with no questions.
  OracleSampler(const corpus::Corpus& corpus, int sample_size, std::uint64_t seed);

  const std::vector<int>& questions(int kc) const { return per_kc_.at(static_cast<std::size_t>(kc)); }
  int num_kcs() const { return static_cast<int>(per_kc_.size()); }

 private:
  std::vector<std::vector<int>> per_kc_;
};

/// Mean predicted correctness over the KC's sampled questions.
double knowledge_state_oracle(const KTModel& model, const StudentState& state, int kc,
                              const OracleSampler& sampler, const Matrix& fused_questions);

/// Oracle knowledge of every KC for a batch of states: [B, K]. `query_feats`
/// are the model's query features of the fused question table.
Matrix oracle_all(const KTModel& model, const Matrix& state_feats, const Matrix& query_feats,
                  const OracleSampler& sampler);

/// Folds the first `warmup` interactions. Throws DataError if the prefix is shorter.
StudentState warmup_state(const KTModel& model, std::span<const corpus::Interaction> prefix,
                          const Matrix& fused_questions, int warmup);

struct TrainConfig {
  int epochs = 15;
  int batch_size = 32;
  double learning_rate = 3e-3;
  double max_grad_norm = 5.0;
  std::uint64_t seed = 5;
};

struct CalibrationConfig {
  int epochs = 5;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double max_grad_norm = 5.0;
  double kc_weight = 10.0;  // weight of the knowledge-state term
  int sample_size = 20;
  std::uint64_t seed = 6;
};

struct TrainLog {
  std::vector<double> epoch_loss;       // response term
  std::vector<double> epoch_kc_loss;    // knowledge-state term (calibration only)
};

/// Teacher-forced training on next-response BCE, averaged per trace then per
/// batch. The fused question table is read only.
TrainLog train_kt(KTModel& model, const std::vector<corpus::StudentTrace>& traces,
                  const Matrix& fused_questions, const TrainConfig& config);

/// Frozen teacher: a copy of a trained checkpoint plus its oracle sampler.
struct CalibrationTeacher {
  KTModel model;
  OracleSampler sampler;
};

CalibrationTeacher make_teacher(const KTModel& trained, const corpus::Corpus& corpus, int sample_size,
                                std::uint64_t seed);

/// Teacher oracle for every KC after each step of each trace: per trace [T, K].
std::vector<Matrix> teacher_targets(const CalibrationTeacher& teacher, const std::vector<corpus::StudentTrace>& traces,
                                    const Matrix& fused_questions);

/// Continues training with the response loss plus kc_weight times a
/// knowledge-state loss: at every step one uniformly drawn KC is queried with
/// its embedding and matched to the teacher's oracle.
TrainLog calibrate_kt(KTModel& model, const std::vector<corpus::StudentTrace>& traces, const Matrix& fused_questions,
                      const Matrix& kc_vectors, const CalibrationTeacher& teacher, const CalibrationConfig& config);

/// Teacher-forced predictions for steps 1..T-1 of each trace.
struct Predictions {
  std::vector<int> student;
  std::vector<int> step;
  std::vector<double> prob;
  std::vector<int> label;
};
Predictions predict_traces(const KTModel& model, const std::vector<corpus::StudentTrace>& traces,
                           const Matrix& fused_questions);

double heldout_auc(const KTModel& model, const std::vector<corpus::StudentTrace>& traces,
                   const Matrix& fused_questions);

/// Mean |predict_knowledge - own oracle| over every (student, step, KC) of
/// the traces; per_step (optional) receives one mean per (student, step).
double kc_mae(const KTModel& model, const std::vector<corpus::StudentTrace>& traces, const Matrix& fused_questions,
              const Matrix& kc_vectors, const OracleSampler& sampler, std::vector<double>* per_step = nullptr);

inline constexpr int kCheckpointVersion = 1;

void save_model(const std::filesystem::path& path, const KTModel& model, const nlohmann::json& training = {});
KTModel load_model(const std::filesystem::path& path, nlohmann::json* training = nullptr);

}  // namespace kcrl::kt
