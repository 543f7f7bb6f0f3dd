#include "kcrl/kt.hpp"

#include "kcrl/error.hpp"
#include "kcrl/metrics.hpp"
#include "kcrl/numcore/io.hpp"
#include "kcrl/numcore/optim.hpp"
#include "kcrl/numcore/rowwise.hpp"
#include "kcrl/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kcrl::kt {

namespace {

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_fused(const Matrix& fused, int dim) {
  if (fused.cols() != dim) {
    throw DimensionError("question table width " + std::to_string(fused.cols()) + " does not match model dimension " +
                         std::to_string(dim));
  }
}

void check_trace(const corpus::StudentTrace& t, Index num_questions) {
  for (const auto& it : t.steps) {
    if (it.question < 0 || it.question >= num_questions) {
      throw DataError("student " + std::to_string(t.student_id) + " references unknown question " +
                      std::to_string(it.question));
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Model.

KTModel KTModel::zeros(int dim, int state_dim, int hidden_dim) {
  if (dim < 1 || state_dim < 1 || hidden_dim < 1) throw ConfigError("kt dimensions must be positive");
  KTModel m;
  m.lstm = nc::LstmParams("kt.lstm", 2 * dim, state_dim);
  m.response_emb = nc::Parameter("kt.response_emb", 2, dim);
  m.proj_w = nc::Parameter("kt.proj_w", state_dim, dim);
  m.proj_b = nc::Parameter("kt.proj_b", 1, dim);
  m.w_state = nc::Parameter("kt.w_state", dim, hidden_dim);
  m.w_query = nc::Parameter("kt.w_query", dim, hidden_dim);
  m.b_hidden = nc::Parameter("kt.b_hidden", 1, hidden_dim);
  m.w_out = nc::Parameter("kt.w_out", hidden_dim, 1);
  m.b_out = nc::Parameter("kt.b_out", 1, 1);
  return m;
}

KTModel::KTModel(int dim, int state_dim, int hidden_dim, std::uint64_t seed) {
  *this = zeros(dim, state_dim, hidden_dim);
  std::mt19937_64 rng(derive_seed(seed, 0x47));
  nc::init_uniform(lstm.w_input, 2 * dim, rng);
  nc::init_uniform(lstm.w_hidden, state_dim, rng);
  nc::init_uniform(lstm.bias, state_dim, rng);
  lstm.bias.value.middleCols(state_dim, state_dim).setConstant(1.0);
  nc::init_uniform(response_emb, 1, rng);
  nc::init_uniform(proj_w, state_dim, rng);
  nc::init_uniform(proj_b, state_dim, rng);
  nc::init_uniform(w_state, 2 * dim, rng);
  nc::init_uniform(w_query, 2 * dim, rng);
  nc::init_uniform(b_hidden, 2 * dim, rng);
  nc::init_uniform(w_out, hidden_dim, rng);
  nc::init_uniform(b_out, hidden_dim, rng);
}

std::vector<nc::Parameter*> KTModel::params() {
  return {&lstm.w_input, &lstm.w_hidden, &lstm.bias, &response_emb, &proj_w, &proj_b,
          &w_state,      &w_query,       &b_hidden,  &w_out,        &b_out};
}

std::vector<const nc::Parameter*> KTModel::params() const {
  auto mut = const_cast<KTModel*>(this)->params();
  return {mut.begin(), mut.end()};
}

RowVector KTModel::input_row(const RowVector& fused, int response) const {
  if (fused.size() != dim()) {
    throw DimensionError("question vector width " + std::to_string(fused.size()) + " does not match model dimension " +
                         std::to_string(dim()));
  }
  if (response != 0 && response != 1) throw DataError("response must be 0 or 1, got " + std::to_string(response));
  RowVector x(2 * dim());
  x << fused, response_emb.value.row(response);
  return x;
}

StudentState KTModel::initial_state() const {
  return {RowVector::Zero(state_dim()), RowVector::Zero(state_dim()), 0};
}

StudentState KTModel::advance_state(const StudentState& state, const RowVector& fused_question, int response) const {
  BatchState b{state.hidden, state.cell};
  Matrix x = input_row(fused_question, response);
  const auto out = nc::rowwise::lstm_step(b.hidden, b.cell, x, lstm.w_input.value, lstm.w_hidden.value, lstm.bias.value);
  return {out.hidden.row(0), out.cell.row(0), state.step + 1};
}

double KTModel::predict_response(const StudentState& state, const RowVector& query) const {
  if (query.size() != dim()) throw DimensionError("query width does not match model dimension");
  const Matrix sf = state_features(state.hidden);
  const Matrix qf = query_features(query);
  return score(sf.row(0), qf.row(0));
}

BatchState KTModel::initial_batch(Index students) const {
  return {Matrix::Zero(students, state_dim()), Matrix::Zero(students, state_dim())};
}

BatchState KTModel::advance(const BatchState& state, const Matrix& fused_questions,
                            std::span<const int> responses) const {
  if (fused_questions.rows() != state.hidden.rows() || static_cast<Index>(responses.size()) != state.hidden.rows()) {
    throw DimensionError("advance: batch sizes differ");
  }
  Matrix x(fused_questions.rows(), 2 * dim());
  for (Index r = 0; r < x.rows(); ++r) x.row(r) = input_row(fused_questions.row(r), responses[static_cast<std::size_t>(r)]);
  const auto out = nc::rowwise::lstm_step(state.hidden, state.cell, x, lstm.w_input.value, lstm.w_hidden.value,
                                          lstm.bias.value);
  return {out.hidden, out.cell};
}

Matrix KTModel::state_features(const Matrix& hidden) const {
  return nc::rowwise::matmul(nc::rowwise::affine(hidden, proj_w.value, proj_b.value), w_state.value);
}

Matrix KTModel::query_features(const Matrix& queries) const {
  check_fused(queries, dim());
  return nc::rowwise::affine(queries, w_query.value, b_hidden.value);
}

double KTModel::score(const RowVector& sf, const RowVector& qf) const {
  double z = b_out.value(0, 0);
  const double* w = w_out.value.data();
  for (Index j = 0; j < sf.size(); ++j) z += std::tanh(sf(j) + qf(j)) * w[j];
  return stable_sigmoid(z);
}

Matrix KTModel::score_all(const Matrix& sf, const Matrix& qf) const {
  Matrix out(sf.rows(), qf.rows());
  for (Index b = 0; b < sf.rows(); ++b) {
    const RowVector s = sf.row(b);
    for (Index q = 0; q < qf.rows(); ++q) out(b, q) = score(s, qf.row(q));
  }
  return out;
}

KTModel::Bound KTModel::bind(nc::Tape& tape) {
  Bound b;
  b.lstm = nc::bind(tape, lstm);
  b.response_emb = tape.parameter(response_emb);
  b.proj_w = tape.parameter(proj_w);
  b.proj_b = tape.parameter(proj_b);
  b.w_state = tape.parameter(w_state);
  b.w_query = tape.parameter(w_query);
  b.b_hidden = tape.parameter(b_hidden);
  b.w_out = tape.parameter(w_out);
  b.b_out = tape.parameter(b_out);
  return b;
}

nc::Var KTModel::classify(const Bound& b, nc::Var hidden, nc::Var queries) {
  nc::Var proj = nc::affine(hidden, b.proj_w, b.proj_b);
  nc::Var pre = nc::add(nc::matmul(proj, b.w_state), nc::affine(queries, b.w_query, b.b_hidden));
  return nc::sigmoid(nc::affine(nc::tanh(pre), b.w_out, b.b_out));
}

nc::CellState KTModel::step(const Bound& b, const nc::CellState& prev, nc::Var fused_questions,
                            std::span<const Index> responses) {
  nc::Var x = nc::concat_cols({fused_questions, nc::select_rows(b.response_emb, responses)});
  return nc::gated_recurrent_cell(prev.hidden, prev.cell, x, b.lstm);
}

// ---------------------------------------------------------------------------
// Oracle.

OracleSampler::OracleSampler(const corpus::Corpus& c, int sample_size, std::uint64_t seed) {
  if (sample_size < 1) throw ConfigError("oracle sample size must be >= 1");
  const int originals = c.original_count > 0 ? c.original_count : c.num_questions();
  for (int kc = 0; kc < c.num_kcs(); ++kc) {
    std::vector<int> pool;
    for (int q : c.questions_for_kc(kc)) {
      if (q < originals) pool.push_back(q);
    }
    if (pool.empty()) throw DataError("KC " + std::to_string(kc) + " has no questions to sample for the oracle");
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(kc)));
    shuffle(pool, rng);
    if (static_cast<int>(pool.size()) > sample_size) pool.resize(static_cast<std::size_t>(sample_size));
    per_kc_.push_back(std::move(pool));
  }
}

Matrix oracle_all(const KTModel& model, const Matrix& sf, const Matrix& qf, const OracleSampler& sampler) {
  Matrix out(sf.rows(), sampler.num_kcs());
  std::vector<double> cache(static_cast<std::size_t>(qf.rows()));
  std::vector<char> have(static_cast<std::size_t>(qf.rows()));
  for (Index b = 0; b < sf.rows(); ++b) {
    std::fill(have.begin(), have.end(), 0);
    const RowVector s = sf.row(b);
    for (int kc = 0; kc < sampler.num_kcs(); ++kc) {
      double sum = 0.0;
      const auto& qs = sampler.questions(kc);
      for (int q : qs) {
        const auto i = static_cast<std::size_t>(q);
        if (!have[i]) {
          cache[i] = model.score(s, qf.row(q));
          have[i] = 1;
        }
        sum += cache[i];
      }
      out(b, kc) = sum / static_cast<double>(qs.size());
    }
  }
  return out;
}

double knowledge_state_oracle(const KTModel& model, const StudentState& state, int kc, const OracleSampler& sampler,
                              const Matrix& fused_questions) {
  if (kc < 0 || kc >= sampler.num_kcs()) throw DataError("unknown KC " + std::to_string(kc));
  const RowVector sf = model.state_features(state.hidden).row(0);
  double sum = 0.0;
  const auto& qs = sampler.questions(kc);
  for (int q : qs) sum += model.score(sf, model.query_features(fused_questions.row(q)).row(0));
  return sum / static_cast<double>(qs.size());
}

StudentState warmup_state(const KTModel& model, std::span<const corpus::Interaction> prefix,
                          const Matrix& fused_questions, int warmup) {
  if (warmup < 0) throw ConfigError("warmup length must be >= 0");
  if (static_cast<int>(prefix.size()) < warmup) {
    throw DataError("warmup needs " + std::to_string(warmup) + " interactions, trace has " +
                    std::to_string(prefix.size()));
  }
  StudentState s = model.initial_state();
  for (int t = 0; t < warmup; ++t) {
    const auto& it = prefix[static_cast<std::size_t>(t)];
    s = model.advance_state(s, fused_questions.row(it.question), it.response);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training.

namespace {

struct FitOptions {
  int epochs;
  int batch_size;
  double learning_rate;
  double max_grad_norm;
  std::uint64_t seed;
  double kc_weight = 0.0;
  const Matrix* kc_vectors = nullptr;
  const std::vector<Matrix>* targets = nullptr;
};

TrainLog fit(KTModel& model, const std::vector<corpus::StudentTrace>& traces, const Matrix& fused,
             const FitOptions& opt) {
  check_fused(fused, model.dim());
  if (opt.epochs < 0 || opt.batch_size < 1) throw ConfigError("kt epochs must be >= 0 and batch_size >= 1");
  for (const auto& t : traces) {
    if (t.steps.size() < 2) throw DataError("student " + std::to_string(t.student_id) + " has fewer than 2 interactions");
    check_trace(t, fused.rows());
  }
  const bool calibrating = opt.kc_weight != 0.0;
  const int num_kcs = calibrating ? static_cast<int>(opt.kc_vectors->rows()) : 0;

  nc::AdamConfig adam_cfg;
  adam_cfg.learning_rate = opt.learning_rate;
  adam_cfg.max_grad_norm = opt.max_grad_norm;
  nc::Adam adam(model.params(), adam_cfg);

  TrainLog log;
  std::vector<std::size_t> order(traces.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(opt.seed, static_cast<std::uint64_t>(epoch)));
    Rng kc_rng(derive_seed(opt.seed, 0x10000 + static_cast<std::uint64_t>(epoch)));
    shuffle(order, shuffle_rng);
    double epoch_pred = 0.0;
    double epoch_kc = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      const Index B = static_cast<Index>(end - start);
      std::size_t T = 0;
      for (std::size_t i = start; i < end; ++i) T = std::max(T, traces[order[i]].steps.size());

      nc::Tape tape;
      const auto bound = model.bind(tape);
      nc::CellState state{tape.constant(Matrix::Zero(B, model.state_dim())),
                          tape.constant(Matrix::Zero(B, model.state_dim()))};
      nc::Var pred_loss = tape.constant(Matrix::Zero(1, 1));
      nc::Var kc_loss = tape.constant(Matrix::Zero(1, 1));
      const std::size_t last = calibrating ? T : T - 1;
      for (std::size_t t = 0; t < last; ++t) {
        Matrix x = Matrix::Zero(B, model.dim());
        std::vector<Index> resp(static_cast<std::size_t>(B), 0);
        for (Index b = 0; b < B; ++b) {
          const auto& tr = traces[order[start + static_cast<std::size_t>(b)]];
          if (t < tr.steps.size()) {
            x.row(b) = fused.row(tr.steps[t].question);
            resp[static_cast<std::size_t>(b)] = tr.steps[t].response;
          }
        }
        state = KTModel::step(bound, state, tape.constant(std::move(x)), resp);

        if (t + 1 < T) {
          Matrix next = Matrix::Zero(B, model.dim());
          Matrix target = Matrix::Zero(B, 1);
          Matrix weight = Matrix::Zero(B, 1);
          for (Index b = 0; b < B; ++b) {
            const auto& tr = traces[order[start + static_cast<std::size_t>(b)]];
            if (t + 1 < tr.steps.size()) {
              next.row(b) = fused.row(tr.steps[t + 1].question);
              target(b, 0) = tr.steps[t + 1].response;
              weight(b, 0) = 1.0 / (static_cast<double>(B) * static_cast<double>(tr.steps.size() - 1));
            }
          }
          nc::Var p = KTModel::classify(bound, state.hidden, tape.constant(std::move(next)));
          pred_loss = nc::add(pred_loss, nc::bce_loss_weighted(p, target, weight));
        }
        if (calibrating) {
          Matrix query = Matrix::Zero(B, model.dim());
          Matrix target = Matrix::Zero(B, 1);
          Matrix weight = Matrix::Zero(B, 1);
          for (Index b = 0; b < B; ++b) {
            const std::size_t idx = order[start + static_cast<std::size_t>(b)];
            const auto& tr = traces[idx];
            const int kc = static_cast<int>(uniform_index(kc_rng, static_cast<std::size_t>(num_kcs)));
            if (t < tr.steps.size()) {
              query.row(b) = opt.kc_vectors->row(kc);
              target(b, 0) = (*opt.targets)[idx](static_cast<Index>(t), kc);
              weight(b, 0) = opt.kc_weight / (static_cast<double>(B) * static_cast<double>(tr.steps.size()));
            }
          }
          nc::Var p = KTModel::classify(bound, state.hidden, tape.constant(std::move(query)));
          kc_loss = nc::add(kc_loss, nc::bce_loss_weighted(p, target, weight));
        }
      }
      nc::Var loss = calibrating ? nc::add(pred_loss, kc_loss) : pred_loss;
      if (!std::isfinite(loss.scalar())) {
        std::string ids;
        for (std::size_t i = start; i < end && i < start + 5; ++i) ids += " " + std::to_string(traces[order[i]].student_id);
        throw TrainingError("non-finite KT loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches) + " (students" + ids + " ...)");
      }
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      epoch_pred += pred_loss.scalar();
      epoch_kc += calibrating ? kc_loss.scalar() / opt.kc_weight : 0.0;
      ++batches;
    }
    log.epoch_loss.push_back(epoch_pred / std::max(1, batches));
    if (calibrating) log.epoch_kc_loss.push_back(epoch_kc / std::max(1, batches));
  }
  return log;
}

}  // namespace

TrainLog train_kt(KTModel& model, const std::vector<corpus::StudentTrace>& traces, const Matrix& fused,
                  const TrainConfig& config) {
  FitOptions opt{config.epochs, config.batch_size, config.learning_rate, config.max_grad_norm, config.seed};
  return fit(model, traces, fused, opt);
}

CalibrationTeacher make_teacher(const KTModel& trained, const corpus::Corpus& c, int sample_size, std::uint64_t seed) {
  return {trained, OracleSampler(c, sample_size, seed)};
}

std::vector<Matrix> teacher_targets(const CalibrationTeacher& teacher, const std::vector<corpus::StudentTrace>& traces,
                                    const Matrix& fused) {
  const KTModel& m = teacher.model;
  check_fused(fused, m.dim());
  const Matrix qf = m.query_features(fused);
  std::vector<Matrix> out;
  out.reserve(traces.size());
  for (const auto& tr : traces) {
    check_trace(tr, fused.rows());
    Matrix targets(static_cast<Index>(tr.steps.size()), teacher.sampler.num_kcs());
    Matrix states(static_cast<Index>(tr.steps.size()), m.state_dim());
    StudentState s = m.initial_state();
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      s = m.advance_state(s, fused.row(tr.steps[t].question), tr.steps[t].response);
      states.row(static_cast<Index>(t)) = s.hidden;
    }
    targets = oracle_all(m, m.state_features(states), qf, teacher.sampler);
    out.push_back(std::move(targets));
  }
  return out;
}

TrainLog calibrate_kt(KTModel& model, const std::vector<corpus::StudentTrace>& traces, const Matrix& fused,
                      const Matrix& kc_vectors, const CalibrationTeacher& teacher, const CalibrationConfig& config) {
  FitOptions opt{config.epochs, config.batch_size, config.learning_rate, config.max_grad_norm, config.seed};
  if (config.kc_weight < 0.0) throw ConfigError("calibration kc_weight must be >= 0");
  if (kc_vectors.cols() != model.dim() || kc_vectors.rows() != teacher.sampler.num_kcs()) {
    throw DimensionError("KC table does not match the model width or the teacher's KC count");
  }
  std::vector<Matrix> targets;
  if (config.kc_weight != 0.0) targets = teacher_targets(teacher, traces, fused);
  opt.kc_weight = config.kc_weight;
  opt.kc_vectors = &kc_vectors;
  opt.targets = &targets;
  return fit(model, traces, fused, opt);
}

// ---------------------------------------------------------------------------
// Evaluation.

namespace {

// Hidden states before each step t = 1..T-1 (i.e. after steps 0..t-1), stacked.
Matrix states_before_steps(const KTModel& m, const corpus::StudentTrace& tr, const Matrix& fused) {
  Matrix states(static_cast<Index>(tr.steps.size()) - 1, m.state_dim());
  StudentState s = m.initial_state();
  for (std::size_t t = 0; t + 1 < tr.steps.size(); ++t) {
    s = m.advance_state(s, fused.row(tr.steps[t].question), tr.steps[t].response);
    states.row(static_cast<Index>(t)) = s.hidden;
  }
  return states;
}

}  // namespace

Predictions predict_traces(const KTModel& m, const std::vector<corpus::StudentTrace>& traces, const Matrix& fused) {
  check_fused(fused, m.dim());
  const Matrix qf = m.query_features(fused);
  Predictions out;
  for (const auto& tr : traces) {
    check_trace(tr, fused.rows());
    if (tr.steps.size() < 2) continue;
    const Matrix sf = m.state_features(states_before_steps(m, tr, fused));
    for (std::size_t t = 1; t < tr.steps.size(); ++t) {
      const auto& it = tr.steps[t];
      out.student.push_back(tr.student_id);
      out.step.push_back(static_cast<int>(t));
      out.prob.push_back(m.score(sf.row(static_cast<Index>(t - 1)), qf.row(it.question)));
      out.label.push_back(it.response);
    }
  }
  return out;
}

double heldout_auc(const KTModel& m, const std::vector<corpus::StudentTrace>& traces, const Matrix& fused) {
  const Predictions p = predict_traces(m, traces, fused);
  return metrics::auc(p.prob, p.label);
}

double kc_mae(const KTModel& m, const std::vector<corpus::StudentTrace>& traces, const Matrix& fused,
              const Matrix& kc_vectors, const OracleSampler& sampler, std::vector<double>* per_step) {
  check_fused(fused, m.dim());
  const Matrix qf = m.query_features(fused);
  const Matrix kf = m.query_features(kc_vectors);
  double total = 0.0;
  long count = 0;
  if (per_step) per_step->clear();
  for (const auto& tr : traces) {
    check_trace(tr, fused.rows());
    if (tr.steps.size() < 2) continue;
    const Matrix sf = m.state_features(states_before_steps(m, tr, fused));
    const Matrix oracle = oracle_all(m, sf, qf, sampler);
    const Matrix direct = m.score_all(sf, kf);
    for (Index r = 0; r < sf.rows(); ++r) {
      const double row_sum = (direct.row(r) - oracle.row(r)).cwiseAbs().sum();
      total += row_sum;
      count += oracle.cols();
      if (per_step) per_step->push_back(row_sum / static_cast<double>(oracle.cols()));
    }
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Checkpoints.

void save_model(const std::filesystem::path& path, const KTModel& model, const nlohmann::json& training) {
  nc::Blob blob;
  blob.meta = {{"kind", "kcrl.kt"},
               {"version", kCheckpointVersion},
               {"dim", model.dim()},
               {"state_dim", model.state_dim()},
               {"hidden_dim", model.hidden_dim()},
               {"training", training}};
  KTModel copy = model;
  nc::store_params(blob, copy.params());
  nc::write_blob(path, blob);
}

KTModel load_model(const std::filesystem::path& path, nlohmann::json* training) {
  const nc::Blob blob = nc::read_blob(path);
  if (blob.meta.value("kind", "") != "kcrl.kt") throw DataError(path.string() + " is not a KT checkpoint");
  const int version = blob.meta.value("version", -1);
  if (version != kCheckpointVersion) {
    throw VersionError(path.string() + ": unsupported KT checkpoint version " + std::to_string(version));
  }
  KTModel m = KTModel::zeros(blob.meta.at("dim").get<int>(), blob.meta.at("state_dim").get<int>(),
                             blob.meta.at("hidden_dim").get<int>());
  nc::load_params(blob, m.params());
  if (training) *training = blob.meta.value("training", nlohmann::json::object());
  return m;
}

}  // namespace kcrl::kt
