#include "kcrl/embed.hpp"

#include "kcrl/error.hpp"
#include "kcrl/numcore/optim.hpp"
#include "kcrl/numcore/rowwise.hpp"
#include "kcrl/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <set>

namespace kcrl::embed {

namespace {

constexpr int kNumKinds = 3;

double logsumexp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// logsumexp(logits) - logits[0] without cancellation when the positive dominates.
double neg_log_softmax_first(const std::vector<double>& logits) {
  const double pos = logits.front();
  const double m = *std::max_element(logits.begin(), logits.end());
  if (m == pos) {
    double s = 0.0;
    for (std::size_t i = 1; i < logits.size(); ++i) s += std::exp(logits[i] - pos);
    return std::log1p(s);
  }
  return logsumexp(logits) - pos;
}

void require_tau(double tau) {
  if (!(tau > 0.0)) throw ConfigError("contrastive temperature must be > 0, got " + std::to_string(tau));
}

RowVector unit(const RowVector& v) {
  const double n = v.norm();
  if (!(n > 0.0)) throw DimensionError("cannot normalize a zero vector");
  return v / n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary and encoder.

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty()) tokens_.push_back("<oov>");
  for (std::size_t i = 1; i < tokens_.size(); ++i) lookup_.emplace(tokens_[i], static_cast<Index>(i));
}

Vocabulary Vocabulary::from_corpus(const corpus::Corpus& c) {
  std::set<std::string> all;
  for (const auto& kc : c.kcs) {
    all.insert(kc.name);
    all.insert(kc.template_tokens.begin(), kc.template_tokens.end());
  }
  for (const auto& q : c.questions) {
    all.insert(q.text.begin(), q.text.end());
    for (const auto& s : q.solution_steps) all.insert(s.begin(), s.end());
  }
  std::vector<std::string> tokens{"<oov>"};
  tokens.insert(tokens.end(), all.begin(), all.end());
  return Vocabulary(std::move(tokens));
}

Index Vocabulary::index(const std::string& token) const {
  const auto it = lookup_.find(token);
  return it == lookup_.end() ? 0 : it->second;
}

TextEncoder::TextEncoder(Vocabulary vocab, const EncoderConfig& config, std::uint64_t seed)
    : token_table("embed.tokens", vocab.size(), config.token_dim),
      kind_offsets("embed.kind", kNumKinds, config.token_dim),
      proj_weight("embed.proj_w", config.token_dim, config.dim),
      proj_bias("embed.proj_b", 1, config.dim),
      vocab_(std::move(vocab)),
      config_(config) {
  if (config.token_dim < 1 || config.dim < 1) throw ConfigError("embedding dimensions must be positive");
  Rng rng(derive_seed(seed, 0xE3B));
  for (Index i = 0; i < token_table.value.size(); ++i) token_table.value.data()[i] = normal01(rng);
  for (Index i = 0; i < kind_offsets.value.size(); ++i) kind_offsets.value.data()[i] = 0.3 * normal01(rng);
  nc::init_uniform(proj_weight, config.token_dim, rng);
  nc::init_uniform(proj_bias, config.token_dim, rng);
}

std::vector<std::vector<Index>> TextEncoder::lookup(const std::vector<Tokens>& texts) const {
  std::vector<std::vector<Index>> groups;
  groups.reserve(texts.size());
  for (const auto& text : texts) {
    if (text.empty()) throw DataError("cannot encode an empty token list");
    std::vector<Index> g;
    g.reserve(text.size());
    for (const auto& tok : text) g.push_back(vocab_.index(tok));
    groups.push_back(std::move(g));
  }
  return groups;
}

nc::Var TextEncoder::encode(nc::Tape& tape, Kind kind, const std::vector<Tokens>& texts) {
  const Index k = static_cast<Index>(kind);
  nc::Var table = tape.parameter(token_table);
  nc::Var offsets = tape.parameter(kind_offsets);
  nc::Var pooled = nc::gather_mean(table, lookup(texts));
  nc::Var tagged = nc::add_row(pooled, nc::select_rows(offsets, std::span<const Index>(&k, 1)));
  nc::Var projected = nc::affine(tagged, tape.parameter(proj_weight), tape.parameter(proj_bias));
  return nc::normalize_rows(projected);
}

Matrix TextEncoder::encode(Kind kind, const std::vector<Tokens>& texts) const {
  const auto groups = lookup(texts);
  Matrix pooled = Matrix::Zero(static_cast<Index>(groups.size()), config_.token_dim);
  for (std::size_t r = 0; r < groups.size(); ++r) {
    for (Index i : groups[r]) pooled.row(static_cast<Index>(r)) += token_table.value.row(i);
    pooled.row(static_cast<Index>(r)) /= static_cast<double>(groups[r].size());
  }
  pooled.rowwise() += kind_offsets.value.row(static_cast<Index>(kind));
  Matrix out = nc::rowwise::affine(pooled, proj_weight.value, proj_bias.value);
  for (Index r = 0; r < out.rows(); ++r) out.row(r) = unit(out.row(r));
  return out;
}

RowVector TextEncoder::encode(Kind kind, const Tokens& text) const {
  return encode(kind, std::vector<Tokens>{text}).row(0);
}

// ---------------------------------------------------------------------------
// Clustering.

std::vector<std::vector<int>> ClusterAssignment::members() const {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(num_clusters));
  for (std::size_t kc = 0; kc < cluster_of.size(); ++kc) {
    out[static_cast<std::size_t>(cluster_of[kc])].push_back(static_cast<int>(kc));
  }
  return out;
}

ClusterAssignment cluster_kcs(const Matrix& kc_vectors, double distance_threshold) {
  const Index n = kc_vectors.rows();
  if (n < 1) throw DataError("cluster_kcs needs at least one KC");
  Matrix unit_rows = kc_vectors;
  for (Index r = 0; r < n; ++r) unit_rows.row(r) = unit(kc_vectors.row(r));

  std::vector<int> parent(static_cast<std::size_t>(n));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  };
  for (Index a = 0; a < n; ++a) {
    for (Index b = a + 1; b < n; ++b) {
      const double dist = 1.0 - unit_rows.row(a).dot(unit_rows.row(b));
      if (dist <= distance_threshold) {
        const int ra = find(static_cast<int>(a));
        const int rb = find(static_cast<int>(b));
        if (ra != rb) parent[static_cast<std::size_t>(std::max(ra, rb))] = std::min(ra, rb);
      }
    }
  }
  ClusterAssignment out;
  out.cluster_of.assign(static_cast<std::size_t>(n), -1);
  std::vector<int> label_of_root(static_cast<std::size_t>(n), -1);
  for (Index kc = 0; kc < n; ++kc) {
    const int root = find(static_cast<int>(kc));
    int& label = label_of_root[static_cast<std::size_t>(root)];
    if (label < 0) label = out.num_clusters++;
    out.cluster_of[static_cast<std::size_t>(kc)] = label;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses.

double contrastive_loss(const RowVector& anchor, const RowVector& positive,
                        const std::vector<RowVector>& negatives, double tau) {
  require_tau(tau);
  if (negatives.empty()) return 0.0;
  const RowVector a = unit(anchor);
  std::vector<double> logits;
  logits.reserve(negatives.size() + 1);
  logits.push_back(a.dot(unit(positive)) / tau);
  for (const auto& neg : negatives) logits.push_back(a.dot(unit(neg)) / tau);
  return neg_log_softmax_first(logits);
}

std::vector<int> filter_negatives(int positive, std::span<const int> question_kcs,
                                  std::span<const int> candidates, const ClusterAssignment& clusters) {
  const int pos_cluster = clusters.cluster_of.at(static_cast<std::size_t>(positive));
  std::vector<int> out;
  for (int c : candidates) {
    if (clusters.cluster_of.at(static_cast<std::size_t>(c)) == pos_cluster) continue;
    if (std::find(question_kcs.begin(), question_kcs.end(), c) != question_kcs.end()) continue;
    out.push_back(c);
  }
  return out;
}

double total_contrastive_loss(const corpus::Question& q, const RowVector& z_q,
                              const std::vector<RowVector>& z_steps, const Matrix& kc_vectors,
                              const ClusterAssignment& clusters, std::span<const int> candidates,
                              double tau) {
  if (q.kcs.empty()) throw DataError("question " + std::to_string(q.id) + " has no KCs");
  if (z_steps.empty() || q.solution_steps.empty()) throw DataError("question " + std::to_string(q.id) + " has no steps");
  auto negatives_for = [&](int c) {
    std::vector<RowVector> out;
    for (int n : filter_negatives(c, q.kcs, candidates, clusters)) out.push_back(kc_vectors.row(n));
    return out;
  };
  double question_term = 0.0;
  for (int c : q.kcs) question_term += contrastive_loss(z_q, kc_vectors.row(c), negatives_for(c), tau);
  question_term /= static_cast<double>(q.kcs.size());

  double step_term = 0.0;
  for (std::size_t k = 0; k < z_steps.size(); ++k) {
    const auto step_kcs = q.step_kcs(k);
    if (step_kcs.empty()) throw DataError("question " + std::to_string(q.id) + " step " + std::to_string(k) + " has no KC");
    double s = 0.0;
    for (int c : step_kcs) s += contrastive_loss(z_steps[k], kc_vectors.row(c), negatives_for(c), tau);
    step_term += s / static_cast<double>(step_kcs.size());
  }
  step_term /= static_cast<double>(z_steps.size());
  return question_term + step_term;
}

nc::Var info_nce(nc::Var anchors, nc::Var kcs, const std::vector<ContrastiveTerm>& terms, double tau) {
  require_tau(tau);
  if (anchors.cols() != kcs.cols()) {
    throw DimensionError("info_nce: anchor width " + nc::shape_str(anchors.value()) + " vs KC width " +
                         nc::shape_str(kcs.value()));
  }
  const Matrix& A = anchors.value();
  const Matrix& C = kcs.value();
  // Softmax weights are kept for the backward pass: probs[i][0] is the positive.
  auto probs = std::make_shared<std::vector<std::vector<double>>>();
  probs->reserve(terms.size());
  double total = 0.0;
  for (const auto& term : terms) {
    std::vector<double> logits;
    logits.reserve(term.negatives.size() + 1);
    logits.push_back(A.row(term.anchor).dot(C.row(term.positive)) / tau);
    for (Index n : term.negatives) logits.push_back(A.row(term.anchor).dot(C.row(n)) / tau);
    const double lse = logsumexp(logits);
    total += term.weight * neg_log_softmax_first(logits);
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
    probs->push_back(std::move(p));
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  nc::Tape& t = *anchors.tape();
  return t.record(std::move(out), {anchors, kcs}, [anchors, kcs, terms, probs, tau](nc::Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    const Matrix& A = anchors.value();
    const Matrix& C = kcs.value();
    const bool ga = t.requires_grad(anchors.id());
    const bool gc = t.requires_grad(kcs.id());
    for (std::size_t i = 0; i < terms.size(); ++i) {
      const auto& term = terms[i];
      const auto& p = (*probs)[i];
      const double s = g * term.weight / tau;
      auto push = [&](Index kc_row, double coeff) {
        if (ga) t.grad(anchors.id()).row(term.anchor) += coeff * C.row(kc_row);
        if (gc) t.grad(kcs.id()).row(kc_row) += coeff * A.row(term.anchor);
      };
      push(term.positive, s * (p[0] - 1.0));
      for (std::size_t j = 0; j < term.negatives.size(); ++j) push(term.negatives[j], s * p[j + 1]);
    }
  });
}

RowVector fuse_question_embedding(const RowVector& z_q, const std::vector<RowVector>& steps) {
  if (steps.empty()) throw DataError("fuse_question_embedding needs at least one step");
  RowVector mean = RowVector::Zero(z_q.size());
  for (const auto& s : steps) {
    if (s.size() != z_q.size()) throw DimensionError("step vector width differs from question vector");
    mean += s;
  }
  mean /= static_cast<double>(steps.size());
  return (z_q + mean) / 2.0;
}

// ---------------------------------------------------------------------------
// Spaces.

RowVector EmbeddingSpace::fused(int question) const {
  const Matrix& s = steps.at(static_cast<std::size_t>(question));
  std::vector<RowVector> rows;
  for (Index r = 0; r < s.rows(); ++r) rows.push_back(s.row(r));
  return fuse_question_embedding(questions.row(question), rows);
}

Matrix EmbeddingSpace::fused_all() const {
  Matrix out(questions.rows(), questions.cols());
  for (Index q = 0; q < questions.rows(); ++q) out.row(q) = fused(static_cast<int>(q));
  return out;
}

EmbeddingSpace embed_corpus(const TextEncoder& encoder, const corpus::Corpus& c, const ClusterAssignment& clusters) {
  EmbeddingSpace space;
  space.dim = encoder.config().dim;
  std::vector<Tokens> texts;
  for (const auto& q : c.questions) texts.push_back(q.text);
  space.questions = encoder.encode(Kind::question, texts);
  for (const auto& q : c.questions) space.steps.push_back(encoder.encode(Kind::step, q.solution_steps));
  std::vector<Tokens> labels;
  for (const auto& kc : c.kcs) labels.push_back(corpus::kc_label(kc));
  space.kcs = encoder.encode(Kind::kc, labels);
  space.clusters = clusters;
  space.encoder = encoder;
  return space;
}

EmbeddingSpace random_space(const corpus::Corpus& c, int dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xBA5E));
  auto draw = [&](Index rows) {
    Matrix m(rows, dim);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal01(rng);
    for (Index r = 0; r < rows; ++r) m.row(r) = unit(m.row(r));
    return m;
  };
  EmbeddingSpace space;
  space.dim = dim;
  space.questions = draw(c.num_questions());
  for (const auto& q : c.questions) space.steps.push_back(draw(static_cast<Index>(q.solution_steps.size())));
  space.kcs = draw(c.num_kcs());
  space.clusters.num_clusters = c.num_kcs();
  for (int k = 0; k < c.num_kcs(); ++k) space.clusters.cluster_of.push_back(k);
  return space;
}

RetrievalReport retrieval_f1(const EmbeddingSpace& space, const corpus::Corpus& c) {
  return retrieval_f1(space.questions, space.kcs, space.clusters, c);
}

RetrievalReport retrieval_f1(const Matrix& question_vectors, const Matrix& kc_vectors,
                             const ClusterAssignment& clusters, const corpus::Corpus& c) {
  if (question_vectors.rows() != c.num_questions() || kc_vectors.rows() != c.num_kcs()) {
    throw DimensionError("retrieval_f1: embedding counts do not match the corpus");
  }
  RetrievalReport report;
  long true_positives = 0;
  long retrieved = 0;
  for (const auto& members : clusters.members()) {
    std::vector<char> relevant(static_cast<std::size_t>(c.num_questions()), 0);
    long n = 0;
    for (const auto& q : c.questions) {
      for (int kc : q.kcs) {
        if (clusters.cluster_of[static_cast<std::size_t>(kc)] == clusters.cluster_of[static_cast<std::size_t>(members.front())]) {
          relevant[static_cast<std::size_t>(q.id)] = 1;
        }
      }
      n += relevant[static_cast<std::size_t>(q.id)];
    }
    if (n == 0) {
      ++report.clusters_skipped;
      continue;
    }
    ++report.clusters_evaluated;
    const RowVector rep = unit(kc_vectors.row(members.front()));
    std::vector<std::pair<double, int>> scored;
    for (int q = 0; q < c.num_questions(); ++q) {
      scored.emplace_back(-unit(question_vectors.row(q)).dot(rep), q);
    }
    std::partial_sort(scored.begin(), scored.begin() + n, scored.end());
    for (long i = 0; i < n; ++i) true_positives += relevant[static_cast<std::size_t>(scored[static_cast<std::size_t>(i)].second)];
    retrieved += n;
  }
  // Retrieval size equals relevant size per cluster, so micro precision = micro recall = F1.
  report.f1 = retrieved > 0 ? static_cast<double>(true_positives) / static_cast<double>(retrieved) : 0.0;
  return report;
}

double corpus_loss(const EmbeddingSpace& space, const corpus::Corpus& c, std::span<const int> question_ids, double tau) {
  std::vector<int> all(static_cast<std::size_t>(c.num_kcs()));
  std::iota(all.begin(), all.end(), 0);
  double total = 0.0;
  for (int id : question_ids) {
    const auto& q = c.questions.at(static_cast<std::size_t>(id));
    std::vector<RowVector> steps;
    for (Index r = 0; r < space.steps[static_cast<std::size_t>(id)].rows(); ++r) steps.push_back(space.steps[static_cast<std::size_t>(id)].row(r));
    total += total_contrastive_loss(q, space.questions.row(id), steps, space.kcs, space.clusters, all, tau);
  }
  return question_ids.empty() ? 0.0 : total / static_cast<double>(question_ids.size());
}

// ---------------------------------------------------------------------------
// Training.

EmbeddingSpace train_embeddings(const corpus::Corpus& c, const EmbedConfig& config, EmbedTrainReport* report,
                                const std::filesystem::path& checkpoint) {
  require_tau(config.tau);
  if (config.batch_size < 1 || config.max_epochs < 0) throw ConfigError("embed.batch_size must be >= 1 and embed.max_epochs >= 0");
  TextEncoder encoder(Vocabulary::from_corpus(c), config.encoder, config.seed);

  // Clusters come from the untrained KC label vectors and stay fixed.
  std::vector<Tokens> labels;
  for (const auto& kc : c.kcs) labels.push_back(corpus::kc_label(kc));
  const ClusterAssignment clusters = cluster_kcs(encoder.encode(Kind::kc, labels), config.cluster_threshold);

  EmbedTrainReport local;
  EmbedTrainReport& rep = report ? *report : local;
  rep = EmbedTrainReport{};
  rep.num_clusters = clusters.num_clusters;
  rep.f1_before = retrieval_f1(embed_corpus(encoder, c, clusters), c).f1;

  nc::AdamConfig adam_cfg;
  adam_cfg.learning_rate = config.learning_rate;
  nc::Adam adam(encoder.params(), adam_cfg);
  Rng rng(derive_seed(config.seed, 0xB47C));
  std::vector<int> order(static_cast<std::size_t>(c.num_questions()));
  std::iota(order.begin(), order.end(), 0);

  std::vector<nc::Matrix> last_good;
  auto snapshot = [&] {
    last_good.clear();
    for (auto* p : encoder.params()) last_good.push_back(p->value);
  };
  snapshot();
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    shuffle(order, rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const double inv_b = 1.0 / static_cast<double>(end - start);

      std::vector<Tokens> q_texts;
      std::vector<Tokens> s_texts;
      std::set<int> kc_set;
      for (std::size_t i = start; i < end; ++i) {
        const auto& q = c.questions[static_cast<std::size_t>(order[i])];
        q_texts.push_back(q.text);
        for (const auto& s : q.solution_steps) s_texts.push_back(s);
        kc_set.insert(q.kcs.begin(), q.kcs.end());
      }
      const std::vector<int> batch_kcs(kc_set.begin(), kc_set.end());
      std::vector<Tokens> kc_texts;
      std::vector<Index> row_of(static_cast<std::size_t>(c.num_kcs()), -1);
      for (std::size_t r = 0; r < batch_kcs.size(); ++r) {
        row_of[static_cast<std::size_t>(batch_kcs[r])] = static_cast<Index>(r);
        kc_texts.push_back(labels[static_cast<std::size_t>(batch_kcs[r])]);
      }

      std::vector<ContrastiveTerm> q_terms;
      std::vector<ContrastiveTerm> s_terms;
      Index step_row = 0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& q = c.questions[static_cast<std::size_t>(order[i])];
        auto make = [&](Index anchor, int positive, double weight) {
          ContrastiveTerm term;
          term.anchor = anchor;
          term.positive = row_of[static_cast<std::size_t>(positive)];
          term.weight = weight;
          const int pos_cluster = clusters.cluster_of[static_cast<std::size_t>(positive)];
          for (int n : filter_negatives(positive, q.kcs, batch_kcs, clusters)) {
            if (clusters.cluster_of[static_cast<std::size_t>(n)] == pos_cluster) {
              throw ProtocolError("negative KC " + std::to_string(n) + " shares a cluster with positive " + std::to_string(positive));
            }
            ++rep.negatives_checked;
            term.negatives.push_back(row_of[static_cast<std::size_t>(n)]);
          }
          return term;
        };
        const double wq = inv_b / static_cast<double>(q.kcs.size());
        for (int kc : q.kcs) q_terms.push_back(make(static_cast<Index>(i - start), kc, wq));
        const double n_steps = static_cast<double>(q.solution_steps.size());
        for (std::size_t k = 0; k < q.solution_steps.size(); ++k) {
          const auto step_kcs = q.step_kcs(k);
          const double ws = inv_b / n_steps / static_cast<double>(step_kcs.size());
          for (int kc : step_kcs) s_terms.push_back(make(step_row, kc, ws));
          ++step_row;
        }
      }

      nc::Tape tape;
      nc::Var zq = encoder.encode(tape, Kind::question, q_texts);
      nc::Var zs = encoder.encode(tape, Kind::step, s_texts);
      nc::Var zc = encoder.encode(tape, Kind::kc, kc_texts);
      nc::Var loss = nc::add(info_nce(zq, zc, q_terms, config.tau), info_nce(zs, zc, s_terms, config.tau));
      const double value = loss.scalar();
      if (!std::isfinite(value)) {
        auto params = encoder.params();
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = last_good[i];
        std::string where;
        if (!checkpoint.empty()) {
          nc::Blob blob;
          nc::store_params(blob, params);
          nc::write_blob(checkpoint, blob);
          where = "; last good parameters written to " + checkpoint.string();
        }
        throw TrainingError("embedding loss became non-finite at epoch " + std::to_string(epoch) + where);
      }
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      epoch_loss += value;
      ++batches;
    }
    epoch_loss /= std::max(1, batches);
    rep.epoch_loss.push_back(epoch_loss);
    snapshot();
    if (epoch_loss < best - config.min_improvement) {
      best = epoch_loss;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }

  EmbeddingSpace space = embed_corpus(encoder, c, clusters);
  rep.f1_after = retrieval_f1(space, c).f1;
  return space;
}

// ---------------------------------------------------------------------------
// Persistence.

void save_space(const std::filesystem::path& path, const EmbeddingSpace& space) {
  nc::Blob blob;
  std::vector<Index> step_counts;
  Index total_steps = 0;
  for (const auto& s : space.steps) {
    step_counts.push_back(s.rows());
    total_steps += s.rows();
  }
  Matrix steps(total_steps, space.dim);
  Index r = 0;
  for (const auto& s : space.steps) {
    steps.middleRows(r, s.rows()) = s;
    r += s.rows();
  }
  blob.meta = {{"kind", "kcrl.embedding"},
               {"dimension", space.dim},
               {"num_questions", space.num_questions()},
               {"num_steps", total_steps},
               {"num_kcs", space.num_kcs()},
               {"num_clusters", space.clusters.num_clusters},
               {"step_counts", step_counts},
               {"cluster_of", space.clusters.cluster_of},
               {"vocab", space.encoder.vocab().tokens()},
               {"token_dim", space.encoder.config().token_dim}};
  blob.put("questions", space.questions);
  blob.put("steps", steps);
  blob.put("kcs", space.kcs);
  TextEncoder encoder = space.encoder;
  if (encoder.vocab().size() > 1) nc::store_params(blob, encoder.params());
  nc::write_blob(path, blob);
}

EmbeddingSpace load_space(const std::filesystem::path& path) {
  const nc::Blob blob = nc::read_blob(path);
  if (blob.meta.value("kind", "") != "kcrl.embedding") throw DataError(path.string() + " is not an embedding file");
  EmbeddingSpace space;
  try {
    space.dim = blob.meta.at("dimension").get<int>();
    space.questions = blob.get("questions");
    space.kcs = blob.get("kcs");
    const Matrix& steps = blob.get("steps");
    Index r = 0;
    for (Index n : blob.meta.at("step_counts").get<std::vector<Index>>()) {
      space.steps.push_back(steps.middleRows(r, n));
      r += n;
    }
    space.clusters.cluster_of = blob.meta.at("cluster_of").get<std::vector<int>>();
    space.clusters.num_clusters = blob.meta.at("num_clusters").get<int>();
    const auto vocab = blob.meta.at("vocab").get<std::vector<std::string>>();
    if (vocab.size() > 1) {
      EncoderConfig cfg;
      cfg.dim = space.dim;
      cfg.token_dim = blob.meta.at("token_dim").get<int>();
      space.encoder = TextEncoder(Vocabulary(vocab), cfg, 0);
      nc::load_params(blob, space.encoder.params());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad embedding header: " + e.what());
  }
  if (space.questions.cols() != space.dim || space.kcs.cols() != space.dim ||
      static_cast<Index>(space.steps.size()) != space.questions.rows()) {
    throw DataError(path.string() + ": embedding payload does not match its header");
  }
  return space;
}

nlohmann::json space_info(const std::filesystem::path& path) {
  const nc::Blob blob = nc::read_blob(path);
  nlohmann::json out;
  for (const char* key : {"kind", "dimension", "num_questions", "num_steps", "num_kcs", "num_clusters"}) {
    if (blob.meta.contains(key)) out[key] = blob.meta.at(key);
  }
  out["vocab_size"] = blob.meta.contains("vocab") ? blob.meta.at("vocab").size() : 0;
  out["checksum"] = nc::hex64(nc::fnv1a_file(path));
  return out;
}

}  // namespace kcrl::embed
