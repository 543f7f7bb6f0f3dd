#pragma once

#include "kcrl/corpus.hpp"
#include "kcrl/numcore/io.hpp"
#include "kcrl/numcore/ops.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace kcrl::embed {

using nc::Index;
using nc::Matrix;
using nc::RowVector;
using corpus::Tokens;

enum class Kind { question = 0, step = 1, kc = 2 };

/// Token -> row index. Row 0 is reserved for out-of-vocabulary tokens.
class Vocabulary {
 public:
  Vocabulary() : tokens_{"<oov>"} {}
  explicit Vocabulary(std::vector<std::string> tokens);  // tokens_[0] must be the OOV marker

  static Vocabulary from_corpus(const corpus::Corpus& corpus);

  Index index(const std::string& token) const;
  Index size() const { return static_cast<Index>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, Index> lookup_;
};

struct EncoderConfig {
  int token_dim = 32;
  int dim = 32;
};

/// Bag-of-tokens encoder: mean token embedding plus a per-kind offset,
/// an affine projection, then L2 normalization.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(Vocabulary vocab, const EncoderConfig& config, std::uint64_t seed);

  /// Batched encoding on a tape; one normalized row per token list.
  nc::Var encode(nc::Tape& tape, Kind kind, const std::vector<Tokens>& texts);
  /// Tape-free encoding; same arithmetic as the tape path.
  Matrix encode(Kind kind, const std::vector<Tokens>& texts) const;
  RowVector encode(Kind kind, const Tokens& text) const;

  std::vector<nc::Parameter*> params() { return {&token_table, &kind_offsets, &proj_weight, &proj_bias}; }
  const Vocabulary& vocab() const { return vocab_; }
  const EncoderConfig& config() const { return config_; }

  nc::Parameter token_table;   // [V, token_dim]
  nc::Parameter kind_offsets;  // [3, token_dim]
  nc::Parameter proj_weight;   // [token_dim, dim]
  nc::Parameter proj_bias;     // [1, dim]

 private:
  std::vector<std::vector<Index>> lookup(const std::vector<Tokens>& texts) const;

  Vocabulary vocab_;
  EncoderConfig config_;
};

struct ClusterAssignment {
  std::vector<int> cluster_of;  // KC id -> cluster id, dense from 0
  int num_clusters = 0;

  std::vector<std::vector<int>> members() const;
  bool operator==(const ClusterAssignment&) const = default;
};

/// Greedy single-link agglomeration: KCs whose cosine distance is <= threshold
/// end up in one cluster, transitively. Cluster ids are assigned in order of
/// each cluster's smallest KC id.
ClusterAssignment cluster_kcs(const Matrix& kc_vectors, double distance_threshold);

/// -log softmax of the positive among {positive} + negatives, cosine logits / tau.
/// Throws ConfigError for tau <= 0.
double contrastive_loss(const RowVector& anchor, const RowVector& positive,
                        const std::vector<RowVector>& negatives, double tau);
inline double contrastive_loss_q(const RowVector& z_q, const RowVector& z_c,
                                 const std::vector<RowVector>& negatives, double tau) {
  return contrastive_loss(z_q, z_c, negatives, tau);
}
inline double contrastive_loss_s(const RowVector& z_step, const RowVector& z_c,
                                 const std::vector<RowVector>& negatives, double tau) {
  return contrastive_loss(z_step, z_c, negatives, tau);
}

/// Candidates that may serve as negatives for `positive`: not in the positive's
/// cluster and not one of the anchor question's own KCs.
std::vector<int> filter_negatives(int positive, std::span<const int> question_kcs,
                                  std::span<const int> candidates, const ClusterAssignment& clusters);

/// Per-question objective: mean over its KCs of the question-anchor loss plus
/// mean over steps of the mean over that step's KCs of the step-anchor loss.
/// Throws DataError for a question without KCs or steps.
double total_contrastive_loss(const corpus::Question& question, const RowVector& z_q,
                              const std::vector<RowVector>& z_steps, const Matrix& kc_vectors,
                              const ClusterAssignment& clusters, std::span<const int> candidates,
                              double tau);

/// One anchor/positive pair with its surviving negatives; indices are rows of
/// the anchor and KC matrices passed to info_nce.
struct ContrastiveTerm {
  Index anchor = 0;
  Index positive = 0;
  std::vector<Index> negatives;
  double weight = 1.0;
};

/// Weighted sum of contrastive losses over many terms as one tape node.
/// Rows are assumed unit norm, so dot products are cosines.
nc::Var info_nce(nc::Var anchors, nc::Var kcs, const std::vector<ContrastiveTerm>& terms, double tau);

/// Question vector fused with its steps: (z_q + mean of step vectors) / 2, not re-normalized.
RowVector fuse_question_embedding(const RowVector& z_q, const std::vector<RowVector>& steps);

struct EmbeddingSpace {
  int dim = 0;
  Matrix questions;            // [Q, d]
  std::vector<Matrix> steps;   // per question, [N_q, d]
  Matrix kcs;                  // [K, d]
  ClusterAssignment clusters;
  TextEncoder encoder;         // frozen; encodes questions added later

  int num_questions() const { return static_cast<int>(questions.rows()); }
  int num_kcs() const { return static_cast<int>(kcs.rows()); }
  RowVector fused(int question) const;
  Matrix fused_all() const;  // [Q, d]
};

/// Encodes every question, step, and KC of `corpus` with a frozen encoder.
EmbeddingSpace embed_corpus(const TextEncoder& encoder, const corpus::Corpus& corpus,
                            const ClusterAssignment& clusters);

/// Unit vectors drawn independently of the text; a semantics-free baseline.
EmbeddingSpace random_space(const corpus::Corpus& corpus, int dim, std::uint64_t seed);

struct RetrievalReport {
  double f1 = 0.0;
  int clusters_evaluated = 0;
  int clusters_skipped = 0;  // clusters no question touches
};

/// Cluster-level retrieval: the lowest-id KC of each cluster retrieves its N
/// nearest questions (N = questions touching the cluster); micro-averaged F1.
RetrievalReport retrieval_f1(const EmbeddingSpace& space, const corpus::Corpus& corpus);
RetrievalReport retrieval_f1(const Matrix& question_vectors, const Matrix& kc_vectors,
                             const ClusterAssignment& clusters, const corpus::Corpus& corpus);

struct EmbedConfig {
  EncoderConfig encoder;
  double tau = 0.1;
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 5;
  double min_improvement = 1e-4;
  double learning_rate = 1e-2;
  double cluster_threshold = 0.15;
  std::uint64_t seed = 11;
};

struct EmbedTrainReport {
  std::vector<double> epoch_loss;
  double f1_before = 0.0;
  double f1_after = 0.0;
  int num_clusters = 0;
  long negatives_checked = 0;  // (anchor, negative) pairs verified against the cluster filter
};

/// Minibatch training on the per-question objective with in-batch negatives.
/// Throws TrainingError on a non-finite loss after restoring the last good
/// parameters (and writing them to `checkpoint` when given).
EmbeddingSpace train_embeddings(const corpus::Corpus& corpus, const EmbedConfig& config,
                                EmbedTrainReport* report = nullptr,
                                const std::filesystem::path& checkpoint = {});

/// Mean per-question objective over a set of questions using all KCs as candidates.
double corpus_loss(const EmbeddingSpace& space, const corpus::Corpus& corpus,
                   std::span<const int> question_ids, double tau);

void save_space(const std::filesystem::path& path, const EmbeddingSpace& space);
EmbeddingSpace load_space(const std::filesystem::path& path);
/// Header summary for `kcrl embed info`.
nlohmann::json space_info(const std::filesystem::path& path);

}  // namespace kcrl::embed
