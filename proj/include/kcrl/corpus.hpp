#pragma once

#include "kcrl/random.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace kcrl::corpus {

using Tokens = std::vector<std::string>;

struct KnowledgeConcept {
  int id = 0;
  std::string name;
  Tokens template_tokens;

  bool operator==(const KnowledgeConcept&) const = default;
};

struct Question {
  int id = 0;
  Tokens text;
  std::vector<Tokens> solution_steps;
  std::vector<int> kcs;
  std::vector<std::pair<int, int>> step_kc_map;  // (step index, KC id)
  double difficulty = 0.0;                       // hidden ground truth
  int source_id = -1;                            // original question a variant derives from

  /// KC ids attached to one solution step, ascending.
  std::vector<int> step_kcs(std::size_t step) const;

  bool operator==(const Question&) const = default;
};

struct Corpus {
  std::uint64_t seed = 0;
  std::vector<KnowledgeConcept> kcs;
  std::vector<Question> questions;
  int original_count = 0;  // ids below this are the generated originals

  int num_kcs() const { return static_cast<int>(kcs.size()); }
  int num_questions() const { return static_cast<int>(questions.size()); }
  /// Question ids whose KC list contains `kc`, ascending.
  std::vector<int> questions_for_kc(int kc) const;

  bool operator==(const Corpus&) const = default;
};

struct GeneratorConfig {
  int num_kcs = 20;
  int num_questions = 200;
  std::uint64_t seed = 7;
  int template_size = 50;
  int noise_pool = 500;
  int tokens_per_kc_in_text = 3;
  int noise_tokens_in_text = 6;
  int tokens_per_kc_in_step = 2;
  int noise_tokens_in_step = 2;
  int label_template_tokens = 3;  // template tokens included in a KC's own label text
  // Question difficulty = mean intrinsic difficulty of its KCs + noise, clamped to [-2, 2].
  double kc_difficulty_sd = 1.0;
  double difficulty_noise_sd = 0.3;
};

/// Throws ConfigError for num_kcs < 5 or num_questions < num_kcs.
Corpus generate_corpus(const GeneratorConfig& config);
Corpus generate_corpus(int num_kcs, int num_questions, std::uint64_t seed);

/// Appends `factor` variants per original question. The first variant keeps the
/// source's KC set; later ones add one related KC (swapping out a non-primary
/// KC when the source already has four).
Corpus extend_corpus(const Corpus& corpus, int factor, std::uint64_t seed);

/// Tokens fed to the encoder for a KC: its name plus the leading template tokens.
Tokens kc_label(const KnowledgeConcept& kc, int label_template_tokens = 3);

/// KCs adjacent to `kc` on the concept ring (distance 1..3), ascending, deduplicated.
std::vector<int> related_kcs(int kc, int num_kcs);

/// Throws DataError naming the first violated corpus invariant.
void validate(const Corpus& corpus);

inline constexpr int kCorpusSchemaVersion = 1;

/// Line-delimited JSON: a header record, then one record per KC and per question.
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
/// Throws ParseError (with line number) on malformed or truncated input and
/// VersionError on an unknown schema version.
Corpus load_corpus(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Ground-truth student simulator.

struct GroundTruthStudent {
  std::vector<double> mastery;  // per KC
  double learning_rate = 0.3;   // in [0, 1]
  std::uint64_t seed = 0;
};

struct Interaction {
  int question = 0;
  int response = 0;

  bool operator==(const Interaction&) const = default;
};

struct StudentTrace {
  int student_id = 0;
  std::vector<Interaction> steps;
  /// mastery[t] is the hidden per-KC mastery just before step t. Empty when loaded from disk.
  std::vector<std::vector<double>> mastery;
};

struct SimulatorConfig {
  double ability_sd = 1.2;
  double kc_sd = 1.2;
  double mastery_offset = 0.3;
  double min_learning_rate = 0.1;
  double max_learning_rate = 0.5;
  double recency_bias = 0.3;  // chance the next question shares a KC with the previous one
};

GroundTruthStudent sample_student(const Corpus& corpus, std::uint64_t seed,
                                  const SimulatorConfig& config = {});

/// logistic(mean mastery over the question's KCs - difficulty).
double correct_probability(const GroundTruthStudent& student, const Question& question);

/// Draws `length` interactions from the original questions. After each
/// response every involved KC gains learning_rate * (1 - P(correct)) * 0.5.
StudentTrace simulate_student(const Corpus& corpus, GroundTruthStudent student, int length,
                              std::uint64_t seed, int student_id = 0,
                              const SimulatorConfig& config = {});
StudentTrace simulate_student(const Corpus& corpus, int length, std::uint64_t seed);

/// Students `first_id .. first_id+count-1`, each on its own derived stream.
std::vector<StudentTrace> simulate_population(const Corpus& corpus, int count, int length,
                                              std::uint64_t seed, int first_id = 0,
                                              const SimulatorConfig& config = {});

/// "# kcrl.traces v1" header, then one line per student: `id<TAB>q,r q,r ...`.
void save_traces(const std::filesystem::path& path, const std::vector<StudentTrace>& traces);
std::vector<StudentTrace> load_traces(const std::filesystem::path& path);

}  // namespace kcrl::corpus
