#include "kcrl/corpus.hpp"

#include "kcrl/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace kcrl::corpus {

namespace {

std::string template_token(int kc, int j) { return "c" + std::to_string(kc) + "_" + std::to_string(j); }
std::string noise_token(int n) { return "w" + std::to_string(n); }
// Five difficulty levels, each marked by its own three surface tokens.
std::string level_token(int level, int j) { return "lv" + std::to_string(level) + "_" + std::to_string(j); }

int difficulty_level(double d) {
  return std::clamp(static_cast<int>(std::floor((d + 2.0) / 4.0 * 5.0)), 0, 4);
}

std::vector<int> sample_distinct(std::vector<int> pool, std::size_t n, Rng& rng) {
  shuffle(pool, rng);
  pool.resize(std::min(n, pool.size()));
  return pool;
}

void add_template_tokens(Tokens& out, const KnowledgeConcept& kc, int count, Rng& rng) {
  std::vector<int> idx(kc.template_tokens.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  for (int j : sample_distinct(idx, static_cast<std::size_t>(count), rng)) {
    out.push_back(kc.template_tokens[static_cast<std::size_t>(j)]);
  }
}

void add_noise_tokens(Tokens& out, int count, int pool, Rng& rng) {
  for (int i = 0; i < count; ++i) {
    out.push_back(noise_token(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(pool)))));
  }
}

int sample_kc_count(Rng& rng) {
  // Mostly three concepts per question.
  const double u = uniform01(rng);
  if (u < 0.1) return 1;
  if (u < 0.3) return 2;
  if (u < 0.8) return 3;
  return 4;
}


/// Fills text, steps, and the step/KC map for a question whose kcs and difficulty are set.
void realize_question(Question& q, const Corpus& c, const GeneratorConfig& g, Rng& rng) {
  q.text.clear();
  for (int kc : q.kcs) add_template_tokens(q.text, c.kcs[static_cast<std::size_t>(kc)], g.tokens_per_kc_in_text, rng);
  add_noise_tokens(q.text, g.noise_tokens_in_text, g.noise_pool, rng);
  const int level = difficulty_level(q.difficulty);
  for (int j = 0; j < 3; ++j) q.text.push_back(level_token(level, j));
  shuffle(q.text, rng);

  const int m = static_cast<int>(q.kcs.size());
  const int steps = 2 + static_cast<int>(uniform_index(rng, 5));  // 2..6
  std::vector<std::set<int>> step_kcs(static_cast<std::size_t>(steps));
  std::vector<int> order = q.kcs;
  shuffle(order, rng);
  if (steps >= m) {
    for (int k = 0; k < m; ++k) step_kcs[static_cast<std::size_t>(k)].insert(order[static_cast<std::size_t>(k)]);
    for (int s = m; s < steps; ++s) {
      step_kcs[static_cast<std::size_t>(s)].insert(order[uniform_index(rng, order.size())]);
    }
  } else {
    for (int s = 0; s < steps; ++s) step_kcs[static_cast<std::size_t>(s)].insert(order[static_cast<std::size_t>(s)]);
    for (int k = steps; k < m; ++k) {
      step_kcs[uniform_index(rng, static_cast<std::size_t>(steps))].insert(order[static_cast<std::size_t>(k)]);
    }
  }
  // Shuffle step order so the first KC is not always in step 0.
  std::vector<std::set<int>> shuffled = step_kcs;
  shuffle(shuffled, rng);

  q.solution_steps.clear();
  q.step_kc_map.clear();
  for (int s = 0; s < steps; ++s) {
    Tokens step;
    for (int kc : shuffled[static_cast<std::size_t>(s)]) {
      add_template_tokens(step, c.kcs[static_cast<std::size_t>(kc)], g.tokens_per_kc_in_step, rng);
      q.step_kc_map.emplace_back(s, kc);
    }
    add_noise_tokens(step, g.noise_tokens_in_step, g.noise_pool, rng);
    step.push_back(level_token(level, static_cast<int>(uniform_index(rng, 3))));
    shuffle(step, rng);
    q.solution_steps.push_back(std::move(step));
  }
}

}  // namespace

std::vector<int> Question::step_kcs(std::size_t step) const {
  std::vector<int> out;
  for (const auto& [s, kc] : step_kc_map) {
    if (static_cast<std::size_t>(s) == step) out.push_back(kc);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> Corpus::questions_for_kc(int kc) const {
  std::vector<int> out;
  for (const Question& q : questions) {
    if (std::find(q.kcs.begin(), q.kcs.end(), kc) != q.kcs.end()) out.push_back(q.id);
  }
  return out;
}

std::vector<int> related_kcs(int kc, int num_kcs) {
  std::set<int> out;
  for (int d = 1; d <= 3; ++d) {
    out.insert(((kc + d) % num_kcs + num_kcs) % num_kcs);
    out.insert(((kc - d) % num_kcs + num_kcs) % num_kcs);
  }
  out.erase(kc);
  return {out.begin(), out.end()};
}

Tokens kc_label(const KnowledgeConcept& kc, int label_template_tokens) {
  Tokens out{kc.name};
  for (int j = 0; j < label_template_tokens && j < static_cast<int>(kc.template_tokens.size()); ++j) {
    out.push_back(kc.template_tokens[static_cast<std::size_t>(j)]);
  }
  return out;
}

Corpus generate_corpus(const GeneratorConfig& g) {
  if (g.num_kcs < 5) throw ConfigError("corpus.num_kcs must be >= 5, got " + std::to_string(g.num_kcs));
  if (g.num_questions < g.num_kcs) {
    throw ConfigError("corpus.num_questions (" + std::to_string(g.num_questions) +
                      ") must be >= corpus.num_kcs (" + std::to_string(g.num_kcs) + ")");
  }
  if (g.template_size < 3 || g.noise_pool < 1) {
    throw ConfigError("corpus.template_size must be >= 3 and corpus.noise_pool >= 1");
  }
  Rng rng(derive_seed(g.seed, 0));
  Corpus c;
  c.seed = g.seed;
  for (int k = 0; k < g.num_kcs; ++k) {
    KnowledgeConcept kc;
    kc.id = k;
    kc.name = "concept" + std::to_string(k);
    for (int j = 0; j < g.template_size; ++j) kc.template_tokens.push_back(template_token(k, j));
    c.kcs.push_back(std::move(kc));
  }
  // Some concepts are intrinsically harder than others.
  std::vector<double> kc_difficulty(static_cast<std::size_t>(g.num_kcs));
  for (double& d : kc_difficulty) d = g.kc_difficulty_sd * normal01(rng);
  // Balanced primary concepts so every KC owns questions.
  std::vector<int> primaries(static_cast<std::size_t>(g.num_questions));
  for (int i = 0; i < g.num_questions; ++i) primaries[static_cast<std::size_t>(i)] = i % g.num_kcs;
  shuffle(primaries, rng);
  for (int i = 0; i < g.num_questions; ++i) {
    Question q;
    q.id = i;
    const int primary = primaries[static_cast<std::size_t>(i)];
    const int m = sample_kc_count(rng);
    q.kcs.push_back(primary);
    for (int extra : sample_distinct(related_kcs(primary, g.num_kcs), static_cast<std::size_t>(m - 1), rng)) {
      q.kcs.push_back(extra);
    }
    double base = 0.0;
    for (int kc : q.kcs) base += kc_difficulty[static_cast<std::size_t>(kc)];
    base /= static_cast<double>(q.kcs.size());
    q.difficulty = std::clamp(base + g.difficulty_noise_sd * normal01(rng), -2.0, 2.0);
    realize_question(q, c, g, rng);
    c.questions.push_back(std::move(q));
  }
  c.original_count = g.num_questions;
  validate(c);
  return c;
}

Corpus generate_corpus(int num_kcs, int num_questions, std::uint64_t seed) {
  GeneratorConfig g;
  g.num_kcs = num_kcs;
  g.num_questions = num_questions;
  g.seed = seed;
  return generate_corpus(g);
}

Corpus extend_corpus(const Corpus& corpus, int factor, std::uint64_t seed) {
  if (factor < 1) throw ConfigError("extend factor must be >= 1, got " + std::to_string(factor));
  Corpus out = corpus;
  GeneratorConfig g;
  g.template_size = corpus.kcs.empty() ? 50 : static_cast<int>(corpus.kcs.front().template_tokens.size());
  Rng rng(derive_seed(seed, 0xE11E));
  const int k_total = corpus.num_kcs();
  int next_id = corpus.num_questions();
  for (int src = 0; src < corpus.original_count; ++src) {
    const Question& source = corpus.questions[static_cast<std::size_t>(src)];
    for (int v = 0; v < factor; ++v) {
      Question q;
      q.id = next_id++;
      q.source_id = source.id;
      q.kcs = source.kcs;
      if (v > 0) {
        std::vector<int> candidates;
        for (int r : related_kcs(source.kcs.front(), k_total)) {
          if (std::find(q.kcs.begin(), q.kcs.end(), r) == q.kcs.end()) candidates.push_back(r);
        }
        if (candidates.empty()) {
          for (int r = 0; r < k_total; ++r) {
            if (std::find(q.kcs.begin(), q.kcs.end(), r) == q.kcs.end()) candidates.push_back(r);
          }
        }
        if (!candidates.empty()) {
          if (q.kcs.size() >= 4) {
            // Keep the primary; replace one of the others to stay within four KCs.
            q.kcs.erase(q.kcs.begin() + 1 + static_cast<long>(uniform_index(rng, q.kcs.size() - 1)));
          }
          q.kcs.push_back(candidates[uniform_index(rng, candidates.size())]);
        }
      }
      q.difficulty = std::clamp(source.difficulty + 0.3 * normal01(rng), -2.0, 2.0);
      realize_question(q, out, g, rng);
      out.questions.push_back(std::move(q));
    }
  }
  validate(out);
  return out;
}

void validate(const Corpus& c) {
  const int K = c.num_kcs();
  for (int k = 0; k < K; ++k) {
    const auto& kc = c.kcs[static_cast<std::size_t>(k)];
    if (kc.id != k) throw DataError("KC ids must be dense: position " + std::to_string(k) + " has id " + std::to_string(kc.id));
    if (kc.template_tokens.size() < 3) throw DataError("KC " + std::to_string(k) + " has fewer than 3 template tokens");
  }
  std::set<std::string> names;
  for (const auto& kc : c.kcs) {
    if (!names.insert(kc.name).second) throw DataError("duplicate KC name " + kc.name);
  }
  for (int i = 0; i < c.num_questions(); ++i) {
    const Question& q = c.questions[static_cast<std::size_t>(i)];
    const std::string where = "question " + std::to_string(q.id);
    if (q.id != i) throw DataError("question ids must be dense: position " + std::to_string(i) + " has id " + std::to_string(q.id));
    if (q.kcs.empty() || q.kcs.size() > 4) throw DataError(where + " has " + std::to_string(q.kcs.size()) + " KCs (want 1-4)");
    if (q.solution_steps.size() < 2 || q.solution_steps.size() > 6) throw DataError(where + " has " + std::to_string(q.solution_steps.size()) + " steps (want 2-6)");
    if (q.text.empty()) throw DataError(where + " has empty text");
    std::set<int> kc_set(q.kcs.begin(), q.kcs.end());
    if (kc_set.size() != q.kcs.size()) throw DataError(where + " lists a KC twice");
    for (int kc : q.kcs) {
      if (kc < 0 || kc >= K) throw DataError(where + " references unknown KC " + std::to_string(kc));
    }
    std::set<int> covered_steps;
    std::set<int> covered_kcs;
    for (const auto& [s, kc] : q.step_kc_map) {
      if (s < 0 || s >= static_cast<int>(q.solution_steps.size())) throw DataError(where + " maps unknown step " + std::to_string(s));
      if (!kc_set.count(kc)) throw DataError(where + " maps step " + std::to_string(s) + " to KC " + std::to_string(kc) + " outside its KC list");
      covered_steps.insert(s);
      covered_kcs.insert(kc);
    }
    if (covered_steps.size() != q.solution_steps.size()) throw DataError(where + " has a step with no KC");
    if (covered_kcs.size() != kc_set.size()) throw DataError(where + " has a KC with no step");
    for (const auto& step : q.solution_steps) {
      if (step.empty()) throw DataError(where + " has an empty solution step");
    }
    if (!(q.difficulty >= -2.0 && q.difficulty <= 2.0)) throw DataError(where + " difficulty outside [-2, 2]");
  }
  if (c.original_count < 0 || c.original_count > c.num_questions()) throw DataError("original_count out of range");
}

// ---------------------------------------------------------------------------
// Persistence.

void save_corpus(const std::filesystem::path& path, const Corpus& c) {
  using nlohmann::json;
  std::ostringstream out;
  json header = {{"record", "header"},       {"schema", "kcrl.corpus"},
                 {"version", kCorpusSchemaVersion}, {"num_kcs", c.num_kcs()},
                 {"num_questions", c.num_questions()}, {"original_count", c.original_count},
                 {"seed", c.seed}};
  out << header.dump() << '\n';
  for (const auto& kc : c.kcs) {
    out << json{{"record", "kc"}, {"id", kc.id}, {"name", kc.name}, {"template", kc.template_tokens}}.dump() << '\n';
  }
  for (const auto& q : c.questions) {
    json map = json::array();
    for (const auto& [s, kc] : q.step_kc_map) map.push_back({s, kc});
    out << json{{"record", "question"}, {"id", q.id},         {"text", q.text},
                {"steps", q.solution_steps}, {"kcs", q.kcs},    {"step_kc", map},
                {"difficulty", q.difficulty}, {"source", q.source_id}}
               .dump()
        << '\n';
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f << out.str();
  }
  std::filesystem::rename(tmp, path);
}

Corpus load_corpus(const std::filesystem::path& path) {
  using nlohmann::json;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file " + path.string());
  std::string line;
  long lineno = 0;
  auto parse = [&](const std::string& text) {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": malformed record: " + e.what(), lineno);
    }
  };
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty corpus file", 1);
  ++lineno;
  const json header = parse(line);
  Corpus c;
  int num_kcs = 0;
  int num_questions = 0;
  try {
    if (header.at("record") != "header" || header.at("schema") != "kcrl.corpus") {
      throw ParseError(path.string() + ": missing corpus header", lineno);
    }
    const int version = header.at("version").get<int>();
    if (version != kCorpusSchemaVersion) {
      throw VersionError(path.string() + ": unsupported corpus schema version " + std::to_string(version) +
                         " (expected " + std::to_string(kCorpusSchemaVersion) + ")");
    }
    num_kcs = header.at("num_kcs").get<int>();
    num_questions = header.at("num_questions").get<int>();
    c.original_count = header.at("original_count").get<int>();
    c.seed = header.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": bad header: " + e.what(), lineno);
  }
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const json r = parse(line);
    try {
      const std::string kind = r.at("record").get<std::string>();
      if (kind == "kc") {
        KnowledgeConcept kc;
        kc.id = r.at("id").get<int>();
        kc.name = r.at("name").get<std::string>();
        kc.template_tokens = r.at("template").get<Tokens>();
        c.kcs.push_back(std::move(kc));
      } else if (kind == "question") {
        Question q;
        q.id = r.at("id").get<int>();
        q.text = r.at("text").get<Tokens>();
        q.solution_steps = r.at("steps").get<std::vector<Tokens>>();
        q.kcs = r.at("kcs").get<std::vector<int>>();
        for (const auto& p : r.at("step_kc")) q.step_kc_map.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
        q.difficulty = r.at("difficulty").get<double>();
        q.source_id = r.at("source").get<int>();
        c.questions.push_back(std::move(q));
      } else {
        throw ParseError(path.string() + ": unknown record kind '" + kind + "'", lineno);
      }
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": bad record: " + e.what(), lineno);
    }
  }
  if (c.num_kcs() != num_kcs || c.num_questions() != num_questions) {
    throw ParseError(path.string() + ": truncated corpus: header declares " + std::to_string(num_kcs) + " KCs / " +
                         std::to_string(num_questions) + " questions, found " + std::to_string(c.num_kcs()) +
                         " / " + std::to_string(c.num_questions()),
                     lineno + 1);
  }
  try {
    validate(c);
  } catch (const DataError& e) {
    throw ParseError(path.string() + ": " + e.what(), lineno);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Simulator.

GroundTruthStudent sample_student(const Corpus& corpus, std::uint64_t seed, const SimulatorConfig& cfg) {
  Rng rng(derive_seed(seed, 0x57D));
  GroundTruthStudent s;
  s.seed = seed;
  const double ability = cfg.ability_sd * normal01(rng);
  s.mastery.resize(static_cast<std::size_t>(corpus.num_kcs()));
  for (double& m : s.mastery) m = cfg.mastery_offset + ability + cfg.kc_sd * normal01(rng);
  s.learning_rate = cfg.min_learning_rate + (cfg.max_learning_rate - cfg.min_learning_rate) * uniform01(rng);
  return s;
}

double correct_probability(const GroundTruthStudent& student, const Question& q) {
  double m = 0.0;
  for (int kc : q.kcs) m += student.mastery[static_cast<std::size_t>(kc)];
  m /= static_cast<double>(q.kcs.size());
  return 1.0 / (1.0 + std::exp(-(m - q.difficulty)));
}

StudentTrace simulate_student(const Corpus& corpus, GroundTruthStudent student, int length,
                              std::uint64_t seed, int student_id, const SimulatorConfig& cfg) {
  if (length < 1) throw ConfigError("trace length must be >= 1, got " + std::to_string(length));
  const int pool = corpus.original_count > 0 ? corpus.original_count : corpus.num_questions();
  Rng rng(derive_seed(seed, 0x7ACE));
  StudentTrace trace;
  trace.student_id = student_id;
  int previous = -1;
  for (int t = 0; t < length; ++t) {
    int qid = -1;
    if (previous >= 0 && uniform01(rng) < cfg.recency_bias) {
      const Question& prev = corpus.questions[static_cast<std::size_t>(previous)];
      const int kc = prev.kcs[uniform_index(rng, prev.kcs.size())];
      std::vector<int> sharing;
      for (int id : corpus.questions_for_kc(kc)) {
        if (id < pool) sharing.push_back(id);
      }
      qid = sharing[uniform_index(rng, sharing.size())];
    } else {
      qid = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(pool)));
    }
    const Question& q = corpus.questions[static_cast<std::size_t>(qid)];
    trace.mastery.push_back(student.mastery);
    const double p = correct_probability(student, q);
    const int y = uniform01(rng) < p ? 1 : 0;
    trace.steps.push_back({qid, y});
    const double gain = student.learning_rate * (1.0 - p) * 0.5;
    for (int kc : q.kcs) student.mastery[static_cast<std::size_t>(kc)] += gain;
    previous = qid;
  }
  return trace;
}

StudentTrace simulate_student(const Corpus& corpus, int length, std::uint64_t seed) {
  return simulate_student(corpus, sample_student(corpus, seed), length, seed, 0);
}

std::vector<StudentTrace> simulate_population(const Corpus& corpus, int count, int length,
                                              std::uint64_t seed, int first_id, const SimulatorConfig& cfg) {
  std::vector<StudentTrace> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int id = first_id + i;
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(id));
    out.push_back(simulate_student(corpus, sample_student(corpus, s, cfg), length, s, id, cfg));
  }
  return out;
}

void save_traces(const std::filesystem::path& path, const std::vector<StudentTrace>& traces) {
  std::ostringstream out;
  out << "# kcrl.traces v1\n";
  for (const auto& t : traces) {
    out << t.student_id << '\t';
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      if (i) out << ' ';
      out << t.steps[i].question << ',' << t.steps[i].response;
    }
    out << '\n';
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f << out.str();
  }
  std::filesystem::rename(tmp, path);
}

std::vector<StudentTrace> load_traces(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trace file " + path.string());
  std::string line;
  long lineno = 1;
  if (!std::getline(in, line) || line != "# kcrl.traces v1") {
    if (line.rfind("# kcrl.traces", 0) == 0) throw VersionError(path.string() + ": unsupported trace version: " + line);
    throw ParseError(path.string() + ": missing trace header", lineno);
  }
  std::vector<StudentTrace> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(path.string() + ": expected '<id>\\t<pairs>'", lineno);
    StudentTrace t;
    try {
      t.student_id = std::stoi(line.substr(0, tab));
    } catch (const std::exception&) {
      throw ParseError(path.string() + ": bad student id", lineno);
    }
    std::istringstream pairs(line.substr(tab + 1));
    std::string tok;
    while (pairs >> tok) {
      const auto comma = tok.find(',');
      if (comma == std::string::npos) throw ParseError(path.string() + ": bad pair '" + tok + "'", lineno);
      Interaction it;
      try {
        it.question = std::stoi(tok.substr(0, comma));
        it.response = std::stoi(tok.substr(comma + 1));
      } catch (const std::exception&) {
        throw ParseError(path.string() + ": bad pair '" + tok + "'", lineno);
      }
      if (it.response != 0 && it.response != 1) throw ParseError(path.string() + ": response must be 0 or 1", lineno);
      t.steps.push_back(it);
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace kcrl::corpus
