#include "kcrl/corpus.hpp"
#include "kcrl/error.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace kcrl;
using namespace kcrl::corpus;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "kcrl_corpus_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

int template_overlap(const Tokens& text, const KnowledgeConcept& kc) {
  std::set<std::string> tmpl(kc.template_tokens.begin(), kc.template_tokens.end());
  int n = 0;
  for (const auto& tok : text) n += tmpl.count(tok) ? 1 : 0;
  return n;
}

}  // namespace

TEST(Generate, ShapeOfDefaultCorpus) {
  const Corpus c = generate_corpus(20, 200, 7);
  ASSERT_EQ(c.num_questions(), 200);
  ASSERT_EQ(c.num_kcs(), 20);
  for (const auto& q : c.questions) {
    EXPECT_GE(q.kcs.size(), 1u);
    EXPECT_LE(q.kcs.size(), 4u);
    for (int kc : q.kcs) {
      EXPECT_GE(kc, 0);
      EXPECT_LT(kc, 20);
    }
    EXPECT_GE(q.solution_steps.size(), 2u);
    EXPECT_LE(q.solution_steps.size(), 6u);
    EXPECT_GE(q.difficulty, -2.0);
    EXPECT_LE(q.difficulty, 2.0);
  }
  for (int k = 0; k < 20; ++k) EXPECT_FALSE(c.questions_for_kc(k).empty()) << "KC " << k;
}

TEST(Generate, MostQuestionsCarryThreeConcepts) {
  const Corpus c = generate_corpus(20, 400, 3);
  int three = 0;
  double total = 0;
  for (const auto& q : c.questions) {
    three += q.kcs.size() == 3 ? 1 : 0;
    total += static_cast<double>(q.kcs.size());
  }
  EXPECT_GT(three, 400 / 3);
  EXPECT_GT(total / 400.0, 2.4);
}

TEST(Generate, StepMapReferencesQuestionKcsAndCoversBothSides) {
  for (std::uint64_t seed : {1u, 7u, 99u}) {
    const Corpus c = generate_corpus(12, 150, seed);
    for (const auto& q : c.questions) {
      std::set<int> kcs(q.kcs.begin(), q.kcs.end());
      std::set<int> steps_seen;
      std::set<int> kcs_seen;
      for (const auto& [s, kc] : q.step_kc_map) {
        EXPECT_TRUE(kcs.count(kc)) << "question " << q.id;
        steps_seen.insert(s);
        kcs_seen.insert(kc);
      }
      EXPECT_EQ(steps_seen.size(), q.solution_steps.size());
      EXPECT_EQ(kcs_seen, kcs);
    }
  }
}

TEST(Generate, StepTextDrawsOnlyFromMappedConcepts) {
  const Corpus c = generate_corpus(20, 200, 7);
  for (const auto& q : c.questions) {
    for (std::size_t s = 0; s < q.solution_steps.size(); ++s) {
      const auto mapped = q.step_kcs(s);
      for (int k = 0; k < c.num_kcs(); ++k) {
        const bool is_mapped = std::find(mapped.begin(), mapped.end(), k) != mapped.end();
        const int overlap = template_overlap(q.solution_steps[s], c.kcs[static_cast<std::size_t>(k)]);
        if (is_mapped) {
          EXPECT_GT(overlap, 0);
        } else {
          EXPECT_EQ(overlap, 0);
        }
      }
    }
  }
}

TEST(Generate, TextOverlapsOwnTemplatesMoreThanDisjointConcepts) {
  const Corpus c = generate_corpus(20, 200, 7);
  int good = 0;
  for (const auto& q : c.questions) {
    double own = 0;
    for (int kc : q.kcs) own += template_overlap(q.text, c.kcs[static_cast<std::size_t>(kc)]);
    own /= static_cast<double>(q.kcs.size());
    double other = 0;
    int n_other = 0;
    for (int k = 0; k < c.num_kcs(); ++k) {
      if (std::find(q.kcs.begin(), q.kcs.end(), k) != q.kcs.end()) continue;
      other += template_overlap(q.text, c.kcs[static_cast<std::size_t>(k)]);
      ++n_other;
    }
    other /= n_other;
    good += own > other ? 1 : 0;
  }
  EXPECT_GE(good, 190);  // >= 95%
}

TEST(Generate, InfeasibleParametersAreConfigErrors) {
  EXPECT_THROW(generate_corpus(4, 100, 1), ConfigError);
  EXPECT_THROW(generate_corpus(20, 10, 1), ConfigError);
}

TEST(Generate, DeterministicGivenSeed) {
  EXPECT_EQ(generate_corpus(20, 200, 11), generate_corpus(20, 200, 11));
  EXPECT_NE(generate_corpus(20, 200, 11), generate_corpus(20, 200, 12));
}

TEST(Simulator, EqualMasteryAndDifficultyGivesHalf) {
  const Corpus c = generate_corpus(10, 100, 5);
  GroundTruthStudent s;
  const Question& q = c.questions[0];
  s.mastery.assign(10, q.difficulty);
  EXPECT_DOUBLE_EQ(correct_probability(s, q), 0.5);
}

TEST(Simulator, ZeroLearningRateKeepsMasteryConstant) {
  const Corpus c = generate_corpus(10, 100, 5);
  GroundTruthStudent s = sample_student(c, 17);
  s.learning_rate = 0.0;
  const StudentTrace t = simulate_student(c, s, 60, 17);
  ASSERT_EQ(t.mastery.size(), 60u);
  for (const auto& m : t.mastery) EXPECT_EQ(m, t.mastery.front());
}

TEST(Simulator, MasteryNeverDecreases) {
  const Corpus c = generate_corpus(20, 200, 7);
  for (const auto& t : simulate_population(c, 20, 120, 3)) {
    for (std::size_t i = 1; i < t.mastery.size(); ++i) {
      for (std::size_t k = 0; k < t.mastery[i].size(); ++k) EXPECT_GE(t.mastery[i][k], t.mastery[i - 1][k]);
    }
  }
}

TEST(Simulator, PracticeImprovesCorrectness) {
  const Corpus c = generate_corpus(20, 200, 7);
  double early = 0;
  double late = 0;
  for (int i = 0; i < 100; ++i) {
    GroundTruthStudent s = sample_student(c, derive_seed(42, static_cast<std::uint64_t>(i)));
    s.learning_rate = 0.3;
    const StudentTrace t = simulate_student(c, s, 100, derive_seed(42, static_cast<std::uint64_t>(i)), i);
    for (int j = 0; j < 10; ++j) early += t.steps[static_cast<std::size_t>(j)].response;
    for (int j = 90; j < 100; ++j) late += t.steps[static_cast<std::size_t>(j)].response;
  }
  EXPECT_GE((late - early) / 1000.0, 0.05);
}

TEST(Simulator, RecencyBiasRaisesSharedConceptRate) {
  const Corpus c = generate_corpus(20, 200, 7);
  SimulatorConfig none;
  none.recency_bias = 0.0;
  auto shared_rate = [&](const SimulatorConfig& cfg) {
    int shared = 0;
    int total = 0;
    for (const auto& t : simulate_population(c, 30, 100, 9, 0, cfg)) {
      for (std::size_t i = 1; i < t.steps.size(); ++i) {
        const auto& a = c.questions[static_cast<std::size_t>(t.steps[i - 1].question)].kcs;
        const auto& b = c.questions[static_cast<std::size_t>(t.steps[i].question)].kcs;
        bool any = false;
        for (int k : a) any = any || std::find(b.begin(), b.end(), k) != b.end();
        shared += any ? 1 : 0;
        ++total;
      }
    }
    return static_cast<double>(shared) / total;
  };
  EXPECT_GT(shared_rate(SimulatorConfig{}), shared_rate(none) + 0.15);
}

TEST(Simulator, DeterministicPerStudentStream) {
  const Corpus c = generate_corpus(20, 200, 7);
  const auto a = simulate_population(c, 5, 50, 21);
  const auto b = simulate_population(c, 5, 50, 21);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].steps, b[i].steps);
    EXPECT_EQ(a[i].mastery, b[i].mastery);
  }
  // A student's trace does not depend on how many others are simulated.
  const auto tail = simulate_population(c, 2, 50, 21, 3);
  EXPECT_EQ(tail[0].steps, a[3].steps);
}

TEST(Extend, FactorThreeQuadruplesCorpus) {
  const Corpus c = generate_corpus(20, 200, 7);
  const Corpus e = extend_corpus(c, 3, 1);
  EXPECT_EQ(e.num_questions(), 800);
  EXPECT_EQ(e.original_count, 200);
  for (int i = 0; i < 200; ++i) EXPECT_EQ(e.questions[static_cast<std::size_t>(i)], c.questions[static_cast<std::size_t>(i)]);
}

TEST(Extend, FirstVariantKeepsKcSetAndLaterAddOne) {
  const Corpus c = generate_corpus(20, 200, 7);
  const Corpus e = extend_corpus(c, 3, 1);
  for (int i = 200; i < e.num_questions(); ++i) {
    const Question& v = e.questions[static_cast<std::size_t>(i)];
    const Question& src = c.questions[static_cast<std::size_t>(v.source_id)];
    const int variant = (i - 200) % 3;
    std::set<int> a(v.kcs.begin(), v.kcs.end());
    std::set<int> b(src.kcs.begin(), src.kcs.end());
    if (variant == 0) {
      EXPECT_EQ(a, b);
    } else {
      std::vector<int> added;
      std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(added));
      EXPECT_EQ(added.size(), 1u) << "question " << i;
    }
    EXPECT_NE(v.text, src.text);
  }
}

TEST(Extend, EveryVariantSharesAConceptWithSource) {
  const Corpus c = generate_corpus(20, 200, 7);
  const Corpus e = extend_corpus(c, 3, 1);
  for (int i = 200; i < e.num_questions(); ++i) {
    const Question& v = e.questions[static_cast<std::size_t>(i)];
    const Question& src = c.questions[static_cast<std::size_t>(v.source_id)];
    int shared = 0;
    for (int k : v.kcs) shared += std::count(src.kcs.begin(), src.kcs.end(), k);
    EXPECT_GE(shared, 1);
  }
}

TEST(Persistence, RoundTripIsLossless) {
  const Corpus c = extend_corpus(generate_corpus(20, 200, 7), 1, 2);
  const auto path = temp_file("roundtrip.jsonl");
  save_corpus(path, c);
  EXPECT_EQ(load_corpus(path), c);
}

TEST(Persistence, UnknownVersionIsExplicit) {
  const auto path = temp_file("version.jsonl");
  save_corpus(path, generate_corpus(5, 20, 1));
  std::ifstream in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  const auto pos = text.find("\"version\":1");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 11, "\"version\":9");
  std::ofstream(path, std::ios::trunc) << text;
  EXPECT_THROW(load_corpus(path), VersionError);
}

TEST(Persistence, TruncatedFileIsParseError) {
  const auto path = temp_file("truncated.jsonl");
  save_corpus(path, generate_corpus(5, 20, 1));
  std::ifstream in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  // Drop the last record entirely.
  std::string whole_lines = text.substr(0, text.rfind('\n', text.size() - 2) + 1);
  std::ofstream(path, std::ios::trunc) << whole_lines;
  EXPECT_THROW(load_corpus(path), ParseError);

  // Cut mid-record.
  std::ofstream(path, std::ios::trunc) << text.substr(0, text.size() / 2);
  try {
    load_corpus(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_GT(e.line(), 1);
  }
}

TEST(Persistence, TracesRoundTrip) {
  const Corpus c = generate_corpus(10, 100, 5);
  const auto traces = simulate_population(c, 4, 30, 8, 10);
  const auto path = temp_file("traces.tsv");
  save_traces(path, traces);
  const auto back = load_traces(path);
  ASSERT_EQ(back.size(), traces.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].student_id, traces[i].student_id);
    EXPECT_EQ(back[i].steps, traces[i].steps);
  }
}
