#include "kcrl/env.hpp"
#include "kcrl/error.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace kcrl;
using namespace kcrl::env;

namespace {

constexpr int kDim = 6;
constexpr int kState = 8;
constexpr int kHidden = 12;
constexpr int kKcs = 5;
constexpr int kQuestions = 30;

Matrix random_matrix(Index r, Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// A model whose every prediction is exactly `p` and whose state never moves.
kt::KTModel constant_model(double p) {
  kt::KTModel m = kt::KTModel::zeros(kDim, kState, kHidden);
  m.b_out.value(0, 0) = std::log(p / (1.0 - p));
  return m;
}

Environment make_env(kt::KTModel model, EnvConfig cfg = {}) {
  return Environment(std::move(model), random_matrix(kQuestions, kDim, 1), random_matrix(kKcs, kDim, 2), cfg);
}

Matrix uniform_targets(Index n) { return Matrix::Constant(n, kKcs, 1.0 / kKcs); }

Matrix one_hot_targets(Index n, int kc) {
  Matrix t = Matrix::Zero(n, kKcs);
  t.col(kc).setOnes();
  return t;
}

EnvState random_start(const Environment& env, Index n, std::uint64_t seed, const Matrix& targets,
                      TargetRule rule = TargetRule::fixed) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = static_cast<int>(100 + i);
  Matrix h = 0.5 * random_matrix(n, kState, seed);
  Matrix c = 0.5 * random_matrix(n, kState, seed + 1);
  return env.reset_states(ids, h.array().tanh(), c, targets, rule);
}

std::vector<corpus::StudentTrace> toy_traces(int count, int length) {
  std::vector<corpus::StudentTrace> out(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    out[static_cast<std::size_t>(s)].student_id = s;
    for (int t = 0; t < length; ++t) out[static_cast<std::size_t>(s)].steps.push_back({(s * 7 + t * 3) % kQuestions, (s + t) % 2});
  }
  return out;
}

}  // namespace

TEST(Config, RejectsInvalidValues) {
  EnvConfig c;
  c.horizon = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.reward_scale = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.gamma = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(EnvConfig{}.validate());
}

TEST(Reset, ZeroWarmupOnZeroModelGivesZeroStates) {
  EnvConfig cfg;
  cfg.warmup = 0;
  const auto env = make_env(kt::KTModel::zeros(kDim, kState, kHidden), cfg);
  const auto st = env.reset(toy_traces(4, 3), uniform_targets(4), TargetRule::fixed);
  EXPECT_EQ(st.hidden, Matrix::Zero(4, kState));
  EXPECT_EQ(st.cell, Matrix::Zero(4, kState));
  EXPECT_EQ(st.step, 0);
  EXPECT_FALSE(st.done);
}

TEST(Reset, ShortTracesAreListed) {
  EnvConfig cfg;
  cfg.warmup = 10;
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 3), cfg);
  auto traces = toy_traces(3, 12);
  traces[1].steps.resize(4);
  traces[2].steps.resize(9);
  try {
    env.reset(traces, uniform_targets(3), TargetRule::fixed);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(" 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find(" 2"), std::string::npos) << msg;
  }
}

TEST(Reset, DeterministicAndMatchesWarmup) {
  EnvConfig cfg;
  cfg.warmup = 10;
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 3), cfg);
  const auto traces = toy_traces(5, 12);
  const auto a = env.reset(traces, uniform_targets(5), TargetRule::fixed);
  const auto b = env.reset(traces, uniform_targets(5), TargetRule::fixed);
  EXPECT_EQ(a.hidden, b.hidden);
  EXPECT_EQ(a.kc_knowledge, b.kc_knowledge);
  const auto w = kt::warmup_state(env.model(), traces[3].steps, env.questions(), 10);
  EXPECT_EQ(RowVector(a.hidden.row(3)), w.hidden);
}

TEST(Reset, KnowledgeCacheMatchesPredictKnowledge) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 3));
  const auto st = random_start(env, 4, 9, one_hot_targets(4, 2));
  for (Index r = 0; r < 4; ++r) {
    kt::StudentState s{st.hidden.row(r), st.cell.row(r), 0};
    EXPECT_EQ(st.knowledge[static_cast<std::size_t>(r)], env.model().predict_knowledge(s, env.kcs().row(2)));
  }
}

TEST(Reset, RejectsTargetsThatAreNotDistributions) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 3));
  EXPECT_THROW(random_start(env, 2, 1, Matrix::Zero(2, kKcs)), DataError);
  EXPECT_THROW(random_start(env, 2, 1, Matrix::Constant(2, 3, 1.0 / 3)), DimensionError);
}

TEST(Step, BranchProbabilitiesSumToOneAndDrawIsBernoulli) {
  const auto env = make_env(constant_model(0.8));
  int correct = 0, total = 0;
  const int n = 1000;
  EnvState st = random_start(env, n, 5, uniform_targets(n));
  while (!st.done) {
    const auto out = env.step_questions(st, std::vector<int>(n, 3));
    for (int i = 0; i < n; ++i) {
      EXPECT_NEAR(out.y_hat[i] + (1.0 - out.y_hat[i]), 1.0, 0.0);
      EXPECT_NEAR(out.y_hat[i], 0.8, 1e-15);
      correct += out.response[i];
      ++total;
    }
  }
  ASSERT_EQ(total, 10000);
  EXPECT_NEAR(static_cast<double>(correct) / total, 0.8, 0.01);
}

TEST(Step, SaturatedModelAlwaysTakesCorrectBranch) {
  kt::KTModel m = kt::KTModel::zeros(kDim, kState, kHidden);
  m.b_out.value(0, 0) = 30.0;  // P = 1 - 9e-14
  const auto env = make_env(m);
  EnvState st = random_start(env, 200, 5, uniform_targets(200));
  while (!st.done) {
    const auto out = env.step_questions(st, std::vector<int>(200, 0));
    for (int y : out.response) ASSERT_EQ(y, 1);
  }
}

TEST(Step, NoKnowledgeChangeGivesZeroReward) {
  const auto env = make_env(constant_model(0.6));
  EnvState st = random_start(env, 3, 5, one_hot_targets(3, 1));
  const auto out = env.step(st, random_matrix(3, kDim, 4));
  for (double r : out.reward) EXPECT_EQ(r, 0.0);
}

TEST(Step, RewardIsScaledKnowledgeDifference) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 7));
  EnvState st = random_start(env, 4, 5, one_hot_targets(4, 3));
  const Matrix before = st.kc_knowledge;
  const auto out = env.step(st, random_matrix(4, kDim, 4));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(out.target_kc[i], 3);
    EXPECT_EQ(out.knowledge_before[i], before(static_cast<Index>(i), 3));
    EXPECT_EQ(out.knowledge_after[i], st.kc_knowledge(static_cast<Index>(i), 3));
    EXPECT_EQ(out.reward[i], 1000.0 * (out.knowledge_after[i] - out.knowledge_before[i]));
  }
}

TEST(Step, FinishedEpisodeRefusesToStep) {
  EnvConfig cfg;
  cfg.horizon = 2;
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 7), cfg);
  EnvState st = random_start(env, 2, 5, uniform_targets(2));
  env.step_questions(st, std::vector<int>{0, 1});
  EXPECT_FALSE(st.done);
  const auto out = env.step_questions(st, std::vector<int>{0, 1});
  EXPECT_TRUE(out.done);
  EXPECT_THROW(env.step_questions(st, std::vector<int>{0, 1}), ProtocolError);
}

TEST(Step, RejectsMalformedActions) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 7));
  EnvState st = random_start(env, 2, 5, uniform_targets(2));
  EXPECT_THROW(env.step(st, Matrix::Zero(2, kDim + 1)), DimensionError);
  EXPECT_THROW(env.step_questions(st, std::vector<int>{0, kQuestions}), DataError);
  EXPECT_THROW(env.step_questions(st, std::vector<int>{0}), DimensionError);
}

TEST(Step, OutcomeIsPureGivenStateActionAndDraw) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 7));
  EnvState a = random_start(env, 6, 5, uniform_targets(6));
  EnvState b = a;
  const std::vector<int> qs{1, 2, 3, 4, 5, 6};
  const auto sampled = env.step_questions(a, qs);
  const auto forced = env.step_observed(b, qs, sampled.response);
  EXPECT_EQ(a.hidden, b.hidden);
  EXPECT_EQ(sampled.reward, forced.reward);
  // Streams advance identically whether or not the response was forced.
  EXPECT_EQ(a.streams, b.streams);
}

TEST(Step, BatchedEqualsSequentialBitForBit) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 11));
  const Index n = 7;
  EnvState batch = random_start(env, n, 5, uniform_targets(n));
  std::vector<EnvState> singles;
  for (Index r = 0; r < n; ++r) {
    singles.push_back(env.reset_states({batch.student_ids[static_cast<std::size_t>(r)]}, batch.hidden.row(r),
                                       batch.cell.row(r), uniform_targets(1), TargetRule::fixed));
  }
  std::mt19937_64 rng(3);
  while (!batch.done) {
    const Matrix actions = random_matrix(n, kDim, rng());
    const auto out = env.step(batch, actions);
    for (Index r = 0; r < n; ++r) {
      const auto one = env.step(singles[static_cast<std::size_t>(r)], actions.row(r));
      ASSERT_EQ(one.response[0], out.response[static_cast<std::size_t>(r)]);
      ASSERT_EQ(one.y_hat[0], out.y_hat[static_cast<std::size_t>(r)]);
      ASSERT_EQ(one.reward[0], out.reward[static_cast<std::size_t>(r)]);
    }
  }
  for (Index r = 0; r < n; ++r) {
    EXPECT_EQ(RowVector(batch.hidden.row(r)), RowVector(singles[static_cast<std::size_t>(r)].hidden.row(0)));
    EXPECT_EQ(RowVector(batch.cell.row(r)), RowVector(singles[static_cast<std::size_t>(r)].cell.row(0)));
  }
}

TEST(Step, BatchOrderIsIrrelevant) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 11));
  EnvState a = random_start(env, 4, 5, uniform_targets(4));
  // Reverse the batch.
  std::vector<int> ids(a.student_ids.rbegin(), a.student_ids.rend());
  EnvState b = env.reset_states(ids, a.hidden.colwise().reverse(), a.cell.colwise().reverse(), uniform_targets(4),
                                TargetRule::fixed);
  const auto oa = env.step_questions(a, std::vector<int>{2, 2, 2, 2});
  const auto ob = env.step_questions(b, std::vector<int>{2, 2, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(oa.response[i], ob.response[3 - i]);
}

TEST(Telescoping, SumOfRewardsIsFinalMinusInitialKnowledge) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 13));
  for (int target : {0, 4}) {
    EnvState st = random_start(env, 16, 21, one_hot_targets(16, target));
    const std::vector<double> k0 = st.knowledge;
    std::vector<double> sum(16, 0.0);
    std::mt19937_64 rng(8);
    while (!st.done) {
      const auto out = env.step(st, random_matrix(16, kDim, rng()));
      for (std::size_t i = 0; i < 16; ++i) sum[i] += out.reward[i] / env.config().reward_scale;
    }
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(sum[i], st.knowledge[i] - k0[i], 1e-12);
  }
  // Uniform weights over all KCs telescope the same way.
  EnvState st = random_start(env, 8, 22, uniform_targets(8));
  const std::vector<double> k0 = st.knowledge;
  std::vector<double> sum(8, 0.0);
  while (!st.done) {
    const auto out = env.step_questions(st, std::vector<int>(8, st.step));
    for (std::size_t i = 0; i < 8; ++i) sum[i] += out.reward[i] / env.config().reward_scale;
  }
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(sum[i], st.knowledge[i] - k0[i], 1e-12);
}

TEST(Weakest, TargetFollowsArgminAndCacheStaysConsistent) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 13));
  EnvState st = random_start(env, 32, 21, Matrix(), TargetRule::weakest);
  std::mt19937_64 rng(8);
  while (!st.done) {
    for (Index r = 0; r < st.size(); ++r) {
      Index arg;
      const double lo = st.kc_knowledge.row(r).minCoeff(&arg);
      ASSERT_EQ(st.targets(r, arg), 1.0);
      ASSERT_EQ(st.knowledge[static_cast<std::size_t>(r)], lo);
    }
    const auto out = env.step(st, random_matrix(32, kDim, rng()));
    for (std::size_t i = 0; i < out.target_kc.size(); ++i) ASSERT_GE(out.target_kc[i], 0);
  }
}

TEST(Mapping, ExactMatchAndLowestIdTieBreak) {
  Matrix table = random_matrix(10, 4, 3);
  for (Index q = 0; q < 10; ++q) EXPECT_EQ(nearest_question(table, table.row(q)), q);
  table.row(7) = table.row(2);
  EXPECT_EQ(nearest_question(table, table.row(7)), 2);
  table.row(5) = 3.0 * table.row(1);  // same direction, different length: cosine tie
  EXPECT_EQ(nearest_question(table, table.row(5)), 1);
  EXPECT_THROW(nearest_question(Matrix(0, 4), RowVector::Zero(4)), DataError);
}

TEST(Mapping, ExtendedTablesCanReturnVariants) {
  const auto c = corpus::extend_corpus(corpus::generate_corpus(20, 200, 7), 3, 2);
  const Matrix table = random_matrix(c.num_questions(), 8, 5);
  std::mt19937_64 rng(1);
  int variants = 0;
  for (int i = 0; i < 200; ++i) {
    if (nearest_question(table, random_matrix(1, 8, rng()).row(0)) >= c.original_count) ++variants;
  }
  EXPECT_GT(variants, 0);
  EXPECT_GE(nearest_question(table, table.row(650)), 200);
}

TEST(Rollout, RunsFullHorizonOn2048StudentsWithRandomPolicy) {
  EnvConfig cfg;
  cfg.warmup = 20;
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 17), cfg);
  const auto traces = toy_traces(2048, 20);
  EnvState st = env.reset(traces, uniform_targets(2048), TargetRule::fixed);
  Rng rng(4);
  const Policy random_policy = [&](const EnvState& s, const Matrix&) {
    Action a;
    for (Index r = 0; r < s.size(); ++r) a.questions.push_back(static_cast<int>(uniform_index(rng, kQuestions)));
    return a;
  };
  const auto traj = rollout(env, st, random_policy, true);
  ASSERT_EQ(traj.steps.size(), 10u);
  for (const auto& s : traj.steps) EXPECT_EQ(s.reward.size(), 2048u);
  EXPECT_EQ(traj.final_knowledge, st.kc_knowledge);
}

TEST(Rollout, RetrievalSnapsRawActionsToQuestions) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 17));
  const Policy raw_policy = [&](const EnvState& s, const Matrix&) {
    Action a;
    a.vectors = random_matrix(s.size(), kDim, static_cast<std::uint64_t>(s.step));
    return a;
  };
  EnvState a = random_start(env, 5, 2, uniform_targets(5));
  const auto snapped = rollout(env, a, raw_policy, true);
  for (const auto& s : snapped.steps) {
    for (int q : s.question) EXPECT_GE(q, 0);
  }
  EnvState b = random_start(env, 5, 2, uniform_targets(5));
  const auto raw = rollout(env, b, raw_policy, false);
  for (const auto& s : raw.steps) {
    for (int q : s.question) EXPECT_EQ(q, -1);
  }
}

TEST(Rollout, ObservationCarriesStateAndTargetEmbedding) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 17));
  EnvState st = random_start(env, 3, 2, one_hot_targets(3, 4));
  const Matrix obs = env.observation(st);
  ASSERT_EQ(obs.cols(), env.observation_dim());
  EXPECT_EQ(Matrix(obs.leftCols(kState)), st.hidden);
  EXPECT_EQ(Matrix(obs.middleCols(kState, kState)), st.cell);
  for (Index r = 0; r < 3; ++r) EXPECT_EQ(RowVector(obs.block(r, 2 * kState, 1, kDim)), RowVector(env.kcs().row(4)));
}

TEST(Rollout, TrajectoryCsvHasOneRowPerStudentStep) {
  const auto env = make_env(kt::KTModel(kDim, kState, kHidden, 17));
  EnvState st = random_start(env, 3, 2, uniform_targets(3));
  const Policy p = [](const EnvState& s, const Matrix&) {
    Action a;
    a.questions.assign(static_cast<std::size_t>(s.size()), 4);
    return a;
  };
  const auto traj = rollout(env, st, p, true);
  const auto path = std::filesystem::temp_directory_path() / "kcrl_env_traj.csv";
  write_trajectory_csv(path, traj);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "student_id,step,question_id,response,y_hat,target_kc,knowledge_before,knowledge_after,reward");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 30);
}
