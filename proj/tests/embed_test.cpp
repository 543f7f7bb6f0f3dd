#include "kcrl/embed.hpp"
#include "kcrl/error.hpp"
#include "kcrl/numcore/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

using namespace kcrl;
using namespace kcrl::embed;

namespace {

RowVector row(std::initializer_list<double> v) {
  RowVector r(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

RowVector at_angle(double radians) { return row({std::cos(radians), std::sin(radians)}); }

// Direct evaluation of -log(e^{p/t} / (e^{p/t} + sum e^{n/t})) from raw cosines.
double direct_loss(double pos, const std::vector<double>& negs, double tau) {
  double denom = std::exp(pos / tau);
  for (double n : negs) denom += std::exp(n / tau);
  return -std::log(std::exp(pos / tau) / denom);
}

const corpus::Corpus& shared_corpus() {
  static const corpus::Corpus c = corpus::generate_corpus(20, 200, 7);
  return c;
}

struct Trained {
  EmbeddingSpace space;
  EmbedTrainReport report;
};

const Trained& shared_training() {
  static const Trained t = [] {
    Trained out;
    out.space = train_embeddings(shared_corpus(), EmbedConfig{}, &out.report);
    return out;
  }();
  return t;
}

/// Minimal corpus whose questions each carry a single KC.
corpus::Corpus single_kc_corpus(int kcs, int per_kc) {
  corpus::Corpus c;
  for (int k = 0; k < kcs; ++k) c.kcs.push_back({k, "k" + std::to_string(k), {"a", "b", "c"}});
  for (int k = 0; k < kcs; ++k) {
    for (int i = 0; i < per_kc; ++i) {
      corpus::Question q;
      q.id = c.num_questions();
      q.kcs = {k};
      q.text = {"x"};
      q.solution_steps = {{"x"}};
      q.step_kc_map = {{0, k}};
      c.questions.push_back(q);
    }
  }
  c.original_count = c.num_questions();
  return c;
}

}  // namespace

TEST(Encoder, OutputsAreUnitNormAndDeterministic) {
  const TextEncoder enc(Vocabulary::from_corpus(shared_corpus()), EncoderConfig{}, 3);
  for (const auto& q : shared_corpus().questions) {
    const RowVector v = enc.encode(Kind::question, q.text);
    EXPECT_NEAR(v.norm(), 1.0, 1e-9);
    EXPECT_EQ(v, enc.encode(Kind::question, q.text));
  }
}

TEST(Encoder, KindTagChangesTheVector) {
  const TextEncoder enc(Vocabulary::from_corpus(shared_corpus()), EncoderConfig{}, 3);
  const auto& text = shared_corpus().questions[0].text;
  EXPECT_LT(enc.encode(Kind::question, text).dot(enc.encode(Kind::kc, text)), 1.0 - 1e-6);
}

TEST(Encoder, UnknownTokensMapToReservedRow) {
  const Vocabulary v = Vocabulary::from_corpus(shared_corpus());
  EXPECT_EQ(v.index("never-seen"), 0);
  EXPECT_GT(v.index("c3_4"), 0);
  const TextEncoder enc(v, EncoderConfig{}, 3);
  EXPECT_EQ(enc.encode(Kind::step, {"zzz"}), enc.encode(Kind::step, {"yyy"}));
}

TEST(Encoder, TapeAndDirectPathsAgree) {
  TextEncoder enc(Vocabulary::from_corpus(shared_corpus()), EncoderConfig{}, 5);
  std::vector<Tokens> texts;
  for (int i = 0; i < 10; ++i) texts.push_back(shared_corpus().questions[static_cast<std::size_t>(i)].text);
  nc::Tape tape;
  const Matrix via_tape = enc.encode(tape, Kind::question, texts).value();
  const Matrix direct = enc.encode(Kind::question, texts);
  EXPECT_LT((via_tape - direct).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoder, ProjectionScaleIsAbsorbedByNormalization) {
  TextEncoder enc(Vocabulary::from_corpus(shared_corpus()), EncoderConfig{}, 5);
  const auto& text = shared_corpus().questions[3].text;
  const RowVector before = enc.encode(Kind::question, text);
  enc.proj_weight.value *= 7.5;
  enc.proj_bias.value *= 7.5;
  EXPECT_LT((enc.encode(Kind::question, text) - before).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Cluster, IdenticalVectorsShareCluster) {
  Matrix m(2, 3);
  m << 1, 2, 3, 1, 2, 3;
  const auto a = cluster_kcs(m, 0.15);
  EXPECT_EQ(a.cluster_of[0], a.cluster_of[1]);
  EXPECT_EQ(a.num_clusters, 1);
}

TEST(Cluster, OrthogonalVectorsStayApart) {
  const Matrix m = Matrix::Identity(4, 4);
  const auto a = cluster_kcs(m, 0.15);
  EXPECT_EQ(a.num_clusters, 4);
  EXPECT_EQ(a.cluster_of, (std::vector<int>{0, 1, 2, 3}));
}

TEST(Cluster, SingleLinkChainsThroughIntermediate) {
  // Unit vectors with pairwise cosine 0.9 (a,b), 0.9 (b,c), 0.7 (a,c), built from the Gram matrix.
  Eigen::Matrix3d gram;
  gram << 1.0, 0.9, 0.7, 0.9, 1.0, 0.9, 0.7, 0.9, 1.0;
  const Eigen::Matrix3d l = gram.llt().matrixL();
  Matrix m(4, 4);
  m.setZero();
  m.block(0, 0, 3, 3) = l;
  m(3, 3) = 1.0;  // an unrelated fourth KC
  EXPECT_NEAR(1.0 - m.row(0).dot(m.row(2)), 0.3, 1e-12);
  const auto a = cluster_kcs(m, 0.15);
  EXPECT_EQ(a.cluster_of, (std::vector<int>{0, 0, 0, 1}));
}

TEST(Cluster, LabelsFollowSmallestMember) {
  Matrix m(4, 2);
  m.row(0) = at_angle(0.0);
  m.row(1) = at_angle(1.5);
  m.row(2) = at_angle(0.01);
  m.row(3) = at_angle(1.51);
  const auto a = cluster_kcs(m, 0.15);
  EXPECT_EQ(a.cluster_of, (std::vector<int>{0, 1, 0, 1}));
  EXPECT_EQ(a.members(), (std::vector<std::vector<int>>{{0, 2}, {1, 3}}));
}

TEST(Contrastive, EmptyNegativesGiveZero) {
  EXPECT_EQ(contrastive_loss_q(row({1, 0}), row({0, 1}), {}, 0.1), 0.0);
  EXPECT_EQ(contrastive_loss_s(row({1, 0}), row({0, 1}), {}, 0.1), 0.0);
}

TEST(Contrastive, EqualSimilaritiesGiveLogTwoForAnyTemperature) {
  const RowVector a = at_angle(0.0);
  for (double tau : {0.05, 0.1, 0.5, 2.0}) {
    EXPECT_NEAR(contrastive_loss_q(a, at_angle(0.7), {at_angle(-0.7)}, tau), std::log(2.0), 1e-12);
  }
  EXPECT_NEAR(contrastive_loss_s(a, at_angle(M_PI / 2), {at_angle(-M_PI / 2)}, 0.5), std::log(2.0), 1e-12);
}

TEST(Contrastive, OppositeNegativeClosedForm) {
  const double loss = contrastive_loss_q(row({1, 0}), row({1, 0}), {row({-1, 0})}, 0.1);
  EXPECT_NEAR(loss, std::log1p(std::exp(-20.0)), 1e-20);
  EXPECT_NEAR(loss, 2.06e-9, 0.01e-9);
}

TEST(Contrastive, QuestionAndStepFormsAreIdentical) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    auto rnd = [&] { RowVector v(6); for (Index i = 0; i < 6; ++i) v(i) = n(rng); return v; };
    const RowVector a = rnd(), p = rnd();
    const std::vector<RowVector> negs{rnd(), rnd(), rnd()};
    EXPECT_EQ(contrastive_loss_q(a, p, negs, 0.1), contrastive_loss_s(a, p, negs, 0.1));
  }
}

TEST(Contrastive, NonPositiveTemperatureIsConfigError) {
  EXPECT_THROW(contrastive_loss(row({1, 0}), row({1, 0}), {row({0, 1})}, 0.0), ConfigError);
  EXPECT_THROW(contrastive_loss(row({1, 0}), row({1, 0}), {row({0, 1})}, -1.0), ConfigError);
}

TEST(Contrastive, LossIsNonNegative) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 200; ++trial) {
    auto rnd = [&] { RowVector v(4); for (Index i = 0; i < 4; ++i) v(i) = n(rng); return v; };
    EXPECT_GE(contrastive_loss(rnd(), rnd(), {rnd(), rnd()}, 0.1), 0.0);
  }
}

TEST(Contrastive, NegativeFilterDropsClusterMatesAndOwnKcs) {
  ClusterAssignment clusters{{0, 0, 1, 2, 2, 3}, 4};
  const std::vector<int> candidates{0, 1, 2, 3, 4, 5};
  const std::vector<int> own{0, 5};
  EXPECT_EQ(filter_negatives(0, own, candidates, clusters), (std::vector<int>{2, 3, 4}));
  EXPECT_EQ(filter_negatives(3, own, candidates, clusters), (std::vector<int>{1, 2}));
}

TEST(TotalLoss, SingleKcSingleStepWithoutNegativesIsZero) {
  corpus::Question q;
  q.kcs = {0};
  q.solution_steps = {{"s"}};
  q.step_kc_map = {{0, 0}};
  Matrix kcs(1, 2);
  kcs << 1, 0;
  const std::vector<int> candidates{0};
  EXPECT_EQ(total_contrastive_loss(q, at_angle(0.3), {at_angle(0.2)}, kcs, {{0}, 1}, candidates, 0.1), 0.0);
}

TEST(TotalLoss, HandComputedTwoKcsTwoSteps) {
  // KCs 0,1 belong to the question; KC 2 is the only admissible negative.
  corpus::Question q;
  q.kcs = {0, 1};
  q.solution_steps = {{"s0"}, {"s1"}};
  q.step_kc_map = {{0, 0}, {0, 1}, {1, 1}};
  Matrix kcs(3, 2);
  kcs.row(0) = at_angle(0.0);
  kcs.row(1) = at_angle(M_PI / 2);
  kcs.row(2) = at_angle(M_PI);
  const RowVector zq = at_angle(M_PI / 4);
  const RowVector s0 = at_angle(0.2);
  const RowVector s1 = at_angle(1.4);
  const double tau = 0.1;
  const ClusterAssignment clusters{{0, 1, 2}, 3};
  const std::vector<int> candidates{0, 1, 2};

  auto cosine = [](const RowVector& a, const RowVector& b) { return a.dot(b) / a.norm() / b.norm(); };
  const double lq = (direct_loss(cosine(zq, kcs.row(0)), {cosine(zq, kcs.row(2))}, tau) +
                     direct_loss(cosine(zq, kcs.row(1)), {cosine(zq, kcs.row(2))}, tau)) / 2.0;
  const double step0 = (direct_loss(cosine(s0, kcs.row(0)), {cosine(s0, kcs.row(2))}, tau) +
                        direct_loss(cosine(s0, kcs.row(1)), {cosine(s0, kcs.row(2))}, tau)) / 2.0;
  const double step1 = direct_loss(cosine(s1, kcs.row(1)), {cosine(s1, kcs.row(2))}, tau);
  const double expected = lq + (step0 + step1) / 2.0;
  EXPECT_NEAR(total_contrastive_loss(q, zq, {s0, s1}, kcs, clusters, candidates, tau), expected, 1e-12);
}

TEST(TotalLoss, DuplicatingAStepLeavesStepTermUnchanged) {
  corpus::Question q;
  q.kcs = {0};
  q.solution_steps = {{"s"}};
  q.step_kc_map = {{0, 0}};
  Matrix kcs(2, 2);
  kcs.row(0) = at_angle(0.0);
  kcs.row(1) = at_angle(2.0);
  const ClusterAssignment clusters{{0, 1}, 2};
  const std::vector<int> candidates{0, 1};
  const double one = total_contrastive_loss(q, at_angle(0.1), {at_angle(0.5)}, kcs, clusters, candidates, 0.1);
  corpus::Question twice = q;
  twice.solution_steps.push_back({"s"});
  twice.step_kc_map.emplace_back(1, 0);
  const double two = total_contrastive_loss(twice, at_angle(0.1), {at_angle(0.5), at_angle(0.5)}, kcs, clusters,
                                            candidates, 0.1);
  EXPECT_NEAR(one, two, 1e-14);
}

TEST(TotalLoss, MissingKcsOrStepsIsDataError) {
  corpus::Question q;
  q.solution_steps = {{"s"}};
  const Matrix kcs = Matrix::Identity(2, 2);
  const std::vector<int> candidates{0, 1};
  EXPECT_THROW(total_contrastive_loss(q, at_angle(0), {at_angle(0)}, kcs, {{0, 1}, 2}, candidates, 0.1), DataError);
  q.kcs = {0};
  q.solution_steps.clear();
  EXPECT_THROW(total_contrastive_loss(q, at_angle(0), {}, kcs, {{0, 1}, 2}, candidates, 0.1), DataError);
}

TEST(InfoNce, MatchesPerTermLossesAndComposedTapeOps) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n;
  Matrix anchors(4, 5), kcs(6, 5);
  for (Index i = 0; i < anchors.size(); ++i) anchors.data()[i] = n(rng);
  for (Index i = 0; i < kcs.size(); ++i) kcs.data()[i] = n(rng);
  anchors.rowwise().normalize();
  kcs.rowwise().normalize();
  const std::vector<ContrastiveTerm> terms{{0, 1, {2, 3}, 0.5}, {1, 0, {4}, 0.25}, {2, 5, {0, 1, 2, 3}, 1.0}, {3, 2, {}, 0.7}};
  const double tau = 0.2;

  double expected = 0.0;
  for (const auto& t : terms) {
    std::vector<RowVector> negs;
    for (Index j : t.negatives) negs.push_back(kcs.row(j));
    expected += t.weight * contrastive_loss(anchors.row(t.anchor), kcs.row(t.positive), negs, tau);
  }
  nc::Tape tape;
  const double fused = info_nce(tape.constant(anchors), tape.constant(kcs), terms, tau).scalar();
  EXPECT_NEAR(fused, expected, 1e-12);

  // Second route: the same objective spelled out with generic tape ops.
  nc::Tape t2;
  nc::Var a = t2.constant(anchors);
  nc::Var c = t2.constant(kcs);
  nc::Var total = t2.constant(Matrix::Zero(1, 1));
  for (const auto& term : terms) {
    if (term.negatives.empty()) continue;
    const Index ai = term.anchor;
    nc::Var anchor = nc::select_rows(a, std::span<const Index>(&ai, 1));
    std::vector<Index> rows{term.positive};
    rows.insert(rows.end(), term.negatives.begin(), term.negatives.end());
    nc::Var cands = nc::select_rows(c, rows);
    std::vector<Index> repeat(rows.size(), 0);
    nc::Var logits = nc::scale(nc::row_sum(nc::mul(nc::select_rows(anchor, repeat), cands)), 1.0 / tau);
    nc::Var lse = nc::log(nc::sum(nc::exp(logits)));
    const Index zero = 0;
    nc::Var pos = nc::select_rows(logits, std::span<const Index>(&zero, 1));
    total = nc::add(total, nc::scale(nc::sub(lse, pos), term.weight));
  }
  EXPECT_NEAR(total.scalar(), fused, 1e-12);
}

TEST(InfoNce, GradientMatchesFiniteDifferencesOverSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    nc::Parameter a("anchors", 3, 4), c("kcs", 5, 4);
    for (Index i = 0; i < a.value.size(); ++i) a.value.data()[i] = n(rng);
    for (Index i = 0; i < c.value.size(); ++i) c.value.data()[i] = n(rng);
    const std::vector<ContrastiveTerm> terms{{0, 0, {1, 2}, 0.4}, {1, 3, {0, 4}, 1.0}, {2, 4, {0, 1, 2, 3}, 0.6}};
    const auto report = nc::grad_check(
        [&](nc::Tape& t) {
          return info_nce(nc::normalize_rows(t.parameter(a)), nc::normalize_rows(t.parameter(c)), terms, 0.1);
        },
        {&a, &c});
    EXPECT_LT(report.max_rel_error, 1e-4) << "seed " << seed << " worst " << report.worst_param;
  }
}

TEST(InfoNce, EncoderObjectiveGradientCheck) {
  // Small encoder so every parameter entry can be perturbed.
  const corpus::Corpus c = corpus::generate_corpus(5, 8, 2);
  EncoderConfig cfg;
  cfg.token_dim = 4;
  cfg.dim = 3;
  TextEncoder enc(Vocabulary({"<oov>", "concept0", "concept1", "concept2", "c0_0", "c1_0", "c2_0", "w1"}), cfg, 9);
  const std::vector<Tokens> qs{{"c0_0", "w1"}, {"c1_0", "c2_0", "zz"}};
  const std::vector<Tokens> ks{{"concept0", "c0_0"}, {"concept1", "c1_0"}, {"concept2", "c2_0"}};
  const std::vector<ContrastiveTerm> terms{{0, 0, {1, 2}, 0.5}, {1, 1, {0}, 0.5}};
  const auto report = nc::grad_check(
      [&](nc::Tape& t) {
        return info_nce(enc.encode(t, Kind::question, qs), enc.encode(t, Kind::kc, ks), terms, 0.1);
      },
      enc.params());
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param;
}

TEST(Fuse, Examples) {
  EXPECT_EQ(fuse_question_embedding(row({1, 0}), {row({0, 2}), row({0, 0})}), row({0.5, 0.5}));
  EXPECT_EQ(fuse_question_embedding(row({0.6, 0.8}), {row({0, 0}), row({0, 0})}), row({0.3, 0.4}));
  EXPECT_EQ(fuse_question_embedding(row({0.6, 0.8}), {row({0.6, 0.8})}), row({0.6, 0.8}));
}

TEST(Fuse, PermutationInvariant) {
  const RowVector q = row({0.1, 0.2, 0.3});
  const RowVector a = row({1, 2, 3}), b = row({-1, 0.5, 4}), c = row({0, 0, 1});
  EXPECT_LT((fuse_question_embedding(q, {a, b, c}) - fuse_question_embedding(q, {c, a, b})).norm(), 1e-15);
}

TEST(Retrieval, PerfectEmbeddingScoresOne) {
  const auto c = single_kc_corpus(4, 3);
  const Matrix kcs = Matrix::Identity(4, 4);
  Matrix questions(c.num_questions(), 4);
  for (const auto& q : c.questions) questions.row(q.id) = kcs.row(q.kcs[0]);
  const auto r = retrieval_f1(questions, kcs, {{0, 1, 2, 3}, 4}, c);
  EXPECT_DOUBLE_EQ(r.f1, 1.0);
  EXPECT_EQ(r.clusters_evaluated, 4);
}

TEST(Retrieval, HalfCorrectClusterScoresHalf) {
  // Questions 0,1 carry KC 0 and 2,3 carry KC 1; each KC's top-2 holds one member and one outsider.
  const auto c = single_kc_corpus(2, 2);
  Matrix kcs(2, 2);
  kcs << 1, 0, 0, 1;
  Matrix questions(4, 2);
  questions.row(0) = at_angle(0.0);
  questions.row(1) = at_angle(1.5);
  questions.row(2) = at_angle(0.1);
  questions.row(3) = at_angle(1.55);
  EXPECT_DOUBLE_EQ(retrieval_f1(questions, kcs, {{0, 1}, 2}, c).f1, 0.5);
}

TEST(Retrieval, RandomVectorsScoreLow) {
  const auto& c = shared_corpus();
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    const EmbeddingSpace s = random_space(c, 32, seed);
    EXPECT_LT(retrieval_f1(s, c).f1, 0.2) << "seed " << seed;
  }
}

TEST(Retrieval, SkipsClustersWithoutQuestions) {
  auto c = single_kc_corpus(3, 2);
  for (auto& q : c.questions) {
    if (q.kcs[0] == 2) q.kcs = {0};
  }
  Matrix questions(6, 3);
  for (const auto& q : c.questions) questions.row(q.id) = Matrix::Identity(3, 3).row(q.kcs[0]);
  const auto r = retrieval_f1(questions, Matrix::Identity(3, 3), {{0, 1, 2}, 3}, c);
  EXPECT_EQ(r.clusters_skipped, 1);
  EXPECT_EQ(r.clusters_evaluated, 2);
}

TEST(Training, AlignsQuestionsWithTheirConcepts) {
  const auto& t = shared_training();
  EXPECT_LE(t.report.f1_before, 0.35);
  EXPECT_GE(t.report.f1_after, 0.80);
  EXPECT_GT(t.report.negatives_checked, 0);
  std::cout << "retrieval F1 " << t.report.f1_before << " -> " << t.report.f1_after << " in "
            << t.report.epoch_loss.size() << " epochs, " << t.report.num_clusters << " clusters\n";
}

TEST(Training, OutputsAreUnitNorm) {
  const auto& s = shared_training().space;
  for (Index r = 0; r < s.questions.rows(); ++r) EXPECT_NEAR(s.questions.row(r).norm(), 1.0, 1e-9);
  for (Index r = 0; r < s.kcs.rows(); ++r) EXPECT_NEAR(s.kcs.row(r).norm(), 1.0, 1e-9);
  for (const auto& m : s.steps) {
    for (Index r = 0; r < m.rows(); ++r) EXPECT_NEAR(m.row(r).norm(), 1.0, 1e-9);
  }
}

TEST(Training, OverfitSubsetLossIsMonotone) {
  corpus::Corpus small = shared_corpus();
  small.questions.resize(10);
  small.original_count = 10;
  EmbedConfig cfg;
  cfg.batch_size = 10;
  cfg.max_epochs = 40;
  cfg.patience = 100;
  cfg.learning_rate = 3e-3;
  EmbedTrainReport report;
  train_embeddings(small, cfg, &report);
  ASSERT_EQ(report.epoch_loss.size(), 40u);
  for (std::size_t i = 1; i < report.epoch_loss.size(); ++i) {
    EXPECT_LE(report.epoch_loss[i], report.epoch_loss[i - 1] + 1e-3) << "epoch " << i;
  }
  EXPECT_LT(report.epoch_loss.back(), report.epoch_loss.front());
}

TEST(Training, DeterministicGivenSeed) {
  corpus::Corpus small = corpus::generate_corpus(8, 40, 3);
  EmbedConfig cfg;
  cfg.max_epochs = 5;
  const auto a = train_embeddings(small, cfg);
  const auto b = train_embeddings(small, cfg);
  EXPECT_EQ(a.questions, b.questions);
  EXPECT_EQ(a.kcs, b.kcs);
}

TEST(Space, FrozenEncoderReproducesStoredVectorsAndEncodesVariants) {
  const auto& s = shared_training().space;
  const corpus::Corpus ext = corpus::extend_corpus(shared_corpus(), 3, 4);
  const EmbeddingSpace grown = embed_corpus(s.encoder, ext, s.clusters);
  EXPECT_EQ(grown.num_questions(), 800);
  EXPECT_LT((grown.questions.topRows(200) - s.questions).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((grown.kcs - s.kcs).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Space, SaveLoadRoundTrip) {
  const auto& s = shared_training().space;
  const auto path = std::filesystem::temp_directory_path() / "kcrl_embed_test.bin";
  save_space(path, s);
  const EmbeddingSpace back = load_space(path);
  EXPECT_EQ(back.dim, s.dim);
  EXPECT_EQ(back.questions, s.questions);
  EXPECT_EQ(back.kcs, s.kcs);
  ASSERT_EQ(back.steps.size(), s.steps.size());
  for (std::size_t i = 0; i < s.steps.size(); ++i) EXPECT_EQ(back.steps[i], s.steps[i]);
  EXPECT_EQ(back.clusters, s.clusters);
  EXPECT_EQ(back.encoder.encode(Kind::question, shared_corpus().questions[5].text), s.questions.row(5));

  const auto info = space_info(path);
  EXPECT_EQ(info.at("dimension"), 32);
  EXPECT_EQ(info.at("num_questions"), 200);
  EXPECT_EQ(info.at("num_kcs"), 20);

  // Flip one payload byte: the checksum must catch it.
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(-100, std::ios::end);
  char byte = 0;
  f.read(&byte, 1);
  f.seekp(-100, std::ios::end);
  byte = static_cast<char>(byte ^ 0x5a);
  f.write(&byte, 1);
  f.close();
  EXPECT_THROW(load_space(path), DataError);
}
