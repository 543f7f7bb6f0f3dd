#include "kcrl/error.hpp"
#include "kcrl/numcore/gradcheck.hpp"
#include "kcrl/numcore/io.hpp"
#include "kcrl/numcore/lstm.hpp"
#include "kcrl/numcore/optim.hpp"
#include "kcrl/numcore/rowwise.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace kcrl;
using namespace kcrl::nc;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

Parameter random_param(const std::string& name, Index r, Index c, std::mt19937_64& rng,
                       double lo = -1.0, double hi = 1.0) {
  Parameter p(name, r, c);
  std::uniform_real_distribution<double> d(lo, hi);
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = d(rng);
  return p;
}

}  // namespace

TEST(Affine, IdentityCase) {
  Tape t;
  Var y = affine(t.constant(mat({{1, 0}})), t.constant(Matrix::Identity(2, 2)),
                 t.constant(mat({{0, 0}})));
  EXPECT_EQ(y.value(), mat({{1, 0}}));
}

TEST(Affine, DirectArithmetic) {
  Tape t;
  Var y = affine(t.constant(mat({{1, 2}})), t.constant(mat({{1, 1}, {1, 1}})),
                 t.constant(mat({{1, 0}})));
  EXPECT_EQ(y.value(), mat({{4, 3}}));
}

TEST(Affine, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    affine(t.constant(Matrix::Zero(1, 3)), t.constant(Matrix::Zero(2, 2)),
           t.constant(Matrix::Zero(1, 2)));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
}

TEST(Affine, WeightGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  Parameter x = random_param("x", 3, 3, rng);
  Parameter w = random_param("w", 3, 3, rng);
  Parameter b = random_param("b", 1, 3, rng);
  auto fn = [&](Tape& t) {
    return sum(affine(t.parameter(x), t.parameter(w), t.parameter(b)));
  };
  const auto report = grad_check(fn, {&w, &x, &b});
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param << "[" << report.worst_index << "]";
}

TEST(Elementwise, ClosedFormValues) {
  Tape t;
  Var z = t.constant(Matrix::Zero(1, 1));
  EXPECT_DOUBLE_EQ(elementwise(z, Activation::sigmoid).scalar(), 0.5);
  EXPECT_DOUBLE_EQ(elementwise(z, Activation::tanh).scalar(), 0.0);
  Var two = t.constant(Matrix::Constant(1, 1, 2.0));
  EXPECT_NEAR(elementwise(two, Activation::sigmoid).scalar(), 0.880797, 1e-6);
  EXPECT_DOUBLE_EQ(elementwise(t.constant(Matrix::Constant(1, 1, -3.0)), Activation::relu).scalar(), 0.0);
}

TEST(RecurrentCell, ZeroParamsGiveZeroHidden) {
  LstmParams p("cell", 3, 4);
  Tape t;
  LstmVars v = bind(t, p);
  Var h0 = t.constant(Matrix::Zero(2, 4));
  Var c0 = t.constant(Matrix::Zero(2, 4));
  Var x = t.constant(mat({{1.0, -2.0, 0.5}, {3.0, 0.1, -0.7}}));
  CellState s = gated_recurrent_cell(h0, c0, x, v);
  EXPECT_EQ(s.hidden.value(), Matrix::Zero(2, 4));
}

TEST(RecurrentCell, SaturatedGatesClosedForm) {
  // Single unit; every gate pre-activation is 100 from a zero state.
  LstmParams p("cell", 1, 1);
  p.bias.value.setConstant(100.0);
  Tape t;
  LstmVars v = bind(t, p);
  CellState s = gated_recurrent_cell(t.constant(Matrix::Zero(1, 1)), t.constant(Matrix::Zero(1, 1)),
                                     t.constant(Matrix::Zero(1, 1)), v);
  EXPECT_NEAR(s.cell.scalar(), 1.0, 1e-12);
  EXPECT_NEAR(s.hidden.scalar(), std::tanh(1.0), 1e-12);
  EXPECT_NEAR(s.hidden.scalar(), 0.7616, 1e-4);
}

TEST(RecurrentCell, GradientsOverThreeStepRollout) {
  std::mt19937_64 rng(5);
  LstmParams p("cell", 3, 4);
  init_uniform(p.w_input, 3, rng);
  init_uniform(p.w_hidden, 4, rng);
  init_uniform(p.bias, 4, rng);
  Parameter inputs = random_param("inputs", 3, 3, rng);
  auto fn = [&](Tape& t) {
    LstmVars v = bind(t, p);
    Var in = t.parameter(inputs);
    CellState s{t.constant(Matrix::Zero(1, 4)), t.constant(Matrix::Zero(1, 4))};
    for (Index step = 0; step < 3; ++step) {
      s = gated_recurrent_cell(s.hidden, s.cell, select_rows(in, std::vector<Index>{step}), v);
    }
    return sum(mul(s.hidden, s.hidden));
  };
  const auto report = grad_check(fn, {&p.w_input, &p.w_hidden, &p.bias, &inputs});
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param << "[" << report.worst_index << "]";
}

TEST(RecurrentCell, RowwiseKernelAgreesWithTape) {
  std::mt19937_64 rng(8);
  LstmParams p("cell", 5, 6);
  init_uniform(p.w_input, 5, rng);
  init_uniform(p.w_hidden, 6, rng);
  init_uniform(p.bias, 6, rng);
  Parameter h = random_param("h", 4, 6, rng);
  Parameter c = random_param("c", 4, 6, rng);
  Parameter x = random_param("x", 4, 5, rng);
  Tape t;
  CellState s = gated_recurrent_cell(t.parameter(h), t.parameter(c), t.parameter(x), bind(t, p));
  const auto out = rowwise::lstm_step(h.value, c.value, x.value, p.w_input.value, p.w_hidden.value,
                                      p.bias.value);
  EXPECT_LT((out.hidden - s.hidden.value()).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LT((out.cell - s.cell.value()).cwiseAbs().maxCoeff(), 1e-13);

  // A row's result does not depend on the rest of the batch.
  const auto single = rowwise::lstm_step(h.value.row(2), c.value.row(2), x.value.row(2),
                                         p.w_input.value, p.w_hidden.value, p.bias.value);
  EXPECT_EQ(single.hidden.row(0), out.hidden.row(2));
  EXPECT_EQ(single.cell.row(0), out.cell.row(2));
}

TEST(Bce, Values) {
  EXPECT_NEAR(bce(0.5, 1.0), 0.693147, 1e-6);
  EXPECT_NEAR(bce(1.0 - 1e-7, 1.0), 1e-7, 1e-12);
  EXPECT_NEAR(bce(0.9, 0.0), 2.302585, 1e-6);
  EXPECT_NEAR(bce(1.0, 1.0), -std::log(1.0 - 1e-7), 1e-15);  // clamped
}

TEST(Bce, NonNegativeAndZeroOnlyAtMatchingClampBoundary) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double p = u(rng);
    EXPECT_GE(bce(p, 0.0), 0.0);
    EXPECT_GE(bce(p, 1.0), 0.0);
  }
  EXPECT_GT(bce(0.999, 1.0), 0.0);
  EXPECT_LT(bce(1.0, 1.0), 1.1e-7);
  EXPECT_LT(bce(0.0, 0.0), 1.1e-7);
}

TEST(Bce, TapeLossGradient) {
  std::mt19937_64 rng(4);
  Parameter logits = random_param("logits", 4, 3, rng);
  Matrix target = (Matrix::Random(4, 3).array() > 0).cast<double>();
  auto fn = [&](Tape& t) { return bce_loss(sigmoid(t.parameter(logits)), target); };
  EXPECT_LT(grad_check(fn, {&logits}).max_rel_error, 1e-4);
}

TEST(Adam, ZeroGradientLeavesParamsAndDecaysMoments) {
  Parameter w("w", 1, 2);
  w.value << 1.0, -2.0;
  Adam opt({&w}, AdamConfig{});
  w.grad << 1.0, 1.0;
  opt.step();
  const Matrix m1 = opt.state().first_moment[0];
  w.grad.setZero();
  opt.step();
  EXPECT_LT(opt.state().first_moment[0].cwiseAbs().maxCoeff(), m1.cwiseAbs().maxCoeff());
  // Fresh optimizer with only zero gradients: nothing moves.
  Parameter v("v", 1, 2);
  v.value << 1.0, -2.0;
  Adam opt2({&v}, AdamConfig{});
  opt2.step();
  EXPECT_EQ(v.value, mat({{1.0, -2.0}}));
  EXPECT_EQ(opt2.state().step, 1);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  Parameter w("w", 1, 1);
  w.value(0, 0) = 0.5;
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  Adam opt({&w}, cfg);
  w.grad(0, 0) = 1.0;
  opt.step();
  EXPECT_NEAR(w.value(0, 0), 0.5 - 0.1, 1e-6);
}

TEST(Adam, ConvergesOnScalarQuadratic) {
  Parameter w("w", 1, 1);
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  Adam opt({&w}, cfg);
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    Tape t;
    Var loss = square(add_scalar(t.parameter(w), -3.0));
    t.backward(loss);
    opt.step();
  }
  EXPECT_LT(std::abs(w.value(0, 0) - 3.0), 0.05);
  EXPECT_EQ(opt.state().step, 200);
}

TEST(Adam, NonFiniteGradientAborts) {
  Parameter w("layer.w", 1, 2);
  Adam opt({&w}, AdamConfig{});
  w.grad(0, 1) = std::nan("");
  try {
    opt.step();
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.w"), std::string::npos);
  }
  EXPECT_EQ(w.value, Matrix::Zero(1, 2));
  EXPECT_EQ(opt.state().step, 0);
}

TEST(GradCheck, QuadraticFormIsNearExact) {
  std::mt19937_64 rng(2);
  Parameter x = random_param("x", 1, 4, rng);
  Matrix a = Matrix::Random(4, 4);
  a = (a + a.transpose()).eval();
  auto fn = [&](Tape& t) {
    Var xv = t.parameter(x);
    return sum(mul(matmul(xv, t.constant(a)), xv));
  };
  const auto report = grad_check(fn, {&x});
  EXPECT_LT(report.max_rel_error, 1e-6);
  EXPECT_EQ(report.entries_checked, 4u);
  EXPECT_GE(report.worst_index, 0);
}

// Every differentiable op, randomized shapes, 20 seeds.
TEST(GradCheck, AllOpsAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> dim(1, 4);
    const Index r = dim(rng), c = dim(rng), k = dim(rng);
    Parameter a = random_param("a", r, c, rng);
    Parameter b = random_param("b", r, c, rng);
    Parameter w = random_param("w", c, k, rng);
    Parameter row = random_param("row", 1, c, rng);
    Parameter col = random_param("col", r, 1, rng);
    Parameter pos = random_param("pos", r, c, rng, 0.5, 2.0);
    Parameter table = random_param("table", 5, c, rng);
    Parameter other = random_param("other", 3, c, rng);
    const Matrix target = Matrix::Random(r, k);
    auto fn = [&](Tape& t) {
      Var va = t.parameter(a), vb = t.parameter(b), vw = t.parameter(w);
      Var vrow = t.parameter(row), vcol = t.parameter(col), vpos = t.parameter(pos);
      Var vt = t.parameter(table), vo = t.parameter(other);
      Var x = add(mul(va, vb), sub(add_row(va, vrow), scale(vb, 0.3)));
      x = add(x, mul_col(tanh(vb), vcol));
      x = add(x, add(sigmoid(va), add(exp(scale(vb, 0.5)), log(vpos))));
      x = add(x, minimum(square(va), add_scalar(vb, 0.05)));
      x = add(x, clamp(va, -0.9, 0.9));
      x = add(x, relu(add_scalar(va, 0.013)));
      Var y = matmul(x, vw);
      Var z = concat_cols({y, slice_cols(x, 0, 1)});
      Var cat = reshape(z, z.cols(), z.rows());
      Var gathered = gather_mean(vt, {{0, 1}, {2}, {3, 4, 0}});
      Var pairs = outer_add(select_rows(gathered, std::vector<Index>{2, 0}), vo);
      Var unit = normalize_rows(add_scalar(pairs, 0.1));
      Var loss = add(mse_loss(y, target), sum(row_sum(cat)));
      loss = add(loss, mean(unit));
      loss = add(loss, bce_loss(sigmoid(slice_cols(y, 0, 1)), Matrix::Ones(r, 1)));
      return loss;
    };
    const auto report = grad_check(fn, {&a, &b, &w, &row, &col, &pos, &table, &other});
    EXPECT_LT(report.max_rel_error, 1e-4)
        << "seed " << seed << ": " << report.worst_param << "[" << report.worst_index
        << "] analytic " << report.worst_analytic << " numeric " << report.worst_numeric;
  }
}

TEST(Tape, BackwardIsBitDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(99);
    LstmParams p("cell", 4, 5);
    init_uniform(p.w_input, 4, rng);
    init_uniform(p.w_hidden, 5, rng);
    init_uniform(p.bias, 5, rng);
    Parameter xp = random_param("x", 3, 4, rng);
    const Matrix x = xp.value;
    Tape t;
    CellState s = gated_recurrent_cell(t.constant(Matrix::Zero(3, 5)), t.constant(Matrix::Zero(3, 5)),
                                       t.constant(x), bind(t, p));
    t.backward(sum(s.hidden));
    return p.w_input.grad;
  };
  const Matrix g1 = run();
  const Matrix g2 = run();
  EXPECT_EQ(0, std::memcmp(g1.data(), g2.data(), sizeof(double) * static_cast<std::size_t>(g1.size())));
}

TEST(Tape, ConstantsRecordNoBackward) {
  Tape t;
  Var a = t.constant(Matrix::Ones(2, 2));
  Var y = sum(mul(a, a));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_NO_THROW(t.backward(y));
  EXPECT_THROW(t.backward(mul(a, a)), DimensionError);
}

TEST(SoftUpdate, ConvexCombinationEntryWise) {
  std::mt19937_64 rng(1);
  for (double tau : {0.0, 0.01, 0.5, 1.0}) {
    Parameter on = random_param("p", 3, 2, rng);
    Parameter tg = random_param("p", 3, 2, rng);
    const Matrix before = tg.value;
    soft_update({&on}, {&tg}, tau);
    for (Index i = 0; i < before.size(); ++i) {
      EXPECT_DOUBLE_EQ(tg.value.data()[i], tau * on.value.data()[i] + (1.0 - tau) * before.data()[i]);
    }
    if (tau == 1.0) EXPECT_EQ(tg.value, on.value);
  }
}

TEST(Blob, RoundTripAndCorruption) {
  const auto dir = std::filesystem::temp_directory_path() / "kcrl_numcore_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "params.bin";
  std::mt19937_64 rng(6);
  Parameter a = random_param("layer.a", 3, 4, rng);
  Blob blob;
  blob.meta["kind"] = "test";
  store_params(blob, {&a});
  write_blob(path, blob);
  Parameter back("layer.a", 3, 4);
  const Blob loaded = read_blob(path);
  load_params(loaded, {&back});
  EXPECT_EQ(back.value, a.value);
  EXPECT_EQ(loaded.meta["kind"], "test");

  Parameter wrong("layer.a", 2, 4);
  EXPECT_THROW(load_params(loaded, {&wrong}), DimensionError);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  EXPECT_THROW(read_blob(path), DataError);
  std::filesystem::remove_all(dir);
}
