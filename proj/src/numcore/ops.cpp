#include "kcrl/numcore/ops.hpp"

#include "kcrl/error.hpp"

#include <algorithm>
#include <cmath>

namespace kcrl::nc {

namespace {

void accumulate(Tape& t, Var v, const Matrix& g) {
  if (t.requires_grad(v.id())) t.grad(v.id()) += g;
}

void require_same(const char* op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
  }
}

double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.value()) + " x " +
                         shape_str(b.value()));
  }
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(a.id())) t.grad(a.id()).noalias() += g * b.value().transpose();
    if (t.requires_grad(b.id())) t.grad(b.id()).noalias() += a.value().transpose() * g;
  });
}

Var add(Var a, Var b) {
  require_same("add", a, b);
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, std::size_t self) {
    accumulate(t, a, t.grad(self));
    accumulate(t, b, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a, b);
  Tape& t = *a.tape();
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, std::size_t self) {
    accumulate(t, a, t.grad(self));
    if (t.requires_grad(b.id())) t.grad(b.id()) -= t.grad(self);
  });
}

Var mul(Var a, Var b) {
  require_same("mul", a, b);
  Tape& t = *a.tape();
  Matrix out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(a.id())) t.grad(a.id()) += g.cwiseProduct(b.value());
    if (t.requires_grad(b.id())) t.grad(b.id()) += g.cwiseProduct(a.value());
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: " + shape_str(a.value()) + " + row " + shape_str(row.value()));
  }
  Tape& t = *a.tape();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    accumulate(t, a, g);
    if (t.requires_grad(row.id())) t.grad(row.id()) += g.colwise().sum();
  });
}

Var mul_col(Var a, Var col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw DimensionError("mul_col: " + shape_str(a.value()) + " * col " + shape_str(col.value()));
  }
  Tape& t = *a.tape();
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return t.record(std::move(out), {a, col}, [a, col](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(a.id())) {
      t.grad(a.id()).array() += g.array().colwise() * col.value().col(0).array();
    }
    if (t.requires_grad(col.id())) {
      t.grad(col.id()) += g.cwiseProduct(a.value()).rowwise().sum();
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape();
  return t.record(a.value() * s, {a}, [a, s](Tape& t, std::size_t self) {
    if (t.requires_grad(a.id())) t.grad(a.id()) += t.grad(self) * s;
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape();
  Matrix out = a.value().array() + s;
  return t.record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    accumulate(t, a, t.grad(self));
  });
}

Var affine(Var x, Var weight, Var bias) {
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw DimensionError("affine: x " + shape_str(x.value()) + ", W " + shape_str(weight.value()) +
                         ", b " + shape_str(bias.value()));
  }
  return add_row(matmul(x, weight), bias);
}

Var elementwise(Var x, Activation kind) {
  switch (kind) {
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
    case Activation::relu: return relu(x);
  }
  return x;
}

Var sigmoid(Var x) {
  Tape& t = *x.tape();
  Matrix out = x.value().unaryExpr([](double z) { return sigmoid_scalar(z); });
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const Matrix& s = t.value(self);
    t.grad(x.id()).array() += t.grad(self).array() * s.array() * (1.0 - s.array());
  });
}

Var tanh(Var x) {
  Tape& t = *x.tape();
  Matrix out = x.value().array().tanh();
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    t.grad(x.id()).array() += t.grad(self).array() * (1.0 - y.array().square());
  });
}

Var relu(Var x) {
  Tape& t = *x.tape();
  Matrix out = x.value().cwiseMax(0.0);
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    t.grad(x.id()).array() +=
        (x.value().array() > 0.0).select(t.grad(self).array(), 0.0);
  });
}

Var exp(Var x) {
  Tape& t = *x.tape();
  Matrix out = x.value().array().exp();
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    t.grad(x.id()).array() += t.grad(self).array() * t.value(self).array();
  });
}

Var log(Var x) {
  Tape& t = *x.tape();
  Matrix out = x.value().array().log();
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    t.grad(x.id()).array() += t.grad(self).array() / x.value().array();
  });
}

Var square(Var x) {
  Tape& t = *x.tape();
  Matrix out = x.value().array().square();
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    t.grad(x.id()).array() += 2.0 * t.grad(self).array() * x.value().array();
  });
}

Var clamp(Var x, double lo, double hi) {
  Tape& t = *x.tape();
  Matrix out = x.value().cwiseMax(lo).cwiseMin(hi);
  return t.record(std::move(out), {x}, [x, lo, hi](Tape& t, std::size_t self) {
    const auto& v = x.value().array();
    t.grad(x.id()).array() += ((v >= lo) && (v <= hi)).select(t.grad(self).array(), 0.0);
  });
}

Var minimum(Var a, Var b) {
  require_same("minimum", a, b);
  Tape& t = *a.tape();
  Matrix out = a.value().cwiseMin(b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto take_a = (a.value().array() <= b.value().array());
    const auto& g = t.grad(self).array();
    if (t.requires_grad(a.id())) t.grad(a.id()).array() += take_a.select(g, 0.0);
    if (t.requires_grad(b.id())) t.grad(b.id()).array() += take_a.select(0.0, g);
  });
}

Var sum(Var x) {
  Tape& t = *x.tape();
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    t.grad(x.id()).array() += t.grad(self)(0, 0);
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var row_sum(Var x) {
  Tape& t = *x.tape();
  Matrix out = x.value().rowwise().sum();
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    t.grad(x.id()).colwise() += t.grad(self).col(0);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Tape& t = *parts.front().tape();
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().value()) +
                           " vs " + shape_str(p.value()));
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.record(std::move(out), parts, [parts](Tape& t, std::size_t self) {
    Index at = 0;
    for (const Var& p : parts) {
      if (t.requires_grad(p.id())) t.grad(p.id()) += t.grad(self).middleCols(at, p.cols());
      at += p.cols();
    }
  });
}

Var slice_cols(Var x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") outside " + shape_str(x.value()));
  }
  Tape& t = *x.tape();
  Matrix out = x.value().middleCols(start, count);
  return t.record(std::move(out), {x}, [x, start, count](Tape& t, std::size_t self) {
    t.grad(x.id()).middleCols(start, count) += t.grad(self);
  });
}

Var reshape(Var x, Index rows, Index cols) {
  if (rows * cols != x.value().size()) {
    throw DimensionError("reshape: " + shape_str(x.value()) + " to [" + std::to_string(rows) + "x" +
                         std::to_string(cols) + "]");
  }
  Tape& t = *x.tape();
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  return t.record(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    Eigen::Map<Matrix>(t.grad(x.id()).data(), t.grad(self).rows(), t.grad(self).cols()) +=
        t.grad(self);
  });
}

Var select_rows(Var x, std::span<const Index> rows) {
  Tape& t = *x.tape();
  std::vector<Index> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Index>(idx.size()), x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= x.rows()) {
      throw DimensionError("select_rows: row " + std::to_string(idx[r]) + " outside " +
                           shape_str(x.value()));
    }
    out.row(static_cast<Index>(r)) = x.value().row(idx[r]);
  }
  return t.record(std::move(out), {x}, [x, idx = std::move(idx)](Tape& t, std::size_t self) {
    Matrix& gx = t.grad(x.id());
    const Matrix& g = t.grad(self);
    for (std::size_t r = 0; r < idx.size(); ++r) gx.row(idx[r]) += g.row(static_cast<Index>(r));
  });
}

Var outer_add(Var a, Var c) {
  if (a.cols() != c.cols()) {
    throw DimensionError("outer_add: " + shape_str(a.value()) + " vs " + shape_str(c.value()));
  }
  Tape& t = *a.tape();
  const Index B = a.rows();
  const Index K = c.rows();
  Matrix out(B * K, a.cols());
  for (Index b = 0; b < B; ++b) {
    out.middleRows(b * K, K) = c.value().rowwise() + a.value().row(b);
  }
  return t.record(std::move(out), {a, c}, [a, c, B, K](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const bool ga = t.requires_grad(a.id());
    const bool gc = t.requires_grad(c.id());
    for (Index b = 0; b < B; ++b) {
      if (ga) t.grad(a.id()).row(b) += g.middleRows(b * K, K).colwise().sum();
      if (gc) t.grad(c.id()) += g.middleRows(b * K, K);
    }
  });
}

Var gather_mean(Var table, const std::vector<std::vector<Index>>& groups) {
  Tape& t = *table.tape();
  Matrix out = Matrix::Zero(static_cast<Index>(groups.size()), table.cols());
  for (std::size_t r = 0; r < groups.size(); ++r) {
    const auto& g = groups[r];
    if (g.empty()) throw DimensionError("gather_mean: empty group at row " + std::to_string(r));
    for (Index i : g) {
      if (i < 0 || i >= table.rows()) {
        throw DimensionError("gather_mean: index " + std::to_string(i) + " outside " +
                             shape_str(table.value()));
      }
      out.row(static_cast<Index>(r)) += table.value().row(i);
    }
    out.row(static_cast<Index>(r)) /= static_cast<double>(g.size());
  }
  return t.record(std::move(out), {table}, [table, groups](Tape& t, std::size_t self) {
    Matrix& gt = t.grad(table.id());
    const Matrix& g = t.grad(self);
    for (std::size_t r = 0; r < groups.size(); ++r) {
      const double w = 1.0 / static_cast<double>(groups[r].size());
      for (Index i : groups[r]) gt.row(i) += w * g.row(static_cast<Index>(r));
    }
  });
}

Var normalize_rows(Var x) {
  Tape& t = *x.tape();
  Eigen::VectorXd norms = x.value().rowwise().norm();
  for (Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > 0.0)) throw DimensionError("normalize_rows: zero-norm row " + std::to_string(r));
  }
  Matrix out = x.value().array().colwise() / norms.array();
  return t.record(std::move(out), {x}, [x, norms](Tape& t, std::size_t self) {
    // d(x/|x|) = (g - y (y.g)) / |x|
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Eigen::VectorXd dots = y.cwiseProduct(g).rowwise().sum();
    Matrix gx = g - (y.array().colwise() * dots.array()).matrix();
    gx.array().colwise() /= norms.array();
    t.grad(x.id()) += gx;
  });
}

double bce(double pred, double target) {
  const double p = std::clamp(pred, kProbEps, 1.0 - kProbEps);
  return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

Var bce_loss_weighted(Var pred, const Matrix& target, const Matrix& weight) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols() ||
      weight.rows() != target.rows() || weight.cols() != target.cols()) {
    throw DimensionError("bce_loss: pred " + shape_str(pred.value()) + " vs target " +
                         shape_str(target) + " / weight " + shape_str(weight));
  }
  Tape& t = *pred.tape();
  const Matrix& p = pred.value();
  double total = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    total += weight.data()[i] * bce(p.data()[i], target.data()[i]);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return t.record(std::move(out), {pred}, [pred, target, weight](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    const Matrix& p = pred.value();
    Matrix& gp = t.grad(pred.id());
    for (Index i = 0; i < p.size(); ++i) {
      const double raw = p.data()[i];
      if (raw < kProbEps || raw > 1.0 - kProbEps) continue;  // clamped: flat
      const double y = target.data()[i];
      gp.data()[i] += g * weight.data()[i] * (-(y / raw) + (1.0 - y) / (1.0 - raw));
    }
  });
}

Var bce_loss(Var pred, const Matrix& target) {
  const double n = static_cast<double>(target.size());
  return bce_loss_weighted(pred, target, Matrix::Constant(target.rows(), target.cols(), 1.0 / n));
}

Var mse_loss(Var pred, const Matrix& target) {
  Tape& t = *pred.tape();
  Var diff = sub(pred, t.constant(target));
  return mean(square(diff));
}

}  // namespace kcrl::nc
