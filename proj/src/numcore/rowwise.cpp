#include "kcrl/numcore/rowwise.hpp"

#include "kcrl/error.hpp"

#include <cmath>

namespace kcrl::nc::rowwise {

Matrix matmul(const Matrix& x, const Matrix& w) {
  if (x.cols() != w.rows()) {
    throw DimensionError("rowwise::matmul: " + shape_str(x) + " x " + shape_str(w));
  }
  Matrix out(x.rows(), w.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const RowVector in = x.row(r);
    const RowVector y = in * w;
    out.row(r) = y;
  }
  return out;
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != w.cols()) {
    throw DimensionError("rowwise::affine: W " + shape_str(w) + ", b " + shape_str(bias));
  }
  Matrix out = matmul(x, w);
  out.rowwise() += bias.row(0);
  return out;
}

Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
  });
}

LstmOut lstm_step(const Matrix& hidden, const Matrix& cell, const Matrix& input,
                  const Matrix& w_input, const Matrix& w_hidden, const Matrix& bias) {
  const Index H = w_hidden.rows();
  if (hidden.cols() != H || cell.cols() != H || input.cols() != w_input.rows() ||
      hidden.rows() != input.rows()) {
    throw DimensionError("rowwise::lstm_step: state " + shape_str(hidden) + ", input " +
                         shape_str(input) + ", W_in " + shape_str(w_input));
  }
  Matrix pre = affine(input, w_input, bias) + matmul(hidden, w_hidden);
  Matrix i = sigmoid(pre.middleCols(0, H));
  Matrix f = sigmoid(pre.middleCols(H, H));
  Matrix g = pre.middleCols(2 * H, H).array().tanh();
  Matrix o = sigmoid(pre.middleCols(3 * H, H));
  LstmOut out;
  out.cell = f.cwiseProduct(cell) + i.cwiseProduct(g);
  out.hidden = o.array() * out.cell.array().tanh();
  return out;
}

}  // namespace kcrl::nc::rowwise
