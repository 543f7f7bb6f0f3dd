#include "kcrl/numcore/lstm.hpp"

#include "kcrl/error.hpp"

namespace kcrl::nc {

LstmVars bind(Tape& tape, LstmParams& p) {
  return {tape.parameter(p.w_input), tape.parameter(p.w_hidden), tape.parameter(p.bias)};
}

CellState gated_recurrent_cell(Var prev_hidden, Var prev_cell, Var input, const LstmVars& params) {
  const Index H = params.w_hidden.rows();
  if (params.w_hidden.cols() != 4 * H || params.w_input.cols() != 4 * H ||
      params.bias.cols() != 4 * H) {
    throw DimensionError("gated_recurrent_cell: gate blocks " + shape_str(params.w_input.value()) +
                         " / " + shape_str(params.w_hidden.value()));
  }
  if (prev_hidden.cols() != H || prev_cell.cols() != H || prev_hidden.rows() != input.rows() ||
      prev_cell.rows() != input.rows()) {
    throw DimensionError("gated_recurrent_cell: state " + shape_str(prev_hidden.value()) +
                         " / cell " + shape_str(prev_cell.value()) + " vs input " +
                         shape_str(input.value()) + ", hidden width " + std::to_string(H));
  }
  Var pre = add(affine(input, params.w_input, params.bias), matmul(prev_hidden, params.w_hidden));
  Var in_gate = sigmoid(slice_cols(pre, 0, H));
  Var forget_gate = sigmoid(slice_cols(pre, H, H));
  Var candidate = tanh(slice_cols(pre, 2 * H, H));
  Var out_gate = sigmoid(slice_cols(pre, 3 * H, H));
  Var cell = add(mul(forget_gate, prev_cell), mul(in_gate, candidate));
  Var hidden = mul(out_gate, tanh(cell));
  return {hidden, cell};
}

}  // namespace kcrl::nc
