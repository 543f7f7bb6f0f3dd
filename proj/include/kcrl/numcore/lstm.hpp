#pragma once

#include "kcrl/numcore/ops.hpp"

namespace kcrl::nc {

/// Four-gate recurrent cell parameters; gate blocks are laid out [input | forget | candidate | output].
struct LstmParams {
  Parameter w_input;   // [input_dim, 4*hidden]
  Parameter w_hidden;  // [hidden, 4*hidden]
  Parameter bias;      // [1, 4*hidden]

  LstmParams() = default;
  LstmParams(const std::string& prefix, Index input_dim, Index hidden_dim)
      : w_input(prefix + ".w_input", input_dim, 4 * hidden_dim),
        w_hidden(prefix + ".w_hidden", hidden_dim, 4 * hidden_dim),
        bias(prefix + ".bias", 1, 4 * hidden_dim) {}

  Index input_dim() const { return w_input.value.rows(); }
  Index hidden_dim() const { return w_hidden.value.rows(); }
};

struct LstmVars {
  Var w_input, w_hidden, bias;
};

LstmVars bind(Tape& tape, LstmParams& p);

struct CellState {
  Var hidden;
  Var cell;
};

/// One recurrent step on the tape. Shapes: hidden/cell [B,H], input [B,I].
CellState gated_recurrent_cell(Var prev_hidden, Var prev_cell, Var input, const LstmVars& params);

}  // namespace kcrl::nc
