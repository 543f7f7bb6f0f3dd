#pragma once

#include "kcrl/numcore/tape.hpp"

namespace kcrl::nc::rowwise {

// Tape-free inference kernels. Every row goes through the same fixed-size
// product on a freshly allocated buffer, so a row's result never depends on
// how many other rows are in the batch.

Matrix matmul(const Matrix& x, const Matrix& w);
Matrix affine(const Matrix& x, const Matrix& w, const Matrix& bias);
Matrix sigmoid(const Matrix& x);

struct LstmOut {
  Matrix hidden;
  Matrix cell;
};

LstmOut lstm_step(const Matrix& hidden, const Matrix& cell, const Matrix& input,
                  const Matrix& w_input, const Matrix& w_hidden, const Matrix& bias);

}  // namespace kcrl::nc::rowwise
