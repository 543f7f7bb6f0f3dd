#pragma once

#include "kcrl/numcore/tape.hpp"

#include <span>
#include <vector>

namespace kcrl::nc {

enum class Activation { sigmoid, tanh, relu };

/// Clamp used wherever a probability goes through a log.
inline constexpr double kProbEps = 1e-7;

// Linear algebra. Shape errors throw DimensionError naming both shapes.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
/// a + row, the 1xN row broadcast over every row of a.
Var add_row(Var a, Var row);
/// a ⊙ col, the Rx1 column broadcast over every column of a.
Var mul_col(Var a, Var col);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var affine(Var x, Var weight, Var bias);

Var elementwise(Var x, Activation kind);
Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);
Var exp(Var x);
Var log(Var x);
Var square(Var x);
Var clamp(Var x, double lo, double hi);  // zero gradient outside [lo, hi]
Var minimum(Var a, Var b);

// Reductions and reshaping.
Var sum(Var x);
Var mean(Var x);
Var row_sum(Var x);  // [R,C] -> [R,1]
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var x, Index start, Index count);
Var reshape(Var x, Index rows, Index cols);  // row-major order preserved
Var select_rows(Var x, std::span<const Index> rows);
/// Row b*K + k of the result is a.row(b) + c.row(k); a is [B,H], c is [K,H].
Var outer_add(Var a, Var c);
/// Row r is the mean of table rows listed in groups[r].
Var gather_mean(Var table, const std::vector<std::vector<Index>>& groups);
Var normalize_rows(Var x);

// Losses.
/// Mean binary cross-entropy; predictions clamped to [kProbEps, 1 - kProbEps].
Var bce_loss(Var pred, const Matrix& target);
/// Same, with a per-entry weight; returns the weighted sum.
Var bce_loss_weighted(Var pred, const Matrix& target, const Matrix& weight);
Var mse_loss(Var pred, const Matrix& target);

/// Scalar binary cross-entropy with the standard clamp.
double bce(double pred, double target);

}  // namespace kcrl::nc
