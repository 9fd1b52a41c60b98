#pragma once

// Differentiable dense operations recorded on a Tape.

#include <span>
#include <vector>

#include "ramnet/tape.hpp"

namespace ramnet::ops {

Var matmul(Tape& tape, Var a, Var b);
Var add(Tape& tape, Var a, Var b);

/// Row-wise RMS normalization with a learned 1 x d gain.
Var rms_norm(Tape& tape, Var x, Var gain, double eps = 1e-6);

/// tanh-approximated GELU.
Var gelu(Tape& tape, Var x);

/// Rows of `table` selected by token id.
Var embedding(Tape& tape, Var table, std::span<const int> tokens);

/// Rows of x at the given positions.
Var select_rows(Tape& tape, Var x, std::span<const std::size_t> rows);

/// w_eff[:, c] = exp(alpha[g]) * w[:, c] where g = c / group_cols. `alpha` is
/// 1 x groups. This is the per-head scalar re-parameterization.
Var scale_columns_exp(Tape& tape, Var w, Var alpha, std::size_t group_cols);

/// Mean softmax cross-entropy over rows. Throws ConfigError when a target is
/// outside [0, vocab).
Var cross_entropy(Tape& tape, Var logits, std::span<const int> targets);

/// Sum of all entries of x scaled by weights of the same shape; used by the
/// gradient checker to reduce an output to a scalar.
Var weighted_sum(Tape& tape, Var x, const Matrix& weights);

}  // namespace ramnet::ops
