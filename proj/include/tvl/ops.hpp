#pragma once

// Differentiable primitives recorded on a Tape. Matrices are rank-2,
// row-major; "rows" ops treat the last extent as the feature axis.

#include <optional>
#include <span>
#include <vector>

#include "tvl/kernels.hpp"
#include "tvl/tape.hpp"

namespace tvl::ops {

enum class Activation { relu, gelu };

/// a[m x k] * b[k x n]
template <typename T>
Var matmul(Tape<T>& t, Var a, Var b);

/// x[m x in] * w[out x in]^T (+ bias[out])
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, std::optional<Var> bias = std::nullopt);

template <typename T>
Var add(Tape<T>& t, Var a, Var b);

/// y[i, :] = x[i, :] + tile[i mod r, :] for x[R x C], tile[r x C], r | R.
template <typename T>
Var add_tiled(Tape<T>& t, Var x, Var tile);

template <typename T>
Var scale(Tape<T>& t, Var x, T factor);

/// Sum of all elements as a scalar.
template <typename T>
Var sum(Tape<T>& t, Var x);

template <typename T>
Var softmax(Tape<T>& t, Var x, std::size_t axis);

/// Biased-variance normalisation over the last axis, then gamma * . + beta.
template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, T eps);

template <typename T>
Var activation(Tape<T>& t, Var x, Activation kind);

/// Mean over rows of -sum_i target_i * log_softmax(logits)_i. Target rows
/// must be distributions (|sum - 1| <= 1e-5, entries >= 0).
template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, const Tensor<T>& targets);

/// softmax(Q_h K_h^T / sqrt(d)) V_h per (sample, head), heads concatenated
/// back into [batch*seq x heads*head_dim].
template <typename T>
Var multi_head_attention(Tape<T>& t, Var q, Var k, Var v,
                         const kernels::AttentionShape& shape);

/// Interleaves `prefix[n x C]` before each group of `rows_per_group` rows of
/// x, producing [groups*(n+rows_per_group) x C].
template <typename T>
Var prepend_rows(Tape<T>& t, Var x, Var prefix, std::size_t groups);

/// From x[groups*seq x C] keeps the first n rows of each group, flattened into
/// one row of width n*C per group.
template <typename T>
Var leading_rows(Tape<T>& t, Var x, std::size_t groups, std::size_t n);

/// Multiplies every row of group g (groups of equal size) by factors[g].
template <typename T>
Var scale_groups(Tape<T>& t, Var x, std::span<const T> factors);

// Scalar helpers shared with tests.
template <typename T>
T gelu_value(T x);
template <typename T>
T gelu_derivative(T x);

}  // namespace tvl::ops
