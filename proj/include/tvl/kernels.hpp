#pragma once

// Numeric kernels in two flavours with identical per-element arithmetic:
//
//   ref::  straightforward serial loops, kept as the oracle for tests
//   par::  OpenMP-parallel loops used by the autodiff ops
//
// Every reduction accumulates in ascending index order starting from zero,
// so ref:: and par:: agree bitwise at a fixed precision (the build disables
// FMA contraction). `accumulate` adds the finished sum to the existing output
// instead of overwriting it.

#include <cstddef>
#include <span>

namespace tvl::kernels {

/// Layout of a batched multi-head attention problem. Q, K, V and the output
/// are [batch*seq x heads*head_dim] row-major; probabilities are
/// [batch x heads x seq x seq].
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 1;

  std::size_t width() const { return heads * head_dim; }
  std::size_t rows() const { return batch * seq; }
  std::size_t prob_size() const { return batch * heads * seq * seq; }
};

#define TVL_KERNEL_DECLS                                                        \
  /* C[m x n] = A[m x k] * B[k x n] */                                          \
  template <typename T>                                                         \
  void gemm_nn(std::size_t m, std::size_t n, std::size_t k,                     \
               std::span<const T> a, std::span<const T> b, std::span<T> c,      \
               bool accumulate = false);                                        \
  /* C[m x n] = A[m x k] * B[n x k]^T */                                        \
  template <typename T>                                                         \
  void gemm_nt(std::size_t m, std::size_t n, std::size_t k,                     \
               std::span<const T> a, std::span<const T> b, std::span<T> c,      \
               bool accumulate = false);                                        \
  /* C[m x n] = A[k x m]^T * B[k x n] */                                        \
  template <typename T>                                                         \
  void gemm_tn(std::size_t m, std::size_t n, std::size_t k,                     \
               std::span<const T> a, std::span<const T> b, std::span<T> c,      \
               bool accumulate = false);                                        \
  /* Max-subtracted softmax over contiguous rows of length cols. */             \
  template <typename T>                                                         \
  void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> x,   \
                    std::span<T> y);                                            \
  /* Per-row normalisation; writes xhat and 1/sqrt(var+eps) for backward. */    \
  template <typename T>                                                         \
  void layer_norm_rows(std::size_t rows, std::size_t cols, std::span<const T> x, \
                       std::span<const T> gamma, std::span<const T> beta,       \
                       T eps, std::span<T> y, std::span<T> xhat,                \
                       std::span<T> inv_std);                                   \
  template <typename T>                                                         \
  void attention_forward(const AttentionShape& s, std::span<const T> q,         \
                         std::span<const T> k, std::span<const T> v,            \
                         std::span<T> probs, std::span<T> out);                 \
  /* Gradients are accumulated into dq/dk/dv when non-empty. */                 \
  template <typename T>                                                         \
  void attention_backward(const AttentionShape& s, std::span<const T> q,        \
                          std::span<const T> k, std::span<const T> v,           \
                          std::span<const T> probs, std::span<const T> dout,    \
                          std::span<T> dq, std::span<T> dk, std::span<T> dv);

namespace ref {
TVL_KERNEL_DECLS
}  // namespace ref

namespace par {
TVL_KERNEL_DECLS

/// Thread count used by par:: kernels (1 when OpenMP is unavailable).
int max_threads();
void set_max_threads(int n);
}  // namespace par

#undef TVL_KERNEL_DECLS

}  // namespace tvl::kernels
