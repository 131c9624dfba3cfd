#include "tvl/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace tvl::kernels {

namespace {

// Shared per-row / per-(sample, head) bodies. ref:: and par:: differ only in
// how they distribute these over rows, except for the gemm family where the
// reference keeps the textbook dot-product loop.

template <typename T>
void softmax_row(std::size_t cols, const T* x, T* y) {
  T mx = x[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  // Floored at the smallest normal value so that underflow never yields an
  // exact zero probability.
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < cols; ++j)
    y[j] = std::max(y[j] * inv, std::numeric_limits<T>::min());
}

template <typename T>
void layer_norm_row(std::size_t cols, const T* x, const T* gamma, const T* beta,
                    T eps, T* y, T* xhat, T* inv_std) {
  T mean = 0;
  for (std::size_t j = 0; j < cols; ++j) mean += x[j];
  mean /= static_cast<T>(cols);
  T var = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    const T d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<T>(cols);
  const T inv = T(1) / std::sqrt(var + eps);
  *inv_std = inv;
  for (std::size_t j = 0; j < cols; ++j) {
    xhat[j] = (x[j] - mean) * inv;
    y[j] = xhat[j] * gamma[j] + beta[j];
  }
}

template <typename T>
void attention_forward_pair(const AttentionShape& s, std::size_t b, std::size_t h,
                            const T* q, const T* k, const T* v, T* probs, T* out) {
  const std::size_t n = s.seq, d = s.head_dim, w = s.width();
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  const std::size_t col = h * d;
  T* p = probs + (b * s.heads + h) * n * n;
  for (std::size_t i = 0; i < n; ++i) {
    const T* qi = q + (b * n + i) * w + col;
    T* pi = p + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* kj = k + (b * n + j) * w + col;
      T acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += qi[c] * kj[c];
      pi[j] = acc * scale;
    }
    softmax_row(n, pi, pi);
    T* oi = out + (b * n + i) * w + col;
    std::fill(oi, oi + d, T(0));
    for (std::size_t j = 0; j < n; ++j) {
      const T pij = pi[j];
      const T* vj = v + (b * n + j) * w + col;
      for (std::size_t c = 0; c < d; ++c) oi[c] += pij * vj[c];
    }
  }
}

template <typename T>
void attention_backward_pair(const AttentionShape& s, std::size_t b, std::size_t h,
                             const T* q, const T* k, const T* v, const T* probs,
                             const T* dout, T* dq, T* dk, T* dv) {
  const std::size_t n = s.seq, d = s.head_dim, w = s.width();
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  const std::size_t col = h * d;
  const T* p = probs + (b * s.heads + h) * n * n;

  std::vector<T> ds(n), tmp(d), dk_local(n * d, T(0)), dv_local(n * d, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const T* pi = p + i * n;
    const T* doi = dout + (b * n + i) * w + col;
    const T* qi = q + (b * n + i) * w + col;
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T* vj = v + (b * n + j) * w + col;
      T acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += doi[c] * vj[c];
      ds[j] = acc;
      dot += acc * pi[j];
    }
    for (std::size_t j = 0; j < n; ++j) ds[j] = pi[j] * (ds[j] - dot);

    if (dq) {
      std::fill(tmp.begin(), tmp.end(), T(0));
      for (std::size_t j = 0; j < n; ++j) {
        const T* kj = k + (b * n + j) * w + col;
        for (std::size_t c = 0; c < d; ++c) tmp[c] += ds[j] * kj[c];
      }
      T* dqi = dq + (b * n + i) * w + col;
      for (std::size_t c = 0; c < d; ++c) dqi[c] += tmp[c] * scale;
    }
    for (std::size_t j = 0; j < n; ++j) {
      T* dkj = dk_local.data() + j * d;
      T* dvj = dv_local.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) {
        dkj[c] += ds[j] * qi[c];
        dvj[c] += pi[j] * doi[c];
      }
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (dk) {
      T* dkj = dk + (b * n + j) * w + col;
      for (std::size_t c = 0; c < d; ++c) dkj[c] += dk_local[j * d + c] * scale;
    }
    if (dv) {
      T* dvj = dv + (b * n + j) * w + col;
      for (std::size_t c = 0; c < d; ++c) dvj[c] += dv_local[j * d + c];
    }
  }
}

template <typename T>
T* or_null(std::span<T> s) {
  return s.empty() ? nullptr : s.data();
}

}  // namespace

// ---------------------------------------------------------------------------
// Serial reference

namespace ref {

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
             std::span<const T> b, std::span<T> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
             std::span<const T> b, std::span<T> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
             std::span<const T> b, std::span<T> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> x,
                  std::span<T> y) {
  for (std::size_t r = 0; r < rows; ++r)
    softmax_row(cols, x.data() + r * cols, y.data() + r * cols);
}

template <typename T>
void layer_norm_rows(std::size_t rows, std::size_t cols, std::span<const T> x,
                     std::span<const T> gamma, std::span<const T> beta, T eps,
                     std::span<T> y, std::span<T> xhat, std::span<T> inv_std) {
  for (std::size_t r = 0; r < rows; ++r)
    layer_norm_row(cols, x.data() + r * cols, gamma.data(), beta.data(), eps,
                   y.data() + r * cols, xhat.data() + r * cols, inv_std.data() + r);
}

template <typename T>
void attention_forward(const AttentionShape& s, std::span<const T> q,
                       std::span<const T> k, std::span<const T> v,
                       std::span<T> probs, std::span<T> out) {
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      attention_forward_pair(s, b, h, q.data(), k.data(), v.data(), probs.data(),
                             out.data());
}

template <typename T>
void attention_backward(const AttentionShape& s, std::span<const T> q,
                        std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout,
                        std::span<T> dq, std::span<T> dk, std::span<T> dv) {
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      attention_backward_pair(s, b, h, q.data(), k.data(), v.data(), probs.data(),
                              dout.data(), or_null(dq), or_null(dk), or_null(dv));
}

}  // namespace ref

// ---------------------------------------------------------------------------
// OpenMP

namespace par {

namespace {

// Row-panel body: out_row = sum_p arow[p] * B[p, :], ascending p.
template <typename T>
inline void axpy_rows(std::size_t n, std::size_t k, const T* arow,
                      std::size_t astride, const T* b, T* tmp) {
  std::fill(tmp, tmp + n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T av = arow[p * astride];
    const T* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) tmp[j] += av * brow[j];
  }
}

template <typename T>
inline void store_row(std::size_t n, const T* tmp, T* crow, bool accumulate) {
  if (accumulate)
    for (std::size_t j = 0; j < n; ++j) crow[j] += tmp[j];
  else
    std::copy(tmp, tmp + n, crow);
}

// Avoid spinning up a team for tiny problems.
inline bool worth_parallel(std::size_t work) { return work >= 32768; }

}  // namespace

int max_threads() { return omp_get_max_threads(); }
void set_max_threads(int n) { omp_set_num_threads(std::max(1, n)); }

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
             std::span<const T> b, std::span<T> c, bool accumulate) {
  const T* A = a.data();
  const T* B = b.data();
  T* C = c.data();
#pragma omp parallel if (worth_parallel(m * n * k))
  {
    std::vector<T> tmp(n);
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
      axpy_rows(n, k, A + i * k, 1, B, tmp.data());
      store_row(n, tmp.data(), C + i * n, accumulate);
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
             std::span<const T> b, std::span<T> c, bool accumulate) {
  // Transposing B keeps the inner loop contiguous without reordering sums.
  std::vector<T> bt(k * n);
  const T* B = b.data();
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
  gemm_nn<T>(m, n, k, a, bt, c, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
             std::span<const T> b, std::span<T> c, bool accumulate) {
  const T* A = a.data();
  const T* B = b.data();
  T* C = c.data();
#pragma omp parallel if (worth_parallel(m * n * k))
  {
    std::vector<T> tmp(n);
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
      axpy_rows(n, k, A + i, m, B, tmp.data());
      store_row(n, tmp.data(), C + i * n, accumulate);
    }
  }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const T> x,
                  std::span<T> y) {
  const T* X = x.data();
  T* Y = y.data();
#pragma omp parallel for schedule(static) if (worth_parallel(rows * cols * 8))
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r)
    softmax_row(cols, X + r * cols, Y + r * cols);
}

template <typename T>
void layer_norm_rows(std::size_t rows, std::size_t cols, std::span<const T> x,
                     std::span<const T> gamma, std::span<const T> beta, T eps,
                     std::span<T> y, std::span<T> xhat, std::span<T> inv_std) {
  const T* X = x.data();
#pragma omp parallel for schedule(static) if (worth_parallel(rows * cols * 8))
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r)
    layer_norm_row(cols, X + r * cols, gamma.data(), beta.data(), eps,
                   y.data() + r * cols, xhat.data() + r * cols, inv_std.data() + r);
}

template <typename T>
void attention_forward(const AttentionShape& s, std::span<const T> q,
                       std::span<const T> k, std::span<const T> v,
                       std::span<T> probs, std::span<T> out) {
  const std::ptrdiff_t pairs = static_cast<std::ptrdiff_t>(s.batch * s.heads);
#pragma omp parallel for schedule(static) \
    if (worth_parallel(s.prob_size() * s.head_dim))
  for (std::ptrdiff_t bh = 0; bh < pairs; ++bh)
    attention_forward_pair(s, bh / s.heads, bh % s.heads, q.data(), k.data(),
                           v.data(), probs.data(), out.data());
}

template <typename T>
void attention_backward(const AttentionShape& s, std::span<const T> q,
                        std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout,
                        std::span<T> dq, std::span<T> dk, std::span<T> dv) {
  const std::ptrdiff_t pairs = static_cast<std::ptrdiff_t>(s.batch * s.heads);
#pragma omp parallel for schedule(static) \
    if (worth_parallel(s.prob_size() * s.head_dim))
  for (std::ptrdiff_t bh = 0; bh < pairs; ++bh)
    attention_backward_pair(s, bh / s.heads, bh % s.heads, q.data(), k.data(),
                            v.data(), probs.data(), dout.data(), or_null(dq),
                            or_null(dk), or_null(dv));
}

}  // namespace par

#define TVL_INSTANTIATE(NS, T)                                                  \
  template void NS::gemm_nn<T>(std::size_t, std::size_t, std::size_t,          \
                               std::span<const T>, std::span<const T>,          \
                               std::span<T>, bool);                             \
  template void NS::gemm_nt<T>(std::size_t, std::size_t, std::size_t,          \
                               std::span<const T>, std::span<const T>,          \
                               std::span<T>, bool);                             \
  template void NS::gemm_tn<T>(std::size_t, std::size_t, std::size_t,          \
                               std::span<const T>, std::span<const T>,          \
                               std::span<T>, bool);                             \
  template void NS::softmax_rows<T>(std::size_t, std::size_t,                  \
                                    std::span<const T>, std::span<T>);          \
  template void NS::layer_norm_rows<T>(                                        \
      std::size_t, std::size_t, std::span<const T>, std::span<const T>,         \
      std::span<const T>, T, std::span<T>, std::span<T>, std::span<T>);         \
  template void NS::attention_forward<T>(                                      \
      const AttentionShape&, std::span<const T>, std::span<const T>,           \
      std::span<const T>, std::span<T>, std::span<T>);                          \
  template void NS::attention_backward<T>(                                     \
      const AttentionShape&, std::span<const T>, std::span<const T>,           \
      std::span<const T>, std::span<const T>, std::span<const T>, std::span<T>, \
      std::span<T>, std::span<T>);

TVL_INSTANTIATE(ref, float)
TVL_INSTANTIATE(ref, double)
TVL_INSTANTIATE(par, float)
TVL_INSTANTIATE(par, double)

#undef TVL_INSTANTIATE

}  // namespace tvl::kernels
