#include "tvl/ops.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace tvl::ops {

namespace kp = kernels::par;

namespace {

template <typename T>
void require_matrix(const Tensor<T>& x, const char* op) {
  if (x.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(x.shape()));
}

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> /
                std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& A = t.value(a);
  const Tensor<T>& B = t.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw DimensionError("matmul: " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()));
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> out({m, n});
  kp::gemm_nn<T>(m, n, k, A.data(), B.data(), out.data());
  return t.record("matmul", std::move(out), {a, b},
                  [a, b, m, n, k](Tape<T>& tp, Var self) {
                    auto g = tp.grad(self);
                    if (auto ga = tp.grad_buffer(a); !ga.empty())
                      kp::gemm_nt<T>(m, k, n, g, tp.value(b).data(), ga, true);
                    if (auto gb = tp.grad_buffer(b); !gb.empty())
                      kp::gemm_tn<T>(k, n, m, tp.value(a).data(), g, gb, true);
                  });
}

template <typename T>
Var linear(Tape<T>& t, Var x, Var w, std::optional<Var> bias) {
  const Tensor<T>& X = t.value(x);
  const Tensor<T>& W = t.value(w);
  if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(1))
    throw DimensionError("linear: input " + shape_str(X.shape()) + " weight " +
                         shape_str(W.shape()));
  const std::size_t m = X.dim(0), in = X.dim(1), out_dim = W.dim(0);
  Tensor<T> out({m, out_dim});
  kp::gemm_nt<T>(m, out_dim, in, X.data(), W.data(), out.data());
  if (bias) {
    const Tensor<T>& B = t.value(*bias);
    if (B.size() != out_dim)
      throw DimensionError("linear: bias " + shape_str(B.shape()) + " for weight " +
                           shape_str(W.shape()));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += B[j];
  }
  auto fn = [x, w, bias, m, in, out_dim](Tape<T>& tp, Var self) {
    auto g = tp.grad(self);
    if (auto gx = tp.grad_buffer(x); !gx.empty())
      kp::gemm_nn<T>(m, in, out_dim, g, tp.value(w).data(), gx, true);
    if (auto gw = tp.grad_buffer(w); !gw.empty())
      kp::gemm_tn<T>(out_dim, in, m, g, tp.value(x).data(), gw, true);
    if (bias) {
      if (auto gb = tp.grad_buffer(*bias); !gb.empty())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
    }
  };
  if (bias) return t.record("linear", std::move(out), {x, w, *bias}, fn);
  return t.record("linear", std::move(out), {x, w}, fn);
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& A = t.value(a);
  const Tensor<T>& B = t.value(b);
  if (A.shape() != B.shape())
    throw DimensionError("add: " + shape_str(A.shape()) + " + " +
                         shape_str(B.shape()));
  Tensor<T> out = A;
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return t.record("add", std::move(out), {a, b}, [a, b](Tape<T>& tp, Var self) {
    auto g = tp.grad(self);
    if (auto ga = tp.grad_buffer(a); !ga.empty()) add_into<T>(ga, g);
    if (auto gb = tp.grad_buffer(b); !gb.empty()) add_into<T>(gb, g);
  });
}

template <typename T>
Var add_tiled(Tape<T>& t, Var x, Var tile) {
  const Tensor<T>& X = t.value(x);
  const Tensor<T>& P = t.value(tile);
  require_matrix(X, "add_tiled");
  require_matrix(P, "add_tiled");
  if (X.dim(1) != P.dim(1) || X.dim(0) % P.dim(0) != 0)
    throw DimensionError("add_tiled: " + shape_str(X.shape()) + " with tile " +
                         shape_str(P.shape()));
  const std::size_t rows = X.dim(0), r = P.dim(0), c = X.dim(1);
  Tensor<T> out({rows, c});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = X[i * c + j] + P[(i % r) * c + j];
  return t.record("add_tiled", std::move(out), {x, tile},
                  [x, tile, rows, r, c](Tape<T>& tp, Var self) {
                    auto g = tp.grad(self);
                    if (auto gx = tp.grad_buffer(x); !gx.empty()) add_into<T>(gx, g);
                    if (auto gp = tp.grad_buffer(tile); !gp.empty())
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                          gp[(i % r) * c + j] += g[i * c + j];
                  });
}

template <typename T>
Var scale(Tape<T>& t, Var x, T factor) {
  Tensor<T> out(t.value(x).shape());
  const auto src = t.value(x).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] * factor;
  return t.record("scale", std::move(out), {x}, [x, factor](Tape<T>& tp, Var self) {
    auto g = tp.grad(self);
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[i];
  });
}

template <typename T>
Var sum(Tape<T>& t, Var x) {
  T acc = 0;
  for (T v : t.value(x).data()) acc += v;
  return t.record("sum", Tensor<T>::scalar(acc), {x}, [x](Tape<T>& tp, Var self) {
    const T g = tp.grad(self)[0];
    for (T& v : tp.grad_buffer(x)) v += g;
  });
}

template <typename T>
Var softmax(Tape<T>& t, Var x, std::size_t axis) {
  const Tensor<T>& X = t.value(x);
  if (axis >= X.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(X.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= X.dim(i);
  for (std::size_t i = axis + 1; i < X.rank(); ++i) inner *= X.dim(i);
  const std::size_t len = X.dim(axis);

  Tensor<T> out(X.shape());
  if (inner == 1) {
    kp::softmax_rows<T>(outer, len, X.data(), out.data());
  } else {
    std::vector<T> row(len), res(len);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        for (std::size_t j = 0; j < len; ++j) row[j] = X[(o * len + j) * inner + in];
        kernels::ref::softmax_rows<T>(1, len, row, res);
        for (std::size_t j = 0; j < len; ++j) out[(o * len + j) * inner + in] = res[j];
      }
  }
  return t.record("softmax", std::move(out), {x},
                  [x, outer, inner, len](Tape<T>& tp, Var self) {
                    auto g = tp.grad(self);
                    auto y = tp.value(self).data();
                    auto gx = tp.grad_buffer(x);
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t in = 0; in < inner; ++in) {
                        T dot = 0;
                        for (std::size_t j = 0; j < len; ++j) {
                          const std::size_t idx = (o * len + j) * inner + in;
                          dot += g[idx] * y[idx];
                        }
                        for (std::size_t j = 0; j < len; ++j) {
                          const std::size_t idx = (o * len + j) * inner + in;
                          gx[idx] += y[idx] * (g[idx] - dot);
                        }
                      }
                  });
}

template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, T eps) {
  const Tensor<T>& X = t.value(x);
  const Tensor<T>& G = t.value(gamma);
  const Tensor<T>& B = t.value(beta);
  if (X.rank() == 0 || G.size() != X.shape().back() || B.size() != G.size())
    throw DimensionError("layer_norm: input " + shape_str(X.shape()) + " gamma " +
                         shape_str(G.shape()) + " beta " + shape_str(B.shape()));
  if (!(eps > T(0))) throw ValidationError("layer_norm: eps must be positive");
  const std::size_t cols = G.size(), rows = X.size() / cols;
  Tensor<T> out(X.shape());
  std::vector<T> xhat(X.size()), inv_std(rows);
  const std::size_t saved = xhat.size() + inv_std.size();
  kp::layer_norm_rows<T>(rows, cols, X.data(), G.data(), B.data(), eps, out.data(),
                         xhat, inv_std);
  return t.record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, rows, cols, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<T>& tp, Var self) {
        auto g = tp.grad(self);
        auto gam = tp.value(gamma).data();
        if (auto gx = tp.grad_buffer(x); !gx.empty()) {
          T* GX = gx.data();
          const T* GY = g.data();
#pragma omp parallel for schedule(static) if (rows * cols >= 32768)
          for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
            const T* gy = GY + r * cols;
            const T* xh = xhat.data() + r * cols;
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < cols; ++j) {
              const T d = gy[j] * gam[j];
              m1 += d;
              m2 += d * xh[j];
            }
            m1 /= static_cast<T>(cols);
            m2 /= static_cast<T>(cols);
            T* dx = GX + r * cols;
            for (std::size_t j = 0; j < cols; ++j)
              dx[j] += inv_std[r] * (gy[j] * gam[j] - m1 - xh[j] * m2);
          }
        }
        auto gg = tp.grad_buffer(gamma);
        auto gb = tp.grad_buffer(beta);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < cols; ++j) {
            if (!gg.empty()) gg[j] += g[r * cols + j] * xhat[r * cols + j];
            if (!gb.empty()) gb[j] += g[r * cols + j];
          }
      },
      saved);
}

template <typename T>
Var activation(Tape<T>& t, Var x, Activation kind) {
  const Tensor<T>& X = t.value(x);
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i)
    out[i] = kind == Activation::relu ? std::max(X[i], T(0)) : gelu_value(X[i]);
  return t.record(kind == Activation::relu ? "relu" : "gelu", std::move(out), {x},
                  [x, kind](Tape<T>& tp, Var self) {
                    auto g = tp.grad(self);
                    auto in = tp.value(x).data();
                    auto gx = tp.grad_buffer(x);
                    for (std::size_t i = 0; i < gx.size(); ++i) {
                      const T d = kind == Activation::relu
                                      ? (in[i] > T(0) ? T(1) : T(0))
                                      : gelu_derivative(in[i]);
                      gx[i] += g[i] * d;
                    }
                  });
}

template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, const Tensor<T>& targets) {
  const Tensor<T>& X = t.value(logits);
  require_matrix(X, "cross_entropy");
  if (targets.shape() != X.shape())
    throw DimensionError("cross_entropy: logits " + shape_str(X.shape()) +
                         " targets " + shape_str(targets.shape()));
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  std::vector<T> row_mass(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const T v = targets[r * cols + j];
      if (v < T(0))
        throw ValidationError("cross_entropy: negative target in row " +
                              std::to_string(r));
      s += v;
    }
    if (std::abs(static_cast<double>(s) - 1.0) > 1e-5)
      throw ValidationError("cross_entropy: target row " + std::to_string(r) +
                            " sums to " + std::to_string(static_cast<double>(s)));
    row_mass[r] = s;
  }

  std::vector<T> probs(X.size());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = X.data().data() + r * cols;
    T mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T z = 0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
    const T lse = mx + std::log(z);
    T loss = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      probs[r * cols + j] = std::exp(x[j] - lse);
      loss -= targets[r * cols + j] * (x[j] - lse);
    }
    total += loss;
  }
  total /= static_cast<T>(rows);
  const std::size_t saved = probs.size();

  return t.record("cross_entropy", Tensor<T>::scalar(total), {logits},
                  [logits, targets, rows, cols, probs = std::move(probs),
                   row_mass = std::move(row_mass)](Tape<T>& tp, Var self) {
                    const T g = tp.grad(self)[0] / static_cast<T>(rows);
                    auto gx = tp.grad_buffer(logits);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < cols; ++j) {
                        const std::size_t i = r * cols + j;
                        gx[i] += g * (row_mass[r] * probs[i] - targets[i]);
                      }
                  },
                  saved);
}

template <typename T>
Var multi_head_attention(Tape<T>& t, Var q, Var k, Var v,
                         const kernels::AttentionShape& s) {
  const Tensor<T>& Q = t.value(q);
  const Tensor<T>& K = t.value(k);
  const Tensor<T>& V = t.value(v);
  const Shape expect{s.rows(), s.width()};
  if (Q.shape() != expect || K.shape() != expect || V.shape() != expect)
    throw DimensionError("multi_head_attention: q " + shape_str(Q.shape()) + " k " +
                         shape_str(K.shape()) + " v " + shape_str(V.shape()) +
                         " expected " + shape_str(expect));
  std::vector<T> probs(s.prob_size());
  Tensor<T> out(expect);
  kp::attention_forward<T>(s, Q.data(), K.data(), V.data(), probs, out.data());
  const std::size_t saved = probs.size();
  return t.record("attention", std::move(out), {q, k, v},
                  [q, k, v, s, probs = std::move(probs)](Tape<T>& tp, Var self) {
                    auto dq = tp.grad_buffer(q);
                    auto dk = tp.grad_buffer(k);
                    auto dv = tp.grad_buffer(v);
                    kp::attention_backward<T>(s, tp.value(q).data(), tp.value(k).data(),
                                              tp.value(v).data(), probs, tp.grad(self),
                                              dq, dk, dv);
                  },
                  saved);
}

template <typename T>
Var prepend_rows(Tape<T>& t, Var x, Var prefix, std::size_t groups) {
  const Tensor<T>& X = t.value(x);
  const Tensor<T>& P = t.value(prefix);
  require_matrix(X, "prepend_rows");
  require_matrix(P, "prepend_rows");
  if (groups == 0 || X.dim(0) % groups != 0 || X.dim(1) != P.dim(1))
    throw DimensionError("prepend_rows: " + shape_str(X.shape()) + " with prefix " +
                         shape_str(P.shape()) + " over " + std::to_string(groups) +
                         " groups");
  const std::size_t len = X.dim(0) / groups, n = P.dim(0), c = X.dim(1);
  const std::size_t seq = n + len;
  Tensor<T> out({groups * seq, c});
  for (std::size_t g = 0; g < groups; ++g) {
    std::copy_n(P.data().begin(), n * c, out.data().begin() + g * seq * c);
    std::copy_n(X.data().begin() + g * len * c, len * c,
                out.data().begin() + (g * seq + n) * c);
  }
  return t.record("prepend_rows", std::move(out), {x, prefix},
                  [x, prefix, groups, len, n, c, seq](Tape<T>& tp, Var self) {
                    auto gy = tp.grad(self);
                    auto gp = tp.grad_buffer(prefix);
                    auto gx = tp.grad_buffer(x);
                    for (std::size_t g = 0; g < groups; ++g) {
                      if (!gp.empty())
                        for (std::size_t i = 0; i < n * c; ++i) gp[i] += gy[g * seq * c + i];
                      if (!gx.empty())
                        for (std::size_t i = 0; i < len * c; ++i)
                          gx[g * len * c + i] += gy[(g * seq + n) * c + i];
                    }
                  });
}

template <typename T>
Var leading_rows(Tape<T>& t, Var x, std::size_t groups, std::size_t n) {
  const Tensor<T>& X = t.value(x);
  require_matrix(X, "leading_rows");
  if (groups == 0 || X.dim(0) % groups != 0 || n == 0 || n > X.dim(0) / groups)
    throw DimensionError("leading_rows: " + std::to_string(n) + " of " +
                         shape_str(X.shape()) + " over " + std::to_string(groups) +
                         " groups");
  const std::size_t seq = X.dim(0) / groups, c = X.dim(1);
  Tensor<T> out({groups, n * c});
  for (std::size_t g = 0; g < groups; ++g)
    std::copy_n(X.data().begin() + g * seq * c, n * c, out.data().begin() + g * n * c);
  return t.record("leading_rows", std::move(out), {x},
                  [x, groups, n, c, seq](Tape<T>& tp, Var self) {
                    auto gy = tp.grad(self);
                    auto gx = tp.grad_buffer(x);
                    for (std::size_t g = 0; g < groups; ++g)
                      for (std::size_t i = 0; i < n * c; ++i)
                        gx[g * seq * c + i] += gy[g * n * c + i];
                  });
}

template <typename T>
Var scale_groups(Tape<T>& t, Var x, std::span<const T> factors) {
  const Tensor<T>& X = t.value(x);
  require_matrix(X, "scale_groups");
  if (factors.empty() || X.dim(0) % factors.size() != 0)
    throw DimensionError("scale_groups: " + std::to_string(factors.size()) +
                         " factors for " + shape_str(X.shape()));
  const std::size_t group_size = X.size() / factors.size();
  std::vector<T> f(factors.begin(), factors.end());
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] * f[i / group_size];
  return t.record("scale_groups", std::move(out), {x},
                  [x, group_size, f = std::move(f)](Tape<T>& tp, Var self) {
                    auto g = tp.grad(self);
                    auto gx = tp.grad_buffer(x);
                    for (std::size_t i = 0; i < gx.size(); ++i)
                      gx[i] += g[i] * f[i / group_size];
                  });
}

#define TVL_OPS_INSTANTIATE(T)                                                  \
  template T gelu_value<T>(T);                                                  \
  template T gelu_derivative<T>(T);                                             \
  template Var matmul<T>(Tape<T>&, Var, Var);                                   \
  template Var linear<T>(Tape<T>&, Var, Var, std::optional<Var>);               \
  template Var add<T>(Tape<T>&, Var, Var);                                      \
  template Var add_tiled<T>(Tape<T>&, Var, Var);                                \
  template Var scale<T>(Tape<T>&, Var, T);                                      \
  template Var sum<T>(Tape<T>&, Var);                                           \
  template Var softmax<T>(Tape<T>&, Var, std::size_t);                          \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var, T);                       \
  template Var activation<T>(Tape<T>&, Var, Activation);                        \
  template Var cross_entropy<T>(Tape<T>&, Var, const Tensor<T>&);               \
  template Var multi_head_attention<T>(Tape<T>&, Var, Var, Var,                 \
                                       const kernels::AttentionShape&);         \
  template Var prepend_rows<T>(Tape<T>&, Var, Var, std::size_t);                \
  template Var leading_rows<T>(Tape<T>&, Var, std::size_t, std::size_t);        \
  template Var scale_groups<T>(Tape<T>&, Var, std::span<const T>);

TVL_OPS_INSTANTIATE(float)
TVL_OPS_INSTANTIATE(double)

}  // namespace tvl::ops
