#pragma once
// Independent scalar implementations used as test oracles. Nothing here calls
// into the kernels or the tape.

#include <cmath>
#include <string>
#include <vector>

#include "tvl/model.hpp"

namespace tvl::test {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor<double>& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

// x * w^T, with w stored [out x in].
inline Mat times_wt(const Mat& x, const Mat& w) {
  Mat y(x.size(), std::vector<double>(w.size(), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < w.size(); ++o) {
      double s = 0;
      for (std::size_t k = 0; k < w[o].size(); ++k) s += x[i][k] * w[o][k];
      y[i][o] = s;
    }
  return y;
}

inline Mat project_oracle(const ParamMap<double>& p, const std::string& prefix, const Mat& x) {
  if (p.count(prefix + ".weight")) return times_wt(x, to_mat(p.at(prefix + ".weight")));
  return times_wt(times_wt(x, to_mat(p.at(prefix + ".down"))), to_mat(p.at(prefix + ".up")));
}

/// Multi-head self-attention over one sequence x [L x C], explicit Q/K/V and
/// a scalar softmax per score row.
inline Mat naive_attention(const ParamMap<double>& p, const std::string& prefix, const Mat& x,
                           std::size_t heads) {
  const Mat q = project_oracle(p, prefix + ".q", x);
  const Mat k = project_oracle(p, prefix + ".k", x);
  const Mat v = project_oracle(p, prefix + ".v", x);
  const std::size_t L = x.size(), C = q[0].size(), dk = C / heads;
  Mat cat(L, std::vector<double>(C, 0.0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> s(L);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < L; ++j) {
        double d = 0;
        for (std::size_t c = 0; c < dk; ++c) d += q[i][h * dk + c] * k[j][h * dk + c];
        s[j] = d / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t c = 0; c < dk; ++c) cat[i][h * dk + c] += s[j] / z * v[j][h * dk + c];
    }
  return times_wt(cat, to_mat(p.at(prefix + ".o.weight")));
}

inline double naive_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// fc2(gelu(fc1(x))) row by row.
inline Mat naive_ffn(const ParamMap<double>& p, const std::string& prefix, const Mat& x) {
  Mat h = times_wt(x, to_mat(p.at(prefix + ".fc1.weight")));
  const auto& b1 = p.at(prefix + ".fc1.bias");
  for (auto& row : h)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = naive_gelu(row[j] + b1[j]);
  Mat y = times_wt(h, to_mat(p.at(prefix + ".fc2.weight")));
  const auto& b2 = p.at(prefix + ".fc2.bias");
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b2[j];
  return y;
}

/// max |a - b| / max |b| over two equally shaped matrices.
inline double rel_error(const Mat& a, const Mat& b) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      diff = std::max(diff, std::abs(a[i][j] - b[i][j]));
      scale = std::max(scale, std::abs(b[i][j]));
    }
  return scale > 0 ? diff / scale : diff;
}

/// Scalar AdamW trajectory: returns theta after each step.
inline std::vector<double> adamw_oracle(double theta, const std::vector<double>& grads, double lr,
                                        double b1, double b2, double eps, double wd) {
  double m = 0, v = 0;
  std::vector<double> out;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, static_cast<double>(t)));
    const double vhat = v / (1 - std::pow(b2, static_cast<double>(t)));
    theta = theta - lr * mhat / (std::sqrt(vhat) + eps) - lr * wd * theta;
    out.push_back(theta);
  }
  return out;
}

/// Scalar Lion trajectory.
inline std::vector<double> lion_oracle(double theta, const std::vector<double>& grads, double lr,
                                       double b1, double b2, double wd) {
  double m = 0;
  std::vector<double> out;
  for (double g : grads) {
    const double c = b1 * m + (1 - b1) * g;
    const double u = c > 0 ? 1.0 : (c < 0 ? -1.0 : 0.0);
    theta = theta - lr * u - lr * wd * theta;
    m = b2 * m + (1 - b2) * g;
    out.push_back(theta);
  }
  return out;
}

}  // namespace tvl::test
