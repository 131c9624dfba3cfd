#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tvl/rng.hpp"
#include "tvl/tensor.hpp"

namespace tvl::test {

template <typename T = double>
Tensor<T> randn(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(sd * standard_normal(rng));
  return t;
}

inline double max_rel_diff(std::span<const double> a, std::span<const double> b) {
  double scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return scale > 0 ? diff / scale : diff;
}

}  // namespace tvl::test
