#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tvl/tape.hpp"

namespace tvl {

/// Builds a scalar on `tape` from leaf handles of the checked parameters.
using GradCheckFn = std::function<Var(Tape<double>& tape, std::span<const Var> params)>;

struct GradCheckOptions {
  double h = 1e-5;
  /// Coordinates to check across all parameters; 0 checks every coordinate.
  std::size_t sample = 0;
  /// When non-zero, at most this many random coordinates of each parameter
  /// tensor (every coordinate of smaller ones). Overrides `sample`.
  std::size_t per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// "param[i]" of the worst coordinate.
  std::string worst;
};

/// Compares reverse-mode gradients of `f` against central differences
/// (f(x+h) - f(x-h)) / 2h. Relative error is |a - n| / max(|a|, |n|, 1e-8).
/// Throws ValidationError if `f` does not produce a scalar.
GradCheckReport grad_check(const GradCheckFn& f, std::vector<Tensor<double>>& params,
                           const GradCheckOptions& opts = {});

}  // namespace tvl
