#pragma once

#include <cstdint>
#include <string>

#include "tvl/model.hpp"

namespace tvl {

enum class OptimizerKind { adamw, lion };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct OptimHyper {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr_peak = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;

  /// AdamW: 2e-3 / wd 0.05 / (0.9, 0.999). Lion: 2e-4 / wd 0.5 / (0.9, 0.99).
  static OptimHyper defaults(OptimizerKind kind);
  bool operator==(const OptimHyper&) const = default;
};

/// Moment buffers keyed like the parameters; `v` stays empty for Lion.
template <typename T>
struct OptimState {
  OptimHyper hyper;
  std::uint64_t step = 0;
  ParamMap<T> m;
  ParamMap<T> v;

  bool operator==(const OptimState&) const = default;
};

/// Rank-2 weights are decayed; biases, norm affines, CLS tokens and the
/// positional table are not, unless `decay_all`.
struct DecayRule {
  bool decay_all = false;
  bool applies(const std::string& path, const Shape& shape) const;
};

/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
/// theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta.
template <typename T>
void adamw_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimState<T>& state,
                double lr, const DecayRule& decay = {});

/// u = sign(b1 m + (1-b1) g); theta <- theta - lr * u - lr * wd * theta;
/// m <- b2 m + (1-b2) g.
template <typename T>
void lion_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimState<T>& state,
               double lr, const DecayRule& decay = {});

/// Dispatches on state.hyper.kind.
template <typename T>
void optimizer_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimState<T>& state,
                    double lr, const DecayRule& decay = {});

/// Linear warmup 0 -> peak over `warmup` steps, then cosine down to lr_min
/// at `total`.
double lr_schedule(std::uint64_t step, std::uint64_t total, std::uint64_t warmup,
                   double lr_peak, double lr_min);

inline constexpr double kLrMin = 1e-5;

}  // namespace tvl
