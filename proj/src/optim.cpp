#include "tvl/optim.hpp"

#include <cmath>
#include <numbers>

namespace tvl {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "lion"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "lion") return OptimizerKind::lion;
  throw ConfigError("unknown optimizer '" + s + "' (expected adamw|lion)");
}

OptimHyper OptimHyper::defaults(OptimizerKind kind) {
  OptimHyper h;
  h.kind = kind;
  if (kind == OptimizerKind::lion) {
    h.lr_peak = 2e-4;
    h.beta2 = 0.99;
    h.weight_decay = 0.5;
  }
  return h;
}

bool DecayRule::applies(const std::string& path, const Shape& shape) const {
  if (decay_all) return true;
  if (path == "cls_token" || path == "pos_embed") return false;
  return shape.size() == 2;
}

namespace {

template <typename T>
const Tensor<T>& checked_grad(const std::string& path, const Tensor<T>& param,
                              const ParamMap<T>& grads) {
  const auto it = grads.find(path);
  if (it == grads.end()) throw ValidationError("optimizer: no gradient for '" + path + "'");
  if (it->second.shape() != param.shape())
    throw DimensionError("optimizer: gradient for '" + path + "' has shape " +
                         shape_str(it->second.shape()) + ", parameter " +
                         shape_str(param.shape()));
  return it->second;
}

template <typename T>
Tensor<T>& buffer(ParamMap<T>& map, const std::string& path, const Shape& shape) {
  auto it = map.find(path);
  if (it == map.end()) it = map.emplace(path, Tensor<T>(shape)).first;
  if (it->second.shape() != shape)
    throw DimensionError("optimizer: state buffer for '" + path + "' has shape " +
                         shape_str(it->second.shape()));
  return it->second;
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

template <typename T>
void adamw_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimState<T>& state,
                double lr, const DecayRule& decay) {
  const OptimHyper& h = state.hyper;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t), c2 = 1.0 - std::pow(h.beta2, t);
  for (auto& [path, p] : params) {
    const Tensor<T>& g = checked_grad(path, p, grads);
    Tensor<T>& m = buffer(state.m, path, p.shape());
    Tensor<T>& v = buffer(state.v, path, p.shape());
    const double wd = decay.applies(path, p.shape()) ? h.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      const double theta = p[i];
      p[i] = static_cast<T>(theta - lr * mhat / (std::sqrt(vhat) + h.eps) - lr * wd * theta);
    }
  }
}

template <typename T>
void lion_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimState<T>& state,
               double lr, const DecayRule& decay) {
  const OptimHyper& h = state.hyper;
  ++state.step;
  for (auto& [path, p] : params) {
    const Tensor<T>& g = checked_grad(path, p, grads);
    Tensor<T>& m = buffer(state.m, path, p.shape());
    const double wd = decay.applies(path, p.shape()) ? h.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i], mi = m[i];
      const double u = sign(h.beta1 * mi + (1.0 - h.beta1) * gi);
      const double theta = p[i];
      p[i] = static_cast<T>(theta - lr * u - lr * wd * theta);
      m[i] = static_cast<T>(h.beta2 * mi + (1.0 - h.beta2) * gi);
    }
  }
}

template <typename T>
void optimizer_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimState<T>& state,
                    double lr, const DecayRule& decay) {
  if (state.hyper.kind == OptimizerKind::adamw)
    adamw_step(params, grads, state, lr, decay);
  else
    lion_step(params, grads, state, lr, decay);
}

double lr_schedule(std::uint64_t step, std::uint64_t total, std::uint64_t warmup,
                   double lr_peak, double lr_min) {
  if (warmup >= total)
    throw ConfigError("lr_schedule: warmup " + std::to_string(warmup) +
                      " must be below total " + std::to_string(total));
  if (step > total) step = total;
  if (step < warmup)
    return lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

#define TVL_OPTIM(T)                                                                      \
  template void adamw_step<T>(ParamMap<T>&, const ParamMap<T>&, OptimState<T>&, double,   \
                              const DecayRule&);                                          \
  template void lion_step<T>(ParamMap<T>&, const ParamMap<T>&, OptimState<T>&, double,    \
                             const DecayRule&);                                           \
  template void optimizer_step<T>(ParamMap<T>&, const ParamMap<T>&, OptimState<T>&,       \
                                  double, const DecayRule&);
TVL_OPTIM(float)
TVL_OPTIM(double)
#undef TVL_OPTIM

}  // namespace tvl
