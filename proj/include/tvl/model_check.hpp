#pragma once
// Finite-difference checking of the full model loss.

#include "tvl/grad_check.hpp"
#include "tvl/model.hpp"

namespace tvl {

/// C=32, 4 heads, depth 2, 16x16 images in 4x4 patches (16 tokens), no
/// stochastic depth, d_c = 8.
ModelConfig grad_check_model_config(MlaVariant variant, std::size_t num_cls_tokens);

/// Redraws every parameter at a well-conditioned point for finite
/// differences: rank-2 weights N(0, 1/fan_in), norm gains 1 + N(0, 0.1^2),
/// other vectors N(0, 0.1^2), CLS and positional tables N(0, 0.5^2).
///
/// At the training init (std 0.02) many gradient entries sit near 1e-9 while
/// central differences at h = 1e-5 carry about 5e-11 of rounding noise, so
/// the relative error there measures noise rather than the backward rules.
void condition_for_grad_check(ParamMap<double>& params, Rng& rng);

struct ModelCheckCase {
  Model<double> model;
  Tensor<double> images;   // [B x 3 x S x S], N(0, 1)
  Tensor<double> targets;  // one-hot [B x classes]
};

/// Conditioned model plus a random batch, all drawn from `seed`.
ModelCheckCase make_model_check_case(const ModelConfig& cfg, std::size_t batch,
                                     std::uint64_t seed);

/// grad_check of the cross-entropy loss with respect to every parameter;
/// `worst` names the parameter path.
GradCheckReport model_grad_check(const ModelCheckCase& c, const GradCheckOptions& opts = {});

}  // namespace tvl
