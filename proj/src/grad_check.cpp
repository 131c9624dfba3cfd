#include "tvl/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tvl/rng.hpp"

namespace tvl {

namespace {

double evaluate(const GradCheckFn& f, const std::vector<Tensor<double>>& params) {
  Tape<double> tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.leaf(p, false));
  const Var out = f(tape, vars);
  return tape.value(out).item();
}

}  // namespace

GradCheckReport grad_check(const GradCheckFn& f, std::vector<Tensor<double>>& params,
                           const GradCheckOptions& opts) {
  if (!(opts.h > 0)) throw ValidationError("grad_check: h must be positive");

  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.leaf(p, true));
  const Var loss = f(tape, vars);
  if (tape.value(loss).size() != 1)
    throw ValidationError("grad_check: function output has shape " +
                          shape_str(tape.value(loss).shape()) + ", expected scalar");
  tape.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (Var v : vars) analytic.push_back(tape.grad_tensor(v));

  // Flat coordinate list: (param, element).
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  Rng pick = derive_rng(opts.seed, {0x9e7});
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<std::size_t> idx(params[p].size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opts.per_param > 0 && opts.per_param < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), pick);
      idx.resize(opts.per_param);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) coords.emplace_back(p, i);
  }
  if (opts.per_param == 0 && opts.sample > 0 && opts.sample < coords.size()) {
    Rng rng = derive_rng(opts.seed, {0x67c});
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opts.sample);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  for (auto [p, i] : coords) {
    double& x = params[p][i];
    const double saved = x;
    x = saved + opts.h;
    const double fp = evaluate(f, params);
    x = saved - opts.h;
    const double fm = evaluate(f, params);
    x = saved;
    const double numeric = (fp - fm) / (2.0 * opts.h);
    const double a = analytic[p][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error || report.worst.empty()) {
      report.max_rel_error = std::max(report.max_rel_error, rel);
      if (rel >= report.max_rel_error)
        report.worst = "param" + std::to_string(p) + "[" + std::to_string(i) + "]";
    }
    ++report.checked;
  }
  return report;
}

}  // namespace tvl
