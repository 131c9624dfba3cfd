#include "tvl/model_check.hpp"

#include <cmath>

namespace tvl {

ModelConfig grad_check_model_config(MlaVariant variant, std::size_t num_cls_tokens) {
  ModelConfig m;
  m.image_size = 16;
  m.patch_size = 4;
  m.embed_dim = 32;
  m.num_heads = 4;
  m.depth = 2;
  m.num_cls_tokens = num_cls_tokens;
  m.mla.variant = variant;
  m.mla.d_c = 8;
  m.drop_path_rate = 0.0;
  m.validate();
  return m;
}

void condition_for_grad_check(ParamMap<double>& params, Rng& rng) {
  auto ends_with = [](const std::string& s, const std::string& tail) {
    return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
  };
  for (auto& [path, t] : params) {
    double sd = t.rank() == 2 ? 1.0 / std::sqrt(static_cast<double>(t.dim(1))) : 0.1;
    if (path == "cls_token" || path == "pos_embed") sd = 0.5;
    const bool gain = ends_with(path, "norm.weight") || ends_with(path, "norm1.weight") ||
                      ends_with(path, "norm2.weight");
    for (auto& v : t.data()) v = (gain ? 1.0 : 0.0) + sd * standard_normal(rng);
  }
}

ModelCheckCase make_model_check_case(const ModelConfig& cfg, std::size_t batch,
                                     std::uint64_t seed) {
  Rng rng = derive_rng(seed, {0x6c});
  ModelCheckCase c{init_model<double>(cfg, rng), {}, {}};
  condition_for_grad_check(c.model.params, rng);
  c.images = Tensor<double>({batch, 3, cfg.image_size, cfg.image_size});
  for (auto& v : c.images.data()) v = standard_normal(rng);
  c.targets = Tensor<double>({batch, cfg.num_classes}, 0.0);
  for (std::size_t i = 0; i < batch; ++i)
    c.targets.at(i, static_cast<std::size_t>(uniform01(rng) * cfg.num_classes) % cfg.num_classes) = 1.0;
  return c;
}

GradCheckReport model_grad_check(const ModelCheckCase& c, const GradCheckOptions& opts) {
  std::vector<std::string> names;
  std::vector<Tensor<double>> params;
  for (const auto& [k, v] : c.model.params) {
    names.push_back(k);
    params.push_back(v);
  }
  GradCheckFn f = [&](Tape<double>& t, std::span<const Var> vars) {
    BoundParams p;
    for (std::size_t i = 0; i < vars.size(); ++i) p.vars.emplace(names[i], vars[i]);
    if (!c.model.fixed_pos.empty()) p.fixed_pos = t.leaf(c.model.fixed_pos, false);
    return ops::cross_entropy(t, forward(t, c.model, p, c.images), c.targets);
  };
  GradCheckReport rep = grad_check(f, params, opts);
  // "paramN[i]" -> "<path>[i]"
  const auto br = rep.worst.find('[');
  if (rep.worst.rfind("param", 0) == 0 && br != std::string::npos) {
    const std::size_t idx = std::stoul(rep.worst.substr(5, br - 5));
    if (idx < names.size()) rep.worst = names[idx] + rep.worst.substr(br);
  }
  return rep;
}

}  // namespace tvl
