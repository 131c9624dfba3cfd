#include "tvl/model.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <iostream>

namespace tvl {

// ---------------------------------------------------------------------------
// Config

std::string to_string(MlaVariant v) {
  switch (v) {
    case MlaVariant::none: return "none";
    case MlaVariant::q: return "q";
    case MlaVariant::k: return "k";
    case MlaVariant::qk: return "qk";
    case MlaVariant::kv: return "kv";
    case MlaVariant::qkv: return "qkv";
  }
  return "none";
}

MlaVariant parse_mla_variant(const std::string& s) {
  for (MlaVariant v : kAllMlaVariants)
    if (to_string(v) == s) return v;
  throw ConfigError("unknown MLA variant '" + s + "' (none|q|k|qk|kv|qkv)");
}

std::string to_string(PosEmbed p) {
  switch (p) {
    case PosEmbed::learnable: return "learnable";
    case PosEmbed::sinusoidal: return "sin";
    case PosEmbed::none: return "none";
  }
  return "learnable";
}

PosEmbed parse_pos_embed(const std::string& s) {
  if (s == "learnable") return PosEmbed::learnable;
  if (s == "sin" || s == "sinusoidal") return PosEmbed::sinusoidal;
  if (s == "none") return PosEmbed::none;
  throw ConfigError("unknown positional embedding '" + s + "' (learnable|sin|none)");
}

std::string to_string(PatchInit p) {
  return p == PatchInit::whitening ? "whiten" : "random";
}

PatchInit parse_patch_init(const std::string& s) {
  if (s == "random") return PatchInit::random;
  if (s == "whiten" || s == "whitening") return PatchInit::whitening;
  throw ConfigError("unknown patch init '" + s + "' (random|whiten)");
}

bool MlaConfig::compresses(Projection p) const {
  switch (variant) {
    case MlaVariant::none: return false;
    case MlaVariant::q: return p == Projection::q;
    case MlaVariant::k: return p == Projection::k;
    case MlaVariant::qk: return p != Projection::v;
    case MlaVariant::kv: return p != Projection::q;
    case MlaVariant::qkv: return true;
  }
  return false;
}

void MlaConfig::validate(std::size_t embed_dim) const {
  if (variant == MlaVariant::none) return;
  if (d_c < 1) throw ConfigError("MLA latent dim d_c must be >= 1");
  if (d_c >= embed_dim)
    throw ConfigError("MLA latent dim d_c=" + std::to_string(d_c) +
                      " must be smaller than embed_dim=" + std::to_string(embed_dim));
}

void ModelConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " is not divisible by patch_size " + std::to_string(patch_size));
  if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  if (num_cls_tokens < 1) throw ConfigError("num_cls_tokens must be >= 1");
  if (depth < 1 || ffn_ratio < 1 || num_classes < 2)
    throw ConfigError("depth, ffn_ratio must be >= 1 and num_classes >= 2");
  if (pos_embed == PosEmbed::sinusoidal && embed_dim % 2 != 0)
    throw ConfigError("sinusoidal positional embedding needs an even embed_dim");
  if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0))
    throw ConfigError("drop_path_rate must be in [0, 1)");
  mla.validate(embed_dim);
}

double ModelConfig::drop_prob(std::size_t block) const {
  if (depth <= 1) return 0.0;
  return drop_path_rate * static_cast<double>(block) / static_cast<double>(depth - 1);
}

// ---------------------------------------------------------------------------
// Tokenisation

template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 3 || patch == 0 || image.dim(1) % patch != 0 ||
      image.dim(2) % patch != 0)
    throw ConfigError("patchify: image " + shape_str(image.shape()) +
                      " is not divisible into " + std::to_string(patch) + "x" +
                      std::to_string(patch) + " patches");
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t gh = h / patch, gw = w / patch, pd = ch * patch * patch;
  Tensor<T> out({gh * gw, pd});
  for (std::size_t i = 0; i < gh; ++i)
    for (std::size_t j = 0; j < gw; ++j) {
      T* row = out.data().data() + (i * gw + j) * pd;
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t r = 0; r < patch; ++r)
          for (std::size_t s = 0; s < patch; ++s)
            row[(c * patch + r) * patch + s] =
                image[(c * h + i * patch + r) * w + j * patch + s];
    }
  return out;
}

template <typename T>
Tensor<T> patchify_batch(const Tensor<T>& images, std::size_t patch) {
  if (images.rank() != 4)
    throw ConfigError("patchify_batch: expected [B x C x H x W], got " +
                      shape_str(images.shape()));
  const std::size_t b = images.dim(0);
  const std::size_t per = images.size() / b;
  const Shape one{images.dim(1), images.dim(2), images.dim(3)};
  Tensor<T> out;
  std::vector<T> data;
  std::size_t rows = 0, cols = 0;
  for (std::size_t s = 0; s < b; ++s) {
    Tensor<T> img(one, std::vector<T>(images.data().begin() + s * per,
                                      images.data().begin() + (s + 1) * per));
    Tensor<T> p = patchify(img, patch);
    rows = p.dim(0);
    cols = p.dim(1);
    if (data.empty()) data.reserve(b * p.size());
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor<T>({b * rows, cols}, std::move(data));
}

Tensor<double> sinusoidal_table(std::size_t length, std::size_t channels) {
  if (channels % 2 != 0)
    throw ConfigError("sinusoidal table needs an even channel count, got " +
                      std::to_string(channels));
  Tensor<double> pe({length, channels});
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < channels / 2; ++i) {
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(channels));
      pe.at(pos, 2 * i) = std::sin(angle);
      pe.at(pos, 2 * i + 1) = std::cos(angle);
    }
  return pe;
}

WhiteningResult whitening_init(const Tensor<double>& patches, std::size_t out_dim,
                               Rng& rng, double eps) {
  if (patches.rank() != 2)
    throw DimensionError("whitening_init: expected [S x D], got " +
                         shape_str(patches.shape()));
  const std::size_t s = patches.dim(0), d = patches.dim(1);
  if (s < 10 * d)
    throw ConfigError("whitening_init: need at least " + std::to_string(10 * d) +
                      " patches, got " + std::to_string(s));

  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      x(patches.data().data(), static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - mean;
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(s - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);

  WhiteningResult res;
  res.weight = Tensor<double>({out_dim, d});
  res.bias = Tensor<double>({out_dim}, 0.0);
  const std::size_t whitened = std::min(out_dim, d);
  for (std::size_t r = 0; r < whitened; ++r) {
    // Eigen sorts ascending.
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - r);
    double lambda = solver.eigenvalues()(col);
    res.eigenvalues.push_back(lambda);
    if (lambda < eps) ++res.floored;
    lambda = std::max(lambda, 0.0);
    const double scale = 1.0 / std::sqrt(lambda + eps);
    double b = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const double w = solver.eigenvectors()(static_cast<Eigen::Index>(c), col) * scale;
      res.weight.at(r, c) = w;
      b -= w * mean(static_cast<Eigen::Index>(c));
    }
    res.bias[r] = b;
  }
  for (std::size_t r = whitened; r < out_dim; ++r)
    for (std::size_t c = 0; c < d; ++c) res.weight.at(r, c) = truncated_normal(rng, 0.02);
  return res;
}

// ---------------------------------------------------------------------------
// Initialisation

namespace {

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(truncated_normal(rng, stddev));
  return t;
}

template <typename T>
void add_linear(ParamMap<T>& p, const std::string& prefix, std::size_t out,
                std::size_t in, Rng& rng) {
  p.emplace(prefix + ".weight", trunc_normal<T>({out, in}, rng));
  p.emplace(prefix + ".bias", Tensor<T>({out}, T(0)));
}

template <typename T>
void add_norm(ParamMap<T>& p, const std::string& prefix, std::size_t dim) {
  p.emplace(prefix + ".weight", Tensor<T>({dim}, T(1)));
  p.emplace(prefix + ".bias", Tensor<T>({dim}, T(0)));
}

const char* projection_name(Projection p) {
  switch (p) {
    case Projection::q: return "q";
    case Projection::k: return "k";
    case Projection::v: return "v";
  }
  return "q";
}

}  // namespace

template <typename T>
void add_projection(ParamMap<T>& params, const std::string& prefix, std::size_t dim,
                    std::optional<std::size_t> latent, Rng& rng) {
  if (!latent) {
    params.emplace(prefix + ".weight", trunc_normal<T>({dim, dim}, rng));
    return;
  }
  if (*latent < 1 || *latent >= dim)
    throw ConfigError("projection " + prefix + ": latent dim " + std::to_string(*latent) +
                      " must be in [1, " + std::to_string(dim) + ")");
  params.emplace(prefix + ".down", trunc_normal<T>({*latent, dim}, rng));
  params.emplace(prefix + ".up", trunc_normal<T>({dim, *latent}, rng));
}

template <typename T>
Model<T> init_model(const ModelConfig& cfg, Rng& rng,
                    const Tensor<double>* whitening_patches) {
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  auto& p = m.params;
  const std::size_t c = cfg.embed_dim;

  if (cfg.patch_init == PatchInit::whitening) {
    if (!whitening_patches)
      throw ConfigError("whitening init requires a sample of training patches");
    WhiteningResult w = whitening_init(*whitening_patches, c, rng);
    if (w.floored > 0)
      std::cerr << "warning: whitening floored " << w.floored
                << " near-zero eigenvalue(s) of the patch covariance\n";
    p.emplace("patch_embed.weight", tensor_cast<T>(w.weight));
    p.emplace("patch_embed.bias", tensor_cast<T>(w.bias));
  } else {
    add_linear(p, "patch_embed", c, cfg.patch_dim(), rng);
  }

  switch (cfg.pos_embed) {
    case PosEmbed::learnable:
      p.emplace("pos_embed", trunc_normal<T>({cfg.num_patches(), c}, rng));
      break;
    case PosEmbed::sinusoidal:
      m.fixed_pos = tensor_cast<T>(sinusoidal_table(cfg.num_patches(), c));
      break;
    case PosEmbed::none:
      break;
  }
  p.emplace("cls_token", trunc_normal<T>({cfg.num_cls_tokens, c}, rng));

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string b = "blocks." + std::to_string(i);
    add_norm(p, b + ".norm1", c);
    for (Projection pr : {Projection::q, Projection::k, Projection::v}) {
      std::optional<std::size_t> latent;
      if (cfg.mla.compresses(pr)) latent = cfg.mla.d_c;
      add_projection(p, b + ".attn." + projection_name(pr), c, latent, rng);
    }
    add_projection<T>(p, b + ".attn.o", c, std::nullopt, rng);
    add_norm(p, b + ".norm2", c);
    add_linear(p, b + ".ffn.fc1", cfg.hidden_dim(), c, rng);
    add_linear(p, b + ".ffn.fc2", c, cfg.hidden_dim(), rng);
  }
  add_norm(p, "norm", c);
  add_linear(p, "head.fc1", c, cfg.head_input_dim(), rng);
  add_linear(p, "head.fc2", cfg.num_classes, c, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Forward

Var BoundParams::operator()(const std::string& path) const {
  auto it = vars.find(path);
  if (it == vars.end()) throw ConfigError("no parameter named '" + path + "'");
  return it->second;
}

template <typename T>
BoundParams bind_params(Tape<T>& tape, const Model<T>& model, bool requires_grad) {
  BoundParams b;
  for (const auto& [path, tensor] : model.params)
    b.vars.emplace(path, tape.leaf(tensor, requires_grad));
  if (!model.fixed_pos.empty()) b.fixed_pos = tape.leaf(model.fixed_pos, false);
  return b;
}

DropPlan DropPlan::slice(std::size_t begin, std::size_t count) const {
  DropPlan s;
  s.depth = depth;
  s.batch = count;
  s.active = active;
  s.factors.reserve(depth * 2 * count);
  for (std::size_t blk = 0; blk < depth * 2; ++blk)
    for (std::size_t i = 0; i < count; ++i)
      s.factors.push_back(factors[blk * batch + begin + i]);
  return s;
}

DropPlan make_drop_plan(const ModelConfig& cfg, std::size_t batch, Rng& rng) {
  DropPlan plan;
  plan.depth = cfg.depth;
  plan.batch = batch;
  plan.factors.assign(cfg.depth * 2 * batch, 1.0);
  plan.active.assign(cfg.depth, false);
  for (std::size_t blk = 0; blk < cfg.depth; ++blk) {
    const double p = cfg.drop_prob(blk);
    if (p <= 0.0) continue;
    plan.active[blk] = true;
    for (std::size_t br = 0; br < 2; ++br)
      for (std::size_t s = 0; s < batch; ++s)
        plan.factors[(blk * 2 + br) * batch + s] =
            uniform01(rng) < p ? 0.0 : 1.0 / (1.0 - p);
  }
  return plan;
}

namespace {

template <typename T>
Var project(Tape<T>& t, const BoundParams& p, const std::string& prefix, Var x) {
  if (p.has(prefix + ".weight")) return ops::linear(t, x, p(prefix + ".weight"));
  const Var latent = ops::linear(t, x, p(prefix + ".down"));
  return ops::linear(t, latent, p(prefix + ".up"));
}

template <typename T>
Var drop_branch(Tape<T>& t, Var branch, const DropPlan* plan, std::size_t blk,
                std::size_t which) {
  if (!plan || !plan->active[blk]) return branch;
  std::vector<T> f(plan->batch);
  for (std::size_t s = 0; s < plan->batch; ++s)
    f[s] = static_cast<T>(plan->factor(blk, which, s));
  return ops::scale_groups<T>(t, branch, f);
}

}  // namespace

template <typename T>
Var attention(Tape<T>& t, const BoundParams& p, const std::string& prefix, Var x,
              const ModelConfig& cfg, std::size_t batch) {
  // Copied: recording the projections may reallocate the tape's storage.
  const Shape xs = t.value(x).shape();
  if (xs.size() != 2 || xs[1] != cfg.embed_dim || xs[0] % batch != 0)
    throw DimensionError("attention: input " + shape_str(xs) + " for embed_dim " +
                         std::to_string(cfg.embed_dim) + " and batch " +
                         std::to_string(batch));
  const Var q = project(t, p, prefix + ".q", x);
  const Var k = project(t, p, prefix + ".k", x);
  const Var v = project(t, p, prefix + ".v", x);
  kernels::AttentionShape shape;
  shape.batch = batch;
  shape.seq = xs[0] / batch;
  shape.heads = cfg.num_heads;
  shape.head_dim = cfg.head_dim();
  const Var heads = ops::multi_head_attention(t, q, k, v, shape);
  return ops::linear(t, heads, p(prefix + ".o.weight"));
}

template <typename T>
Var ffn(Tape<T>& t, const BoundParams& p, const std::string& prefix, Var x) {
  Var h = ops::linear(t, x, p(prefix + ".fc1.weight"), p(prefix + ".fc1.bias"));
  h = ops::activation(t, h, ops::Activation::gelu);
  return ops::linear(t, h, p(prefix + ".fc2.weight"), p(prefix + ".fc2.bias"));
}

template <typename T>
Var block(Tape<T>& t, const BoundParams& p, std::size_t index, Var x,
          const ModelConfig& cfg, std::size_t batch, const DropPlan* plan) {
  const std::string b = "blocks." + std::to_string(index);
  const T eps = static_cast<T>(cfg.ln_eps);
  Var y = ops::layer_norm(t, x, p(b + ".norm1.weight"), p(b + ".norm1.bias"), eps);
  Var a = attention(t, p, b + ".attn", y, cfg, batch);
  x = ops::add(t, x, drop_branch(t, a, plan, index, 0));
  y = ops::layer_norm(t, x, p(b + ".norm2.weight"), p(b + ".norm2.bias"), eps);
  Var f = ffn(t, p, b + ".ffn", y);
  return ops::add(t, x, drop_branch(t, f, plan, index, 1));
}

template <typename T>
Var cls_head(Tape<T>& t, const BoundParams& p, Var tokens, const ModelConfig& cfg,
             std::size_t batch) {
  Var h = ops::leading_rows(t, tokens, batch, cfg.num_cls_tokens);
  h = ops::linear(t, h, p("head.fc1.weight"), p("head.fc1.bias"));
  h = ops::activation(t, h, ops::Activation::gelu);
  return ops::linear(t, h, p("head.fc2.weight"), p("head.fc2.bias"));
}

template <typename T>
Var forward(Tape<T>& t, const Model<T>& model, const BoundParams& p,
            const Tensor<T>& images, const DropPlan* plan) {
  const ModelConfig& cfg = model.config;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.image_size)
    throw ConfigError("forward: images " + shape_str(images.shape()) +
                      " do not match image_size " + std::to_string(cfg.image_size));
  const std::size_t batch = images.dim(0);
  if (plan && (plan->batch != batch || plan->depth != cfg.depth))
    throw ConfigError("forward: drop plan does not match batch/depth");

  const Var patches = t.leaf(patchify_batch(images, cfg.patch_size), false);
  Var x = ops::linear(t, patches, p("patch_embed.weight"), p("patch_embed.bias"));
  if (cfg.pos_embed == PosEmbed::learnable)
    x = ops::add_tiled(t, x, p("pos_embed"));
  else if (cfg.pos_embed == PosEmbed::sinusoidal)
    x = ops::add_tiled(t, x, p.fixed_pos);
  x = ops::prepend_rows(t, x, p("cls_token"), batch);
  for (std::size_t i = 0; i < cfg.depth; ++i) x = block(t, p, i, x, cfg, batch, plan);
  x = ops::layer_norm(t, x, p("norm.weight"), p("norm.bias"), static_cast<T>(cfg.ln_eps));
  return cls_head(t, p, x, cfg, batch);
}

template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& images, Mode mode, Rng* rng) {
  Tape<T> tape;
  const BoundParams p = bind_params(tape, model, false);
  std::optional<DropPlan> plan;
  if (mode == Mode::train) {
    if (!rng) throw ConfigError("predict: train mode needs an rng");
    plan = make_drop_plan(model.config, images.dim(0), *rng);
  }
  const Var logits = forward(tape, model, p, images, plan ? &*plan : nullptr);
  return tape.value(logits);
}

// ---------------------------------------------------------------------------
// Accounting

namespace {

std::string group_of(const std::string& path) {
  auto next = [&](std::size_t from) { return path.find('.', from); };
  if (path.rfind("blocks.", 0) == 0) {
    const auto a = next(7);
    const auto b = a == std::string::npos ? a : next(a + 1);
    return path.substr(0, b);
  }
  return path.substr(0, next(0));
}

}  // namespace

template <typename T>
ParamCount param_count(const Model<T>& model) {
  ParamCount pc;
  for (const auto& [path, tensor] : model.params) {
    const std::string g = group_of(path);
    pc.groups[g] += tensor.size();
    pc.total += tensor.size();
    if (g.size() > 5 && g.compare(g.size() - 5, 5, ".attn") == 0)
      pc.attention_projections += tensor.size();
  }
  return pc;
}

std::size_t estimate_activation_bytes(const ModelConfig& cfg, std::size_t batch) {
  ModelConfig probe = cfg;
  probe.patch_init = PatchInit::random;
  Rng rng(0);
  const Model<float> model = init_model<float>(probe, rng);
  Tape<float> tape;
  const BoundParams p = bind_params(tape, model, true);
  const Tensor<float> image({1, 3, cfg.image_size, cfg.image_size}, 0.0f);
  DropPlan plan = make_drop_plan(cfg, 1, rng);
  forward(tape, model, p, image, &plan);
  return tape.activation_bytes() * batch;
}

#define TVL_MODEL_INSTANTIATE(T)                                                   \
  template Tensor<T> patchify<T>(const Tensor<T>&, std::size_t);                   \
  template Tensor<T> patchify_batch<T>(const Tensor<T>&, std::size_t);             \
  template void add_projection<T>(ParamMap<T>&, const std::string&, std::size_t,   \
                                  std::optional<std::size_t>, Rng&);               \
  template Model<T> init_model<T>(const ModelConfig&, Rng&, const Tensor<double>*); \
  template BoundParams bind_params<T>(Tape<T>&, const Model<T>&, bool);            \
  template Var attention<T>(Tape<T>&, const BoundParams&, const std::string&, Var, \
                            const ModelConfig&, std::size_t);                      \
  template Var ffn<T>(Tape<T>&, const BoundParams&, const std::string&, Var);      \
  template Var block<T>(Tape<T>&, const BoundParams&, std::size_t, Var,            \
                        const ModelConfig&, std::size_t, const DropPlan*);         \
  template Var cls_head<T>(Tape<T>&, const BoundParams&, Var, const ModelConfig&,  \
                           std::size_t);                                           \
  template Var forward<T>(Tape<T>&, const Model<T>&, const BoundParams&,           \
                          const Tensor<T>&, const DropPlan*);                      \
  template Tensor<T> predict<T>(const Model<T>&, const Tensor<T>&, Mode, Rng*);    \
  template ParamCount param_count<T>(const Model<T>&);

TVL_MODEL_INSTANTIATE(float)
TVL_MODEL_INSTANTIATE(double)

}  // namespace tvl
