#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tvl/ops.hpp"
#include "tvl/rng.hpp"
#include "tvl/tape.hpp"
#include "tvl/tensor.hpp"

namespace tvl {

/// Which of the query/key/value projections are low-rank factored.
enum class MlaVariant { none, q, k, qk, kv, qkv };
enum class Projection { q, k, v };

std::string to_string(MlaVariant v);
MlaVariant parse_mla_variant(const std::string& s);
inline constexpr MlaVariant kAllMlaVariants[] = {MlaVariant::none, MlaVariant::q,
                                                 MlaVariant::k,    MlaVariant::qk,
                                                 MlaVariant::kv,   MlaVariant::qkv};

struct MlaConfig {
  MlaVariant variant = MlaVariant::none;
  /// Latent width of a factored projection.
  std::size_t d_c = 48;

  bool compresses(Projection p) const;
  void validate(std::size_t embed_dim) const;
};

/// `none` is a zero table that is neither trained nor stored.
enum class PosEmbed { learnable, sinusoidal, none };
enum class PatchInit { random, whitening };
enum class Mode { train, eval };

std::string to_string(PosEmbed p);
PosEmbed parse_pos_embed(const std::string& s);
std::string to_string(PatchInit p);
PatchInit parse_patch_init(const std::string& s);

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 192;
  std::size_t num_heads = 12;
  std::size_t depth = 9;
  std::size_t ffn_ratio = 4;
  std::size_t num_classes = 10;
  std::size_t num_cls_tokens = 1;
  PosEmbed pos_embed = PosEmbed::learnable;
  PatchInit patch_init = PatchInit::random;
  MlaConfig mla;
  double drop_path_rate = 0.1;
  double ln_eps = 1e-6;

  void validate() const;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t seq_len() const { return num_patches() + num_cls_tokens; }
  std::size_t hidden_dim() const { return ffn_ratio * embed_dim; }
  std::size_t head_input_dim() const { return num_cls_tokens * embed_dim; }
  /// Linear 0 -> drop_path_rate across blocks.
  double drop_prob(std::size_t block) const;
};

/// Parameters keyed by dotted path; std::map keeps iteration order sorted.
template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <typename T>
struct Model {
  ModelConfig config;
  ParamMap<T> params;
  /// Frozen positional table for the sinusoidal / none kinds; empty otherwise.
  Tensor<T> fixed_pos;
};

template <typename To, typename From>
Model<To> model_cast(const Model<From>& m) {
  Model<To> out;
  out.config = m.config;
  for (const auto& [k, v] : m.params) out.params.emplace(k, tensor_cast<To>(v));
  if (!m.fixed_pos.empty()) out.fixed_pos = tensor_cast<To>(m.fixed_pos);
  return out;
}

// ---------------------------------------------------------------------------
// Tokenisation and initialisation

/// image[3 x H x W] -> [L x 3P^2]; row i*(W/P)+j holds patch (i, j) flattened
/// channel-major, then row, then column.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch);

/// images[B x 3 x H x W] -> [B*L x 3P^2], samples stacked in order.
template <typename T>
Tensor<T> patchify_batch(const Tensor<T>& images, std::size_t patch);

/// Sinusoidal table pe[pos, 2i] = sin(pos / 10000^(2i/C)), pe[pos, 2i+1] = cos(.).
Tensor<double> sinusoidal_table(std::size_t length, std::size_t channels);

struct WhiteningResult {
  Tensor<double> weight;  // [out_dim x patch_dim]
  Tensor<double> bias;    // [out_dim], centres the whitened rows
  std::vector<double> eigenvalues;  // descending
  std::size_t floored = 0;          // eigenvalues below eps
};

/// Patch-covariance whitening: the first min(out_dim, D) rows are
/// (lambda_i + eps)^-1/2 e_i for eigenpairs of the sample covariance in
/// descending order; remaining rows are truncated-normal(0.02).
WhiteningResult whitening_init(const Tensor<double>& patches, std::size_t out_dim,
                               Rng& rng, double eps = 1e-3);

/// Adds either `<prefix>.weight` [C x C] or the factored pair
/// `<prefix>.down` [d_c x C] and `<prefix>.up` [C x d_c].
template <typename T>
void add_projection(ParamMap<T>& params, const std::string& prefix, std::size_t dim,
                    std::optional<std::size_t> latent, Rng& rng);

/// Fresh parameters. With PatchInit::whitening, `whitening_patches` must hold
/// a [S x 3P^2] sample of normalised training patches.
template <typename T>
Model<T> init_model(const ModelConfig& cfg, Rng& rng,
                    const Tensor<double>* whitening_patches = nullptr);

// ---------------------------------------------------------------------------
// Forward pass

/// Parameters bound as tape leaves.
struct BoundParams {
  std::map<std::string, Var> vars;
  Var fixed_pos;

  Var operator()(const std::string& path) const;
  bool has(const std::string& path) const { return vars.count(path) != 0; }
};

template <typename T>
BoundParams bind_params(Tape<T>& tape, const Model<T>& model, bool requires_grad);

/// Per-sample residual-branch multipliers for stochastic depth:
/// 0 (dropped) or 1/(1-p) (kept), indexed [block][branch][sample].
struct DropPlan {
  std::size_t depth = 0;
  std::size_t batch = 0;
  std::vector<double> factors;
  std::vector<bool> active;  // per block: p > 0

  double factor(std::size_t block, std::size_t branch, std::size_t sample) const {
    return factors[(block * 2 + branch) * batch + sample];
  }
  /// Rows [begin, begin + count) of every block/branch.
  DropPlan slice(std::size_t begin, std::size_t count) const;
};

DropPlan make_drop_plan(const ModelConfig& cfg, std::size_t batch, Rng& rng);

template <typename T>
Var attention(Tape<T>& t, const BoundParams& p, const std::string& prefix, Var x,
              const ModelConfig& cfg, std::size_t batch);

template <typename T>
Var ffn(Tape<T>& t, const BoundParams& p, const std::string& prefix, Var x);

/// Pre-norm residual block. `plan` may be null (no stochastic depth).
template <typename T>
Var block(Tape<T>& t, const BoundParams& p, std::size_t index, Var x,
          const ModelConfig& cfg, std::size_t batch, const DropPlan* plan);

/// Concatenates the CLS outputs of each sample and applies the 2-layer head.
template <typename T>
Var cls_head(Tape<T>& t, const BoundParams& p, Var tokens, const ModelConfig& cfg,
             std::size_t batch);

/// images[B x 3 x H x W] (normalised) -> logits [B x num_classes].
template <typename T>
Var forward(Tape<T>& t, const Model<T>& model, const BoundParams& p,
            const Tensor<T>& images, const DropPlan* plan = nullptr);

/// Convenience wrapper: eval mode is pure; train mode draws a drop plan.
template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& images, Mode mode = Mode::eval,
                  Rng* rng = nullptr);

// ---------------------------------------------------------------------------
// Accounting

struct ParamCount {
  /// Keyed by "blocks.<i>.<module>" for block params, first path segment otherwise.
  std::map<std::string, std::size_t> groups;
  std::size_t attention_projections = 0;  // all blocks, q/k/v/o
  std::size_t total = 0;
};

template <typename T>
ParamCount param_count(const Model<T>& model);

/// Analytic peak activation bytes of one training forward (all tape outputs
/// plus saved backward buffers), exactly linear in batch.
std::size_t estimate_activation_bytes(const ModelConfig& cfg, std::size_t batch);

}  // namespace tvl
