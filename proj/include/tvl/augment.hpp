#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tvl/data.hpp"
#include "tvl/rng.hpp"
#include "tvl/tensor.hpp"

namespace tvl {

struct AugmentConfig {
  bool use_crop_flip = true;  // pad-4 reflect, random crop, horizontal flip
  bool use_autoaugment = true;
  bool use_mixup = true;
  bool use_cutmix = true;
  bool use_random_erasing = true;
  bool use_repeated_augment = false;
  double mixup_alpha = 0.8;
  double cutmix_alpha = 1.0;
  double erase_prob = 0.25;
  std::array<double, 2> erase_area{0.02, 0.33};
  double label_smoothing = 0.1;
  std::size_t repeated_factor = 3;

  void validate() const;
  /// Every stochastic stage off and no smoothing.
  static AugmentConfig none();
};

/// Normalised images plus probability-row targets.
struct SoftBatch {
  Tensor<float> images;   // [B x 3 x S x S]
  Tensor<float> targets;  // [B x classes]
  std::vector<std::size_t> sources;  // dataset row of each sample

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
};

/// One raw image, [3 x side x side] bytes.
struct ImageU8 {
  std::size_t side = 32;
  std::vector<std::uint8_t> px;

  ImageU8() = default;
  ImageU8(std::size_t s, std::span<const std::uint8_t> bytes)
      : side(s), px(bytes.begin(), bytes.end()) {}
  std::uint8_t& at(std::size_t c, std::size_t r, std::size_t col) {
    return px[(c * side + r) * side + col];
  }
  std::uint8_t at(std::size_t c, std::size_t r, std::size_t col) const {
    return px[(c * side + r) * side + col];
  }
};

// ---------------------------------------------------------------------------
// AutoAugment (fixed CIFAR-10 policy, no search)

enum class AaOp {
  shear_x, shear_y, translate_x, translate_y, rotate, color, posterize,
  solarize, contrast, sharpness, brightness, autocontrast, equalize, invert
};

std::string to_string(AaOp op);
AaOp parse_aa_op(std::string_view name);

struct AaStage {
  AaOp op;
  double prob;
  int magnitude;  // bin 0..9
  bool operator==(const AaStage&) const = default;
};

struct AaSubPolicy {
  AaStage first;
  AaStage second;
  bool operator==(const AaSubPolicy&) const = default;
};

/// Parses "op,p,m;op,p,m" lines; blank lines and '#' comments are skipped.
std::vector<AaSubPolicy> parse_policy(std::string_view text);
/// The 25 sub-policies shipped in data/autoaugment_cifar10.txt.
const std::vector<AaSubPolicy>& cifar10_policy();

/// Applies one op at magnitude bin `magnitude`; signed ops use `negate`.
void apply_aa_op(ImageU8& img, AaOp op, int magnitude, bool negate = false);
/// Geometric primitives (nearest-neighbour sampling, edge-clamped).
void hflip(ImageU8& img);
void rotate_degrees(ImageU8& img, double degrees);
void solarize(ImageU8& img, double threshold);

/// Pad-4-reflect + random crop + flip (p = 0.5), then optionally one
/// uniformly drawn policy entry. Operates on raw bytes.
void base_augment(ImageU8& img, bool crop_flip, bool use_autoaugment, Rng& rng);

// ---------------------------------------------------------------------------
// Batch-level mixing

struct CutBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  std::size_t area() const { return height * width; }
};

struct MixResult {
  bool applied = false;
  double lambda = 1.0;     // weight kept on the sample itself
  std::size_t shift = 0;   // partner of i is (i + shift) mod B
  CutBox box;              // CutMix only
};

/// lambda * x_a + (1 - lambda) * x_b for images and targets.
void mixup_with(SoftBatch& batch, double lambda, std::size_t shift);
/// Pastes the partner's `box`; returns the area-corrected lambda.
double cutmix_with(SoftBatch& batch, const CutBox& box, std::size_t shift);
/// Box of area about (1 - lambda) * H * W centred uniformly, border-clipped.
CutBox sample_cut_box(std::size_t side, double lambda, Rng& rng);

MixResult mixup(SoftBatch& batch, double alpha, Rng& rng);
MixResult cutmix(SoftBatch& batch, double alpha, Rng& rng);

// ---------------------------------------------------------------------------
// Per-sample ops on normalised images

struct EraseResult {
  bool applied = false;
  CutBox box;
};

/// With probability `prob`, fills a rectangle (area fraction in `area`,
/// aspect in [0.3, 3.3]) with standard-normal noise; up to 10 placement
/// attempts.
EraseResult random_erase(std::span<float> image, std::size_t side, double prob,
                         std::array<double, 2> area, Rng& rng);

/// One-hot rows -> (1 - eps + eps/C) on the true class, eps/C elsewhere.
Tensor<float> label_smooth(const Tensor<float>& one_hot, double eps);

// ---------------------------------------------------------------------------
// Pipeline

/// Builds an augmented batch from dataset rows (each copy augmented
/// independently), then applies MixUp or CutMix (50/50 when both enabled).
SoftBatch make_batch(const Dataset& ds, std::span<const std::size_t> rows,
                     const AugmentConfig& cfg, Rng& rng);

/// Takes the first batch/m entries of `candidates`, repeats each m times and
/// runs make_batch. m must divide batch.
SoftBatch repeated_augment(const Dataset& ds, std::span<const std::size_t> candidates,
                           std::size_t batch, std::size_t m, const AugmentConfig& cfg,
                           Rng& rng);

}  // namespace tvl
