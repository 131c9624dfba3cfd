#include "tvl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <sstream>

namespace tvl {

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0))
      throw ConfigError(std::string("augment: ") + name + " must lie in [0, 1], got " +
                        std::to_string(p));
  };
  prob(erase_prob, "erase_prob");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw ConfigError("augment: label_smoothing must lie in [0, 1), got " +
                      std::to_string(label_smoothing));
  if (!(erase_area[0] > 0.0 && erase_area[0] <= erase_area[1] && erase_area[1] < 1.0))
    throw ConfigError("augment: erase area range must satisfy 0 < low <= high < 1");
  if (!(mixup_alpha > 0.0) || !(cutmix_alpha > 0.0))
    throw ConfigError("augment: mixing alphas must be positive");
  if (repeated_factor < 1) throw ConfigError("augment: repeated_factor must be >= 1");
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.use_crop_flip = false;
  c.use_autoaugment = false;
  c.use_mixup = false;
  c.use_cutmix = false;
  c.use_random_erasing = false;
  c.use_repeated_augment = false;
  c.label_smoothing = 0.0;
  return c;
}

// ---------------------------------------------------------------------------
// Policy table

namespace {

constexpr std::pair<AaOp, const char*> kOpNames[] = {
    {AaOp::shear_x, "shear_x"},       {AaOp::shear_y, "shear_y"},
    {AaOp::translate_x, "translate_x"}, {AaOp::translate_y, "translate_y"},
    {AaOp::rotate, "rotate"},         {AaOp::color, "color"},
    {AaOp::posterize, "posterize"},   {AaOp::solarize, "solarize"},
    {AaOp::contrast, "contrast"},     {AaOp::sharpness, "sharpness"},
    {AaOp::brightness, "brightness"}, {AaOp::autocontrast, "autocontrast"},
    {AaOp::equalize, "equalize"},     {AaOp::invert, "invert"},
};

constexpr const char* kCifar10Policy = R"(
invert,0.1,0;contrast,0.2,6
rotate,0.7,2;translate_x,0.3,9
sharpness,0.8,1;sharpness,0.9,3
shear_y,0.5,8;translate_y,0.7,9
autocontrast,0.5,0;equalize,0.9,0
shear_y,0.2,7;posterize,0.3,7
color,0.4,3;brightness,0.6,7
sharpness,0.3,9;brightness,0.7,9
equalize,0.6,0;equalize,0.5,0
contrast,0.6,7;sharpness,0.6,5
color,0.7,7;translate_x,0.5,8
equalize,0.3,0;autocontrast,0.4,0
translate_y,0.4,3;sharpness,0.2,6
brightness,0.9,6;color,0.2,8
solarize,0.5,2;invert,0.0,0
equalize,0.2,0;autocontrast,0.6,0
equalize,0.2,0;equalize,0.6,0
color,0.9,9;equalize,0.6,0
autocontrast,0.8,0;solarize,0.2,8
brightness,0.1,3;color,0.7,0
solarize,0.4,5;autocontrast,0.9,0
translate_y,0.9,9;translate_y,0.7,9
autocontrast,0.9,0;solarize,0.8,3
equalize,0.8,0;invert,0.1,0
translate_y,0.7,9;autocontrast,0.9,0
)";

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

AaStage parse_stage(const std::string& text, std::size_t line_no) {
  std::vector<std::string> fields;
  std::stringstream ss(text);
  for (std::string f; std::getline(ss, f, ',');) fields.push_back(trim(f));
  if (fields.size() != 3)
    throw ValidationError("policy line " + std::to_string(line_no) + ": stage '" + text +
                          "' needs op,prob,magnitude");
  AaStage st{parse_aa_op(fields[0]), 0.0, 0};
  try {
    st.prob = std::stod(fields[1]);
    st.magnitude = std::stoi(fields[2]);
  } catch (const std::exception&) {
    throw ValidationError("policy line " + std::to_string(line_no) + ": bad number in '" +
                          text + "'");
  }
  if (st.prob < 0.0 || st.prob > 1.0 || st.magnitude < 0 || st.magnitude > 9)
    throw ValidationError("policy line " + std::to_string(line_no) +
                          ": probability or magnitude out of range");
  return st;
}

}  // namespace

std::string to_string(AaOp op) {
  for (const auto& [o, name] : kOpNames)
    if (o == op) return name;
  return "?";
}

AaOp parse_aa_op(std::string_view name) {
  for (const auto& [o, n] : kOpNames)
    if (name == n) return o;
  throw ValidationError("unknown augmentation op '" + std::string(name) + "'");
}

std::vector<AaSubPolicy> parse_policy(std::string_view text) {
  std::vector<AaSubPolicy> out;
  std::stringstream ss{std::string(text)};
  std::size_t line_no = 0;
  for (std::string line; std::getline(ss, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto semi = line.find(';');
    if (semi == std::string::npos || line.find(';', semi + 1) != std::string::npos)
      throw ValidationError("policy line " + std::to_string(line_no) +
                            ": expected exactly two stages");
    out.push_back({parse_stage(line.substr(0, semi), line_no),
                   parse_stage(line.substr(semi + 1), line_no)});
  }
  return out;
}

const std::vector<AaSubPolicy>& cifar10_policy() {
  static const std::vector<AaSubPolicy> policy = parse_policy(kCifar10Policy);
  return policy;
}

// ---------------------------------------------------------------------------
// Image ops

namespace {

std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

std::size_t clamp_index(long v, std::size_t side) {
  return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(side) - 1));
}

/// Resamples with `src(r, c) -> (sr, sc)`, nearest neighbour, edge-clamped.
template <typename Map>
void remap(ImageU8& img, Map map) {
  const std::size_t s = img.side;
  ImageU8 out = img;
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < s; ++c) {
      const auto [sr, sc] = map(static_cast<double>(r), static_cast<double>(c));
      const std::size_t rr = clamp_index(std::lround(sr), s);
      const std::size_t cc = clamp_index(std::lround(sc), s);
      for (std::size_t ch = 0; ch < 3; ++ch) out.at(ch, r, c) = img.at(ch, rr, cc);
    }
  img = std::move(out);
}

double gray(const ImageU8& img, std::size_t r, std::size_t c) {
  return 0.299 * img.at(0, r, c) + 0.587 * img.at(1, r, c) + 0.114 * img.at(2, r, c);
}

/// factor * img + (1 - factor) * other
template <typename Other>
void blend(ImageU8& img, double factor, Other other) {
  const std::size_t s = img.side;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < s; ++c) {
        const double o = other(ch, r, c);
        img.at(ch, r, c) = to_u8(factor * img.at(ch, r, c) + (1.0 - factor) * o);
      }
}

void autocontrast(ImageU8& img) {
  const std::size_t plane = img.side * img.side;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    auto* p = img.px.data() + ch * plane;
    const auto [lo, hi] = std::minmax_element(p, p + plane);
    if (*hi == *lo) continue;
    const double l = *lo, scale = 255.0 / (*hi - *lo);
    for (std::size_t i = 0; i < plane; ++i) p[i] = to_u8((p[i] - l) * scale);
  }
}

void equalize(ImageU8& img) {
  const std::size_t plane = img.side * img.side;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    auto* p = img.px.data() + ch * plane;
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < plane; ++i) ++hist[p[i]];
    std::size_t last = 255;
    while (hist[last] == 0) --last;
    const std::size_t step = (plane - hist[last]) / 255;
    if (step == 0) continue;
    std::array<std::uint8_t, 256> lut{};
    std::size_t n = step / 2;
    for (std::size_t v = 0; v < 256; ++v) {
      lut[v] = static_cast<std::uint8_t>(std::min<std::size_t>(n / step, 255));
      n += hist[v];
    }
    for (std::size_t i = 0; i < plane; ++i) p[i] = lut[p[i]];
  }
}

double linspace(double lo, double hi, int bin) { return lo + (hi - lo) * bin / 9.0; }

}  // namespace

void hflip(ImageU8& img) {
  const std::size_t s = img.side;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < s / 2; ++c) std::swap(img.at(ch, r, c), img.at(ch, r, s - 1 - c));
}

void rotate_degrees(ImageU8& img, double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(a), sn = std::sin(a);
  const double centre = (static_cast<double>(img.side) - 1.0) / 2.0;
  remap(img, [&](double r, double c) {
    const double dy = r - centre, dx = c - centre;
    return std::pair{centre - sn * dx + cs * dy, centre + cs * dx + sn * dy};
  });
}

void solarize(ImageU8& img, double threshold) {
  for (auto& p : img.px)
    if (p >= threshold) p = static_cast<std::uint8_t>(255 - p);
}

void apply_aa_op(ImageU8& img, AaOp op, int magnitude, bool negate) {
  if (magnitude < 0 || magnitude > 9)
    throw ValidationError("augment: magnitude bin " + std::to_string(magnitude) +
                          " outside 0..9");
  const double sign = negate ? -1.0 : 1.0;
  const double side = static_cast<double>(img.side);
  switch (op) {
    case AaOp::shear_x: {
      const double s = sign * linspace(0.0, 0.3, magnitude);
      remap(img, [s](double r, double c) { return std::pair{r, c + s * r}; });
      break;
    }
    case AaOp::shear_y: {
      const double s = sign * linspace(0.0, 0.3, magnitude);
      remap(img, [s](double r, double c) { return std::pair{r + s * c, c}; });
      break;
    }
    case AaOp::translate_x: {
      const double t = sign * std::trunc(linspace(0.0, 150.0 / 331.0 * side, magnitude));
      remap(img, [t](double r, double c) { return std::pair{r, c - t}; });
      break;
    }
    case AaOp::translate_y: {
      const double t = sign * std::trunc(linspace(0.0, 150.0 / 331.0 * side, magnitude));
      remap(img, [t](double r, double c) { return std::pair{r - t, c}; });
      break;
    }
    case AaOp::rotate:
      rotate_degrees(img, sign * linspace(0.0, 30.0, magnitude));
      break;
    case AaOp::color: {
      const double f = 1.0 + sign * linspace(0.0, 0.9, magnitude);
      const ImageU8 src = img;
      blend(img, f, [&](std::size_t, std::size_t r, std::size_t c) { return gray(src, r, c); });
      break;
    }
    case AaOp::contrast: {
      const double f = 1.0 + sign * linspace(0.0, 0.9, magnitude);
      double mean = 0.0;
      for (std::size_t r = 0; r < img.side; ++r)
        for (std::size_t c = 0; c < img.side; ++c) mean += gray(img, r, c);
      mean /= side * side;
      blend(img, f, [mean](std::size_t, std::size_t, std::size_t) { return mean; });
      break;
    }
    case AaOp::brightness: {
      const double f = 1.0 + sign * linspace(0.0, 0.9, magnitude);
      blend(img, f, [](std::size_t, std::size_t, std::size_t) { return 0.0; });
      break;
    }
    case AaOp::sharpness: {
      const double f = 1.0 + sign * linspace(0.0, 0.9, magnitude);
      ImageU8 blurred = img;
      const std::size_t s = img.side;
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t r = 1; r + 1 < s; ++r)
          for (std::size_t c = 1; c + 1 < s; ++c) {
            double acc = 4.0 * img.at(ch, r, c);
            for (int dr = -1; dr <= 1; ++dr)
              for (int dc = -1; dc <= 1; ++dc) acc += img.at(ch, r + dr, c + dc);
            blurred.at(ch, r, c) = to_u8(acc / 13.0);
          }
      blend(img, f, [&](std::size_t ch, std::size_t r, std::size_t c) {
        return static_cast<double>(blurred.at(ch, r, c));
      });
      break;
    }
    case AaOp::posterize: {
      const int bits = 8 - static_cast<int>(std::nearbyint(magnitude / 2.25));
      const auto mask = static_cast<std::uint8_t>(0xFF << (8 - bits));
      for (auto& p : img.px) p &= mask;
      break;
    }
    case AaOp::solarize:
      solarize(img, linspace(255.0, 0.0, magnitude));
      break;
    case AaOp::autocontrast:
      autocontrast(img);
      break;
    case AaOp::equalize:
      equalize(img);
      break;
    case AaOp::invert:
      for (auto& p : img.px) p = static_cast<std::uint8_t>(255 - p);
      break;
  }
}

namespace {

bool is_signed(AaOp op) {
  switch (op) {
    case AaOp::shear_x: case AaOp::shear_y: case AaOp::translate_x:
    case AaOp::translate_y: case AaOp::rotate: case AaOp::color:
    case AaOp::contrast: case AaOp::sharpness: case AaOp::brightness:
      return true;
    default:
      return false;
  }
}

std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

void pad_crop(ImageU8& img, Rng& rng) {
  constexpr long pad = 4;
  const long s = static_cast<long>(img.side);
  const long top = static_cast<long>(uniform_index(rng, 0, 2 * pad));
  const long left = static_cast<long>(uniform_index(rng, 0, 2 * pad));
  auto reflect = [s](long i) {
    if (i < 0) return -i;
    if (i >= s) return 2 * (s - 1) - i;
    return i;
  };
  ImageU8 out = img;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (long r = 0; r < s; ++r)
      for (long c = 0; c < s; ++c)
        out.at(ch, r, c) = img.at(ch, reflect(r + top - pad), reflect(c + left - pad));
  img = std::move(out);
}

}  // namespace

void base_augment(ImageU8& img, bool crop_flip, bool use_autoaugment, Rng& rng) {
  if (crop_flip) {
    pad_crop(img, rng);
    if (uniform01(rng) < 0.5) hflip(img);
  }
  if (use_autoaugment) {
    const auto& policy = cifar10_policy();
    const auto& sub = policy[uniform_index(rng, 0, policy.size() - 1)];
    for (const AaStage& st : {sub.first, sub.second}) {
      if (uniform01(rng) >= st.prob) continue;
      const bool negate = is_signed(st.op) && uniform01(rng) < 0.5;
      apply_aa_op(img, st.op, st.magnitude, negate);
    }
  }
}

// ---------------------------------------------------------------------------
// Mixing

namespace {

void check_mixable(const SoftBatch& batch, std::size_t shift) {
  const std::size_t b = batch.size();
  if (batch.targets.rank() != 2 || batch.targets.dim(0) != b)
    throw DimensionError("mix: images " + shape_str(batch.images.shape()) + " vs targets " +
                         shape_str(batch.targets.shape()));
  if (shift == 0 || shift >= b)
    throw ValidationError("mix: partner shift must lie in [1, B-1]");
}

bool warn_small(const SoftBatch& batch, const char* what) {
  if (batch.size() >= 2) return false;
  static bool warned = false;
  if (!warned) {
    std::cerr << "warning: " << what << " needs a batch of at least 2; skipped\n";
    warned = true;
  }
  return true;
}

std::size_t sample_shift(std::size_t b, Rng& rng) { return uniform_index(rng, 1, b - 1); }

void mix_targets(SoftBatch& batch, const Tensor<float>& orig, double lambda,
                 std::size_t shift) {
  const std::size_t b = batch.size(), k = orig.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t j = (i + shift) % b;
    for (std::size_t c = 0; c < k; ++c)
      batch.targets[i * k + c] =
          static_cast<float>(lambda * orig[i * k + c] + (1.0 - lambda) * orig[j * k + c]);
  }
}

}  // namespace

void mixup_with(SoftBatch& batch, double lambda, std::size_t shift) {
  check_mixable(batch, shift);
  const std::size_t b = batch.size(), n = batch.images.size() / b;
  const Tensor<float> images = batch.images, targets = batch.targets;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t j = (i + shift) % b;
    for (std::size_t e = 0; e < n; ++e)
      batch.images[i * n + e] =
          static_cast<float>(lambda * images[i * n + e] + (1.0 - lambda) * images[j * n + e]);
  }
  mix_targets(batch, targets, lambda, shift);
}

double cutmix_with(SoftBatch& batch, const CutBox& box, std::size_t shift) {
  check_mixable(batch, shift);
  const std::size_t b = batch.size(), h = batch.images.dim(2), w = batch.images.dim(3);
  if (box.top + box.height > h || box.left + box.width > w)
    throw ValidationError("cutmix: box exceeds image bounds");
  const std::size_t n = batch.images.size() / b, channels = batch.images.dim(1);
  const Tensor<float> images = batch.images, targets = batch.targets;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t j = (i + shift) % b;
    for (std::size_t ch = 0; ch < channels; ++ch)
      for (std::size_t r = box.top; r < box.top + box.height; ++r)
        for (std::size_t c = box.left; c < box.left + box.width; ++c) {
          const std::size_t off = (ch * h + r) * w + c;
          batch.images[i * n + off] = images[j * n + off];
        }
  }
  const double lambda_adj = 1.0 - static_cast<double>(box.area()) / static_cast<double>(h * w);
  mix_targets(batch, targets, lambda_adj, shift);
  return lambda_adj;
}

CutBox sample_cut_box(std::size_t side, double lambda, Rng& rng) {
  const double ratio = std::sqrt(std::clamp(1.0 - lambda, 0.0, 1.0));
  const long cut = static_cast<long>(static_cast<double>(side) * ratio);
  const long cy = static_cast<long>(uniform_index(rng, 0, side - 1));
  const long cx = static_cast<long>(uniform_index(rng, 0, side - 1));
  const long s = static_cast<long>(side);
  const long y1 = std::clamp(cy - cut / 2, 0L, s), y2 = std::clamp(cy + cut / 2, 0L, s);
  const long x1 = std::clamp(cx - cut / 2, 0L, s), x2 = std::clamp(cx + cut / 2, 0L, s);
  return {static_cast<std::size_t>(y1), static_cast<std::size_t>(x1),
          static_cast<std::size_t>(y2 - y1), static_cast<std::size_t>(x2 - x1)};
}

MixResult mixup(SoftBatch& batch, double alpha, Rng& rng) {
  if (warn_small(batch, "mixup")) return {};
  MixResult res;
  res.applied = true;
  res.lambda = beta_sample(rng, alpha, alpha);
  res.shift = sample_shift(batch.size(), rng);
  mixup_with(batch, res.lambda, res.shift);
  return res;
}

MixResult cutmix(SoftBatch& batch, double alpha, Rng& rng) {
  if (warn_small(batch, "cutmix")) return {};
  MixResult res;
  res.applied = true;
  const double lambda = beta_sample(rng, alpha, alpha);
  res.box = sample_cut_box(batch.images.dim(2), lambda, rng);
  res.shift = sample_shift(batch.size(), rng);
  res.lambda = cutmix_with(batch, res.box, res.shift);
  return res;
}

// ---------------------------------------------------------------------------
// Per-sample ops

EraseResult random_erase(std::span<float> image, std::size_t side, double prob,
                         std::array<double, 2> area, Rng& rng) {
  EraseResult res;
  if (prob <= 0.0 || uniform01(rng) >= prob) return res;
  const std::size_t plane = side * side, channels = image.size() / plane;
  const double log_lo = std::log(0.3), log_hi = std::log(3.3);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target =
        (area[0] + (area[1] - area[0]) * uniform01(rng)) * static_cast<double>(plane);
    const double aspect = std::exp(log_lo + (log_hi - log_lo) * uniform01(rng));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (h == 0 || w == 0 || h >= side || w >= side) continue;
    res.applied = true;
    res.box = {uniform_index(rng, 0, side - h), uniform_index(rng, 0, side - w), h, w};
    for (std::size_t ch = 0; ch < channels; ++ch)
      for (std::size_t r = res.box.top; r < res.box.top + h; ++r)
        for (std::size_t c = res.box.left; c < res.box.left + w; ++c)
          image[ch * plane + r * side + c] = static_cast<float>(standard_normal(rng));
    return res;
  }
  return res;
}

Tensor<float> label_smooth(const Tensor<float>& one_hot, double eps) {
  if (one_hot.rank() != 2)
    throw DimensionError("label_smooth: expected [B x C], got " + shape_str(one_hot.shape()));
  if (!(eps >= 0.0 && eps < 1.0))
    throw ValidationError("label_smooth: eps must lie in [0, 1)");
  const std::size_t b = one_hot.dim(0), k = one_hot.dim(1);
  const double off = eps / static_cast<double>(k), on = 1.0 - eps + off;
  Tensor<float> out({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const float v = one_hot[i * k + c];
      if (v != 0.0f && v != 1.0f)
        throw ValidationError("label_smooth: row " + std::to_string(i) + " is not one-hot");
      ones += v == 1.0f;
      out[i * k + c] = static_cast<float>(v == 1.0f ? on : off);
    }
    if (ones != 1)
      throw ValidationError("label_smooth: row " + std::to_string(i) + " is not one-hot");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

SoftBatch make_batch(const Dataset& ds, std::span<const std::size_t> rows,
                     const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t b = rows.size(), side = ds.image_size, k = ds.num_classes;
  const std::size_t n = ds.image_bytes();
  SoftBatch out;
  out.images = Tensor<float>({b, 3, side, side});
  out.sources.assign(rows.begin(), rows.end());
  Tensor<float> one_hot({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    if (rows[i] >= ds.size())
      throw ValidationError("make_batch: row " + std::to_string(rows[i]) + " out of range");
    ImageU8 img(side, ds.image(rows[i]));
    base_augment(img, cfg.use_crop_flip, cfg.use_autoaugment, rng);
    const Tensor<float> norm = normalize<float>(img.px, 1, side);
    std::span<float> dst = out.images.data().subspan(i * n, n);
    std::copy(norm.data().begin(), norm.data().end(), dst.begin());
    if (cfg.use_random_erasing) random_erase(dst, side, cfg.erase_prob, cfg.erase_area, rng);
    one_hot[i * k + ds.labels[rows[i]]] = 1.0f;
  }
  out.targets = label_smooth(one_hot, cfg.label_smoothing);

  bool use_mixup = cfg.use_mixup, use_cutmix = cfg.use_cutmix;
  if (use_mixup && use_cutmix) {
    const bool pick_mixup = uniform01(rng) < 0.5;
    use_mixup = pick_mixup;
    use_cutmix = !pick_mixup;
  }
  if (use_mixup) mixup(out, cfg.mixup_alpha, rng);
  if (use_cutmix) cutmix(out, cfg.cutmix_alpha, rng);
  return out;
}

SoftBatch repeated_augment(const Dataset& ds, std::span<const std::size_t> candidates,
                           std::size_t batch, std::size_t m, const AugmentConfig& cfg,
                           Rng& rng) {
  if (m < 1 || m > batch)
    throw ConfigError("repeated_augment: factor " + std::to_string(m) +
                      " must lie in [1, batch=" + std::to_string(batch) + "]");
  if (batch % m != 0)
    throw ConfigError("repeated_augment: factor " + std::to_string(m) +
                      " does not divide batch " + std::to_string(batch));
  const std::size_t distinct = batch / m;
  if (candidates.size() < distinct)
    throw ConfigError("repeated_augment: need " + std::to_string(distinct) +
                      " source samples, got " + std::to_string(candidates.size()));
  std::vector<std::size_t> rows;
  rows.reserve(batch);
  for (std::size_t i = 0; i < distinct; ++i) rows.insert(rows.end(), m, candidates[i]);
  return make_batch(ds, rows, cfg, rng);
}

}  // namespace tvl
