#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "tvl/augment.hpp"
#include "tvl/data.hpp"

using namespace tvl;

namespace {

// B samples whose pixels are distinct across samples: sample i holds values
// in [10 i, 10 i + 1).
SoftBatch tagged_batch(std::size_t B, std::size_t side, Rng& rng, std::size_t classes = 10) {
  SoftBatch b;
  b.images = Tensor<float>({B, 3, side, side});
  b.targets = Tensor<float>({B, classes}, 0.0f);
  const std::size_t per = 3 * side * side;
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t k = 0; k < per; ++k)
      b.images[i * per + k] = static_cast<float>(10.0 * i + uniform01(rng));
    b.targets.at(i, i % classes) = 1.0f;
    b.sources.push_back(i);
  }
  return b;
}

bool rows_are_distributions(const Tensor<float>& t, double tol = 1e-6) {
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < t.dim(1); ++c) {
      if (t.at(r, c) < 0.0f) return false;
      s += t.at(r, c);
    }
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

ImageU8 random_image(std::size_t side, Rng& rng) {
  ImageU8 img;
  img.side = side;
  img.px.resize(3 * side * side);
  for (auto& p : img.px) p = static_cast<std::uint8_t>(uniform01(rng) * 256.0);
  return img;
}

Dataset ten_class_dataset(std::size_t n, std::uint64_t seed) {
  Dataset ds = synthetic_dataset(SyntheticKind::two_class_blobs, n, seed);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<std::uint8_t>(i % 10);
  ds.num_classes = 10;
  return ds;
}

}  // namespace

TEST_CASE("config validation") {
  AugmentConfig c;
  CHECK_NOTHROW(c.validate());
  c.erase_prob = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AugmentConfig{};
  c.label_smoothing = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AugmentConfig{};
  c.erase_area = {0.0, 0.3};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AugmentConfig{};
  c.repeated_factor = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("label smoothing") {
  Tensor<float> oh({2, 10}, 0.0f);
  oh.at(0, 3) = 1.0f;
  oh.at(1, 9) = 1.0f;
  const auto s = label_smooth(oh, 0.1);
  for (std::size_t c = 0; c < 10; ++c) {
    CHECK(s.at(0, c) == doctest::Approx(c == 3 ? 0.91 : 0.01).epsilon(1e-6));
    CHECK(s.at(1, c) == doctest::Approx(c == 9 ? 0.91 : 0.01).epsilon(1e-6));
  }
  CHECK(rows_are_distributions(s));
  CHECK(label_smooth(oh, 0.0) == oh);
  Tensor<float> bad({1, 10}, 0.1f);
  CHECK_THROWS_AS(label_smooth(bad, 0.1), ValidationError);
}

TEST_CASE("mixup endpoints and midpoint") {
  Rng rng(1);
  SoftBatch b = tagged_batch(4, 8, rng);
  const SoftBatch orig = b;
  mixup_with(b, 1.0, 1);
  CHECK(b.images == orig.images);
  CHECK(b.targets == orig.targets);

  SoftBatch two;
  two.images = Tensor<float>({2, 3, 4, 4}, 0.0f);
  for (std::size_t k = 48; k < 96; ++k) two.images[k] = 1.0f;
  two.targets = Tensor<float>({2, 10}, 0.0f);
  two.targets.at(0, 0) = 1.0f;
  two.targets.at(1, 1) = 1.0f;
  mixup_with(two, 0.5, 1);
  for (float v : two.images.data()) CHECK(v == 0.5f);
  CHECK(two.targets.at(0, 0) == 0.5f);
  CHECK(two.targets.at(0, 1) == 0.5f);
}

TEST_CASE("mixup outputs are convex combinations and distributions") {
  Rng rng(2);
  for (int draw = 0; draw < 1000; ++draw) {
    SoftBatch b = tagged_batch(6, 8, rng);
    const SoftBatch orig = b;
    const MixResult r = mixup(b, 0.8, rng);
    REQUIRE(r.applied);
    CHECK(r.shift >= 1);
    CHECK(r.shift < 6);
    CHECK(rows_are_distributions(b.targets));
    const std::size_t per = 3 * 64;
    bool convex = true;
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t j = (i + r.shift) % 6;
      for (std::size_t k = 0; k < per; ++k) {
        const float a = orig.images[i * per + k], c = orig.images[j * per + k];
        const float y = b.images[i * per + k];
        convex = convex && y >= std::min(a, c) - 1e-5f && y <= std::max(a, c) + 1e-5f;
      }
    }
    CHECK(convex);
  }
}

TEST_CASE("cutmix box area and corrected lambda") {
  Rng rng(3);
  SoftBatch b = tagged_batch(2, 32, rng);
  const double lam = cutmix_with(b, CutBox{4, 8, 16, 16}, 1);
  CHECK(lam == 0.75);
  SoftBatch c = tagged_batch(2, 32, rng);
  const SoftBatch orig = c;
  CHECK(cutmix_with(c, CutBox{3, 3, 0, 0}, 1) == 1.0);
  CHECK(c.images == orig.images);
  CHECK(c.targets == orig.targets);
}

TEST_CASE("cutmix mixed-pixel fraction equals one minus lambda") {
  Rng rng(4);
  const std::size_t B = 4, S = 32, per = 3 * S * S;
  for (int draw = 0; draw < 1000; ++draw) {
    SoftBatch b = tagged_batch(B, S, rng);
    const SoftBatch orig = b;
    const MixResult r = cutmix(b, 1.0, rng);
    REQUIRE(r.applied);
    CHECK(rows_are_distributions(b.targets));
    for (std::size_t i = 0; i < B; ++i) {
      const std::size_t j = (i + r.shift) % B;
      std::size_t from_partner = 0, exact = 0;
      for (std::size_t k = 0; k < per; ++k) {
        const float y = b.images[i * per + k];
        from_partner += y == orig.images[j * per + k];
        exact += y == orig.images[i * per + k] || y == orig.images[j * per + k];
      }
      CHECK(exact == per);
      CHECK(from_partner == 3 * r.box.area());
      CHECK(static_cast<double>(from_partner) / per == doctest::Approx(1.0 - r.lambda).epsilon(1e-12));
      CHECK(b.targets.at(i, j % 10) == doctest::Approx(1.0 - r.lambda).epsilon(1e-6));
    }
  }
}

TEST_CASE("batches of one are left alone") {
  Rng rng(5);
  SoftBatch b = tagged_batch(1, 8, rng);
  const SoftBatch orig = b;
  CHECK_FALSE(mixup(b, 0.8, rng).applied);
  CHECK_FALSE(cutmix(b, 1.0, rng).applied);
  CHECK(b.images == orig.images);
}

TEST_CASE("cut box stays inside the image") {
  Rng rng(6);
  for (int i = 0; i < 2000; ++i) {
    const double lam = uniform01(rng);
    const CutBox box = sample_cut_box(32, lam, rng);
    CHECK(box.top + box.height <= 32);
    CHECK(box.left + box.width <= 32);
    CHECK(box.area() <= static_cast<std::size_t>(std::ceil((1 - lam) * 1024)) + 64);
  }
  CHECK(sample_cut_box(32, 1.0, rng).area() == 0);
}

TEST_CASE("random erasing") {
  Rng rng(7);
  std::vector<float> img(3 * 32 * 32, 7.0f);
  CHECK_FALSE(random_erase(img, 32, 0.0, {0.02, 0.33}, rng).applied);
  for (float v : img) CHECK(v == 7.0f);

  double sum = 0, sum2 = 0;
  std::size_t n = 0;
  for (int draw = 0; draw < 500; ++draw) {
    std::vector<float> x(3 * 32 * 32, 7.0f);
    const EraseResult r = random_erase(x, 32, 1.0, {0.25, 0.25}, rng);
    REQUIRE(r.applied);
    std::size_t changed = 0;
    for (float v : x)
      if (v != 7.0f) {
        ++changed;
        sum += v;
        sum2 += static_cast<double>(v) * v;
        ++n;
      }
    CHECK(changed == 3 * r.box.area());
    // lround of h and w moves the area by at most h + w + 1 pixels.
    const double slack = static_cast<double>(r.box.height + r.box.width + 1);
    CHECK(std::abs(static_cast<double>(r.box.area()) - 256.0) <= slack);
    CHECK(r.box.top + r.box.height <= 32);
    CHECK(r.box.left + r.box.width <= 32);
  }
  const double mean = sum / n, sd = std::sqrt(sum2 / n - mean * mean);
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(sd - 1.0) < 0.01);
}

TEST_CASE("AutoAugment policy file matches the embedded table") {
  std::ifstream in(std::string(TVL_SOURCE_DIR) + "/data/autoaugment_cifar10.txt");
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto parsed = parse_policy(ss.str());
  CHECK(parsed.size() == 25);
  CHECK(parsed == cifar10_policy());
  CHECK_THROWS_AS(parse_policy("rotate,0.5,3"), ValidationError);
  CHECK_THROWS_AS(parse_policy("warp,0.5,3;invert,0.1,0"), ValidationError);
  CHECK(parse_aa_op(to_string(AaOp::sharpness)) == AaOp::sharpness);
}

TEST_CASE("geometric and colour primitives") {
  Rng rng(8);
  const ImageU8 img = random_image(32, rng);
  ImageU8 f = img;
  hflip(f);
  CHECK(f.px != img.px);
  CHECK(f.at(1, 5, 0) == img.at(1, 5, 31));
  hflip(f);
  CHECK(f.px == img.px);

  for (AaOp op : {AaOp::rotate, AaOp::shear_x, AaOp::shear_y, AaOp::translate_x,
                  AaOp::translate_y, AaOp::color, AaOp::contrast, AaOp::brightness,
                  AaOp::sharpness}) {
    ImageU8 z = img;
    apply_aa_op(z, op, 0, false);
    CHECK_MESSAGE(z.px == img.px, to_string(op));
  }
  ImageU8 r = img;
  rotate_degrees(r, 0.0);
  CHECK(r.px == img.px);

  for (int t : {0, 1, 77, 128, 255}) {
    ImageU8 s = img;
    solarize(s, t);
    for (std::size_t i = 0; i < img.px.size(); ++i)
      CHECK(s.px[i] == (img.px[i] >= t ? 255 - img.px[i] : img.px[i]));
  }
  ImageU8 inv = img;
  apply_aa_op(inv, AaOp::invert, 5);
  for (std::size_t i = 0; i < img.px.size(); ++i) CHECK(inv.px[i] == 255 - img.px[i]);
  ImageU8 post = img;
  apply_aa_op(post, AaOp::posterize, 9);
  for (std::size_t i = 0; i < img.px.size(); ++i)
    CHECK(post.px[i] == (img.px[i] & 0xF0));
}

TEST_CASE("base augment keeps geometry and is seed-deterministic") {
  Rng src(9);
  const ImageU8 img = random_image(32, src);
  for (bool aa : {false, true}) {
    Rng a(10), b(10);
    for (int i = 0; i < 200; ++i) {
      ImageU8 x = img, y = img;
      base_augment(x, true, aa, a);
      base_augment(y, true, aa, b);
      CHECK(x.px == y.px);
      CHECK(x.px.size() == img.px.size());
    }
  }
  Rng c(11);
  ImageU8 same = img;
  base_augment(same, false, false, c);
  CHECK(same.px == img.px);
}

TEST_CASE("pipeline with every stage off is normalisation only") {
  const Dataset ds = ten_class_dataset(12, 1);
  std::vector<std::size_t> rows{0, 5, 3, 11};
  Rng rng(12);
  const SoftBatch b = make_batch(ds, rows, AugmentConfig::none(), rng);
  CHECK(b.images == normalized_images<float>(ds, rows));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < 10; ++c)
      CHECK(b.targets.at(i, c) == (c == ds.labels[rows[i]] ? 1.0f : 0.0f));
  CHECK(b.sources == rows);
}

TEST_CASE("full pipeline targets stay distributions and are seed-deterministic") {
  const Dataset ds = ten_class_dataset(40, 2);
  AugmentConfig cfg;
  std::vector<std::size_t> rows(8);
  for (int draw = 0; draw < 100; ++draw) {
    for (std::size_t i = 0; i < 8; ++i) rows[i] = (draw * 7 + i * 5) % 40;
    Rng a = derive_rng(3, {static_cast<std::uint64_t>(draw)});
    Rng b = derive_rng(3, {static_cast<std::uint64_t>(draw)});
    const SoftBatch x = make_batch(ds, rows, cfg, a);
    const SoftBatch y = make_batch(ds, rows, cfg, b);
    CHECK(x.images == y.images);
    CHECK(x.targets == y.targets);
    CHECK(rows_are_distributions(x.targets));
    CHECK(x.images.all_finite());
  }
}

TEST_CASE("repeated augment") {
  const Dataset ds = ten_class_dataset(40, 3);
  AugmentConfig cfg = AugmentConfig::none();
  cfg.use_crop_flip = true;
  cfg.use_autoaugment = true;
  std::vector<std::size_t> cand(40);
  for (std::size_t i = 0; i < 40; ++i) cand[i] = (i * 13) % 40;
  Rng rng(13);
  const SoftBatch b = repeated_augment(ds, cand, 8, 2, cfg, rng);
  CHECK(b.size() == 8);
  std::map<std::size_t, int> counts;
  for (auto s : b.sources) ++counts[s];
  CHECK(counts.size() == 4);
  for (const auto& [s, n] : counts) CHECK(n == 2);
  // Copies of one source are augmented independently.
  const std::size_t per = 3 * 32 * 32;
  std::size_t differing = 0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = i + 1; j < 8; ++j)
      if (b.sources[i] == b.sources[j] &&
          !std::equal(b.images.data().begin() + i * per, b.images.data().begin() + (i + 1) * per,
                      b.images.data().begin() + j * per))
        ++differing;
  CHECK(differing == 4);

  Rng r1(14), r2(14);
  const SoftBatch one = repeated_augment(ds, cand, 8, 1, cfg, r1);
  std::vector<std::size_t> first(cand.begin(), cand.begin() + 8);
  CHECK(one.images == make_batch(ds, first, cfg, r2).images);

  CHECK_THROWS_AS(repeated_augment(ds, cand, 8, 9, cfg, rng), ConfigError);
  CHECK_THROWS_AS(repeated_augment(ds, cand, 8, 3, cfg, rng), ConfigError);
  CHECK_THROWS_AS(repeated_augment(ds, cand, 8, 0, cfg, rng), ConfigError);
}
