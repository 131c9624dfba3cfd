#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "tvl/checkpoint.hpp"
#include "tvl/data.hpp"
#include "tvl/model.hpp"

using namespace tvl;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("tvl_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Records whose pixel bytes encode their own position: byte k of record i is
// (7 i + k) mod 251.
std::vector<std::uint8_t> position_records(std::size_t n, std::uint8_t label_base = 0) {
  std::vector<std::uint8_t> b(n * kCifarRecord);
  for (std::size_t i = 0; i < n; ++i) {
    b[i * kCifarRecord] = static_cast<std::uint8_t>((label_base + i) % 10);
    for (std::size_t k = 0; k < 3072; ++k)
      b[i * kCifarRecord + 1 + k] = static_cast<std::uint8_t>((7 * i + k) % 251);
  }
  return b;
}

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
}

}  // namespace

TEST_CASE("CIFAR-10 record layout") {
  const fs::path dir = scratch_dir("layout");
  write_bytes(dir / "one.bin", position_records(1));
  const Dataset one = load_cifar10_file(dir / "one.bin");
  CHECK(one.size() == 1);

  write_bytes(dir / "three.bin", position_records(3, 4));
  const Dataset ds = load_cifar10_file(dir / "three.bin");
  REQUIRE(ds.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(ds.labels[i] == (4 + i) % 10);
    const auto img = ds.image(i);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t r = 0; r < 32; ++r)
        for (std::size_t c = 0; c < 32; ++c) {
          const std::size_t k = ch * 1024 + r * 32 + c;
          REQUIRE(img[k] == (7 * i + k) % 251);
        }
  }
}

TEST_CASE("CIFAR-10 load errors carry file and offset") {
  const fs::path dir = scratch_dir("errors");
  try {
    load_cifar10_file(dir / "absent.bin");
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(e.kind() == LoadError::Kind::missing_file);
  }
  auto bytes = position_records(2);
  bytes.resize(bytes.size() - 5);
  write_bytes(dir / "short.bin", bytes);
  try {
    load_cifar10_file(dir / "short.bin");
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(e.kind() == LoadError::Kind::truncated_record);
    CHECK(e.offset() == kCifarRecord);
    CHECK(e.file() == dir / "short.bin");
  }
  auto bad = position_records(3);
  bad[2 * kCifarRecord] = 11;
  write_bytes(dir / "label.bin", bad);
  try {
    load_cifar10_file(dir / "label.bin");
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(e.kind() == LoadError::Kind::bad_label);
    CHECK(e.offset() == 2 * kCifarRecord);
    CHECK(std::string(e.what()).find("label.bin") != std::string::npos);
  }
}

TEST_CASE("CIFAR-10 directory splits") {
  const fs::path dir = scratch_dir("splits");
  CHECK_FALSE(cifar10_available(dir));
  for (int i = 1; i <= 5; ++i)
    write_bytes(dir / ("data_batch_" + std::to_string(i) + ".bin"), position_records(2, i));
  CHECK_FALSE(cifar10_available(dir));
  write_bytes(dir / "test_batch.bin", position_records(4));
  CHECK(cifar10_available(dir));
  const Dataset tr = load_cifar10(dir, Split::train);
  CHECK(tr.size() == 10);
  CHECK(tr.split == Split::train);
  CHECK(tr.labels[2] == 2);  // first record of data_batch_2
  CHECK(load_cifar10(dir, Split::test).size() == 4);
}

TEST_CASE("normalisation constants and exact inversion") {
  std::vector<std::uint8_t> px(3 * 4 * 4, 0);
  for (std::size_t k = 0; k < 16; ++k) px[k] = 255;  // R plane
  const auto t = normalize<double>(px, 1, 4);
  CHECK(t[0] == doctest::Approx((1.0 - 0.4914) / 0.2470));
  CHECK(t[0] == doctest::Approx(2.0591).epsilon(1e-4));
  CHECK(t[32] == doctest::Approx(-0.4465 / 0.2616));
  CHECK(t[32] == doctest::Approx(-1.7068).epsilon(1e-4));

  std::vector<std::uint8_t> all(3 * 16 * 16);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint8_t>(i % 256);
  CHECK(denormalize(normalize<float>(all, 1, 16)) == all);
  CHECK(denormalize(normalize<double>(all, 1, 16)) == all);
  CHECK_THROWS_AS(normalize<float>(all, 2, 16), DimensionError);
}

TEST_CASE("synthetic datasets") {
  for (auto kind : {SyntheticKind::two_class_blobs, SyntheticKind::striped_patches}) {
    const Dataset a = synthetic_dataset(kind, 101, 5), b = synthetic_dataset(kind, 101, 5);
    CHECK(a.pixels == b.pixels);
    CHECK(a.labels == b.labels);
    CHECK(synthetic_dataset(kind, 101, 6).pixels != a.pixels);
    std::size_t ones = 0;
    for (auto l : a.labels) ones += l;
    CHECK(std::abs(static_cast<double>(ones) - 50.5) <= 1.0);
    CHECK_NOTHROW(a.validate());
  }
  CHECK_THROWS_AS(synthetic_dataset(SyntheticKind::two_class_blobs, 1, 0), ConfigError);

  // Mean pixel value separates the blob classes.
  const Dataset blobs = synthetic_dataset(SyntheticKind::two_class_blobs, 400, 7);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    double s = 0;
    for (auto v : blobs.image(i)) s += v;
    correct += (s / blobs.image_bytes() > 128.0) == (blobs.labels[i] == 1);
  }
  CHECK(correct == blobs.size());
}

TEST_CASE("striped patches differ only in arrangement") {
  SyntheticOptions o;
  const Dataset ds = synthetic_dataset(SyntheticKind::striped_patches, 40, 8, o);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto img = ds.image(i);
    // Class 0 bands vary with the row, class 1 with the column; neighbours
    // inside a band differ only by pixel noise.
    double along_rows = 0, along_cols = 0;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t r = 0; r < 32; ++r)
        for (std::size_t c = 1; c < 32; ++c) {
          const auto at = [&](std::size_t y, std::size_t x) {
            return static_cast<double>(img[(ch * 32 + y) * 32 + x]);
          };
          along_rows += std::pow(at(r, c) - at(r, c - 1), 2);
          along_cols += std::pow(at(c, r) - at(c - 1, r), 2);
        }
    CHECK((along_rows < along_cols) == (ds.labels[i] == 0));
  }
}

TEST_CASE("subset per class keeps dataset order") {
  Dataset ds = synthetic_dataset(SyntheticKind::two_class_blobs, 20, 9);
  const Dataset s = subset_per_class(ds, 3);
  CHECK(s.size() == 6);
  std::vector<std::size_t> expect;
  std::size_t c0 = 0, c1 = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if ((ds.labels[i] == 0 && c0++ < 3) || (ds.labels[i] == 1 && c1++ < 3)) expect.push_back(i);
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(s.labels[k] == ds.labels[expect[k]]);
    CHECK(std::equal(s.image(k).begin(), s.image(k).end(), ds.image(expect[k]).begin()));
  }
}

TEST_CASE("checkpoint round trip of a fresh model with optimiser state") {
  Rng rng(1);
  ModelConfig cfg;
  cfg.embed_dim = 32;
  cfg.num_heads = 4;
  cfg.depth = 2;
  cfg.mla.variant = MlaVariant::kv;
  cfg.mla.d_c = 8;
  const auto m = init_model<float>(cfg, rng);
  Checkpoint ck;
  ck.config = "dim=32\ndepth=2\n";
  ck.tensors = m.params;
  OptimState<float> st;
  st.hyper = OptimHyper::defaults(OptimizerKind::adamw);
  st.step = 17;
  for (const auto& [k, v] : m.params) {
    st.m.emplace(k, v);
    st.v.emplace(k, Tensor<float>(v.shape(), 0.5f));
  }
  ck.optim = st;
  rng();
  ck.rng = rng_state(rng);
  ck.epoch = 3;
  ck.step = 42;
  const fs::path dir = scratch_dir("ckpt");
  save_checkpoint(dir / "a.tvlb", ck);
  CHECK_FALSE(fs::exists(dir / "a.tvlb.tmp"));
  const Checkpoint back = load_checkpoint(dir / "a.tvlb");
  CHECK(back == ck);
  for (const auto& [k, v] : ck.tensors)
    CHECK(std::memcmp(v.data().data(), back.tensors.at(k).data().data(), v.size() * 4) == 0);
  Rng restored;
  set_rng_state(restored, back.rng);
  CHECK(restored() == rng());

  Checkpoint lion = ck;
  lion.optim->hyper = OptimHyper::defaults(OptimizerKind::lion);
  lion.optim->v.clear();
  CHECK(decode_checkpoint(encode_checkpoint(lion)) == lion);
  Checkpoint bare = ck;
  bare.optim.reset();
  CHECK(decode_checkpoint(encode_checkpoint(bare)) == bare);
}

TEST_CASE("checkpoint bytes follow the documented layout") {
  Checkpoint ck;
  ck.config = "a=1";
  ck.tensors.emplace("w", Tensor<float>({1, 2}, {1.0f, -2.0f}));
  ck.rng = "7";
  ck.epoch = 2;
  ck.step = 9;

  std::vector<std::uint8_t> want{'T', 'V', 'L', 'B'};
  append_le<std::uint16_t>(want, 1);
  append_le<std::uint16_t>(want, 4);
  // CONF(3) TENS(4 + 2 + 1 + 1 + 8 + 8 = 24) RNG (1) META(16), bodies from 8 + 4 * 20.
  const std::uint64_t base = 8 + 4 * 20;
  const std::pair<const char*, std::uint64_t> entries[] = {
      {"CONF", 3}, {"TENS", 24}, {"RNG ", 1}, {"META", 16}};
  std::uint64_t off = base;
  for (auto [tag, len] : entries) {
    want.insert(want.end(), tag, tag + 4);
    append_le<std::uint64_t>(want, off);
    append_le<std::uint64_t>(want, len);
    off += len;
  }
  want.insert(want.end(), {'a', '=', '1'});
  append_le<std::uint32_t>(want, 1);
  append_le<std::uint16_t>(want, 1);
  want.push_back('w');
  want.push_back(2);
  append_le<std::uint32_t>(want, 1);
  append_le<std::uint32_t>(want, 2);
  append_le<std::uint32_t>(want, 0x3f800000u);
  append_le<std::uint32_t>(want, 0xc0000000u);
  want.push_back('7');
  append_le<std::uint64_t>(want, 2);
  append_le<std::uint64_t>(want, 9);
  CHECK(encode_checkpoint(ck) == want);
}

TEST_CASE("checkpoint errors are distinct") {
  Checkpoint ck;
  ck.tensors.emplace("w", Tensor<float>({3}, 1.0f));
  const auto good = encode_checkpoint(ck);
  auto kind_of = [](std::vector<std::uint8_t> b) {
    try {
      decode_checkpoint(b);
    } catch (const CheckpointError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(kind_of(bad_magic) == static_cast<int>(CheckpointError::Kind::bad_magic));
  auto newer = good;
  newer[4] = 2;
  CHECK(kind_of(newer) == static_cast<int>(CheckpointError::Kind::version));
  for (std::size_t cut : {std::size_t{2}, std::size_t{7}, std::size_t{30}, good.size() - 1}) {
    auto shorter = good;
    shorter.resize(cut);
    const int k = kind_of(shorter);
    CHECK((k == static_cast<int>(CheckpointError::Kind::length) ||
           k == static_cast<int>(CheckpointError::Kind::bad_magic)));
  }
  auto tr = good;
  tr.resize(good.size() - 1);
  CHECK(kind_of(tr) == static_cast<int>(CheckpointError::Kind::length));

  // A section with an unknown tag is skipped.
  Checkpoint plain;
  plain.tensors.emplace("w", Tensor<float>({2}, 0.25f));
  auto bytes = encode_checkpoint(plain);
  std::memcpy(bytes.data() + 8, "XTRA", 4);  // CONF entry renamed
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.tensors == plain.tensors);

  CHECK_THROWS_AS(load_checkpoint(scratch_dir("none") / "missing.tvlb"), CheckpointError);
}
