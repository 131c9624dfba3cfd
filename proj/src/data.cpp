#include "tvl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include "tvl/rng.hpp"

namespace tvl {

namespace fs = std::filesystem;

void Dataset::validate() const {
  if (pixels.size() != labels.size() * image_bytes())
    throw ValidationError("dataset '" + name + "': " + std::to_string(pixels.size()) +
                          " pixel bytes for " + std::to_string(labels.size()) +
                          " labels");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= num_classes)
      throw ValidationError("dataset '" + name + "': label " +
                            std::to_string(labels[i]) + " at index " + std::to_string(i));
}

LoadError::LoadError(Kind kind, fs::path file, std::uint64_t offset,
                     const std::string& what)
    : std::runtime_error(what + " (" + file.string() + " @ byte " +
                         std::to_string(offset) + ")"),
      kind_(kind),
      file_(std::move(file)),
      offset_(offset) {}

Dataset load_cifar10_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError(LoadError::Kind::missing_file, file, 0, "cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecord != 0) {
    const std::uint64_t offset = bytes.size() / kCifarRecord * kCifarRecord;
    throw LoadError(LoadError::Kind::truncated_record, file, offset,
                    "truncated record: " + std::to_string(bytes.size() - offset) +
                        " of " + std::to_string(kCifarRecord) + " bytes");
  }
  Dataset ds;
  ds.name = file.filename().string();
  const std::size_t n = bytes.size() / kCifarRecord;
  ds.labels.resize(n);
  ds.pixels.resize(n * (kCifarRecord - 1));
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] > 9)
      throw LoadError(LoadError::Kind::bad_label, file, i * kCifarRecord,
                      "label byte " + std::to_string(rec[0]) + " out of range");
    ds.labels[i] = rec[0];
    std::copy(rec + 1, rec + kCifarRecord, ds.pixels.begin() + i * (kCifarRecord - 1));
  }
  return ds;
}

namespace {

std::vector<fs::path> split_files(const fs::path& dir, Split split) {
  if (split == Split::test) return {dir / "test_batch.bin"};
  std::vector<fs::path> files;
  for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  return files;
}

}  // namespace

Dataset load_cifar10(const fs::path& dir, Split split) {
  Dataset ds;
  ds.name = split == Split::train ? "cifar10-train" : "cifar10-test";
  ds.split = split;
  for (const auto& f : split_files(dir, split)) {
    Dataset part = load_cifar10_file(f);
    ds.labels.insert(ds.labels.end(), part.labels.begin(), part.labels.end());
    ds.pixels.insert(ds.pixels.end(), part.pixels.begin(), part.pixels.end());
  }
  return ds;
}

fs::path default_data_dir() {
  if (const char* env = std::getenv("DATA_DIR"); env && *env) return env;
  return "data/cifar-10-batches-bin";
}

bool cifar10_available(const fs::path& dir) {
  for (Split s : {Split::train, Split::test})
    for (const auto& f : split_files(dir, s))
      if (!fs::exists(f)) return false;
  return true;
}

Dataset subset_per_class(const Dataset& ds, std::size_t per_class) {
  Dataset out;
  out.name = ds.name + "-subset" + std::to_string(per_class);
  out.split = ds.split;
  out.image_size = ds.image_size;
  out.num_classes = ds.num_classes;
  std::vector<std::size_t> taken(ds.num_classes, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto label = ds.labels[i];
    if (taken[label] >= per_class) continue;
    ++taken[label];
    out.labels.push_back(label);
    const auto img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  return out;
}

template <typename T>
Tensor<T> normalize(std::span<const std::uint8_t> pixels, std::size_t count,
                    std::size_t side) {
  const std::size_t plane = side * side;
  if (pixels.size() != count * 3 * plane)
    throw DimensionError("normalize: " + std::to_string(pixels.size()) + " bytes for " +
                         std::to_string(count) + " images of side " +
                         std::to_string(side));
  Tensor<T> out({count, 3, side, side});
  for (std::size_t n = 0; n < count; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      const double mean = kCifarMean[c], sd = kCifarStd[c];
      const std::size_t base = (n * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i)
        out[base + i] = static_cast<T>((pixels[base + i] / 255.0 - mean) / sd);
    }
  return out;
}

template <typename T>
std::vector<std::uint8_t> denormalize(const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw DimensionError("denormalize: expected [N x 3 x S x S], got " +
                         shape_str(images.shape()));
  const std::size_t plane = images.dim(2) * images.dim(3);
  std::vector<std::uint8_t> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t c = (i / plane) % 3;
    const double v = (static_cast<double>(images[i]) * kCifarStd[c] + kCifarMean[c]) * 255.0;
    out[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return out;
}

template <typename T>
Tensor<T> normalized_images(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(indices.size() * ds.image_bytes());
  for (std::size_t i : indices) {
    const auto img = ds.image(i);
    bytes.insert(bytes.end(), img.begin(), img.end());
  }
  return normalize<T>(bytes, indices.size(), ds.image_size);
}

Dataset synthetic_dataset(SyntheticKind kind, std::size_t n, std::uint64_t seed,
                          const SyntheticOptions& opts) {
  if (n < 2) throw ConfigError("synthetic_dataset: need at least 2 samples");
  const std::size_t side = opts.image_size;
  Dataset ds;
  ds.name = kind == SyntheticKind::two_class_blobs ? "two-class-blobs" : "striped-patches";
  ds.image_size = side;
  ds.num_classes = 2;
  ds.labels.resize(n);
  ds.pixels.resize(n * ds.image_bytes());
  Rng rng = derive_rng(seed, {static_cast<std::uint64_t>(kind)});
  auto to_byte = [](double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  };

  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t label = static_cast<std::uint8_t>(i % 2);
    ds.labels[i] = label;
    std::uint8_t* px = ds.pixels.data() + i * ds.image_bytes();
    if (kind == SyntheticKind::two_class_blobs) {
      const double centre = 128.0 + (label == 0 ? -opts.blob_offset : opts.blob_offset);
      for (std::size_t j = 0; j < ds.image_bytes(); ++j)
        px[j] = to_byte(centre + opts.blob_noise * standard_normal(rng));
    } else {
      const std::size_t w = std::max<std::size_t>(1, opts.stripe_width);
      std::array<std::array<double, 3>, 2> level{};
      for (auto& ch : level[0]) ch = 140.0 + 75.0 * uniform01(rng);
      for (auto& ch : level[1]) ch = 40.0 + 75.0 * uniform01(rng);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t r = 0; r < side; ++r)
          for (std::size_t col = 0; col < side; ++col) {
            const std::size_t coord = label == 0 ? r : col;
            const std::size_t band = (coord / w) % 2;
            px[(c * side + r) * side + col] =
                to_byte(level[band][c] + 8.0 * standard_normal(rng));
          }
    }
  }
  return ds;
}

template Tensor<float> normalize<float>(std::span<const std::uint8_t>, std::size_t, std::size_t);
template Tensor<double> normalize<double>(std::span<const std::uint8_t>, std::size_t, std::size_t);
template std::vector<std::uint8_t> denormalize<float>(const Tensor<float>&);
template std::vector<std::uint8_t> denormalize<double>(const Tensor<double>&);
template Tensor<float> normalized_images<float>(const Dataset&, std::span<const std::size_t>);
template Tensor<double> normalized_images<double>(const Dataset&, std::span<const std::size_t>);

}  // namespace tvl
