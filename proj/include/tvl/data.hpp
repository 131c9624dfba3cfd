#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tvl/tensor.hpp"

namespace tvl {

enum class Split { train, test };

/// Raw 8-bit images stored [N x 3 x S x S] (plane-major per image, like the
/// CIFAR-10 binary records) with one class index per image.
struct Dataset {
  std::string name;
  Split split = Split::train;
  std::size_t image_size = 32;
  std::size_t num_classes = 10;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return 3 * image_size * image_size; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * image_bytes(), image_bytes());
  }
  void validate() const;
};

class LoadError : public std::runtime_error {
 public:
  enum class Kind { missing_file, truncated_record, bad_label };

  LoadError(Kind kind, std::filesystem::path file, std::uint64_t offset,
            const std::string& what);

  Kind kind() const { return kind_; }
  const std::filesystem::path& file() const { return file_; }
  std::uint64_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::filesystem::path file_;
  std::uint64_t offset_;
};

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;  // 3073
inline constexpr std::array<double, 3> kCifarMean{0.4914, 0.4822, 0.4465};
inline constexpr std::array<double, 3> kCifarStd{0.2470, 0.2435, 0.2616};

/// Reads one binary batch file; record i starts at byte i*3073.
Dataset load_cifar10_file(const std::filesystem::path& file);

/// data_batch_1..5.bin for train, test_batch.bin for test.
Dataset load_cifar10(const std::filesystem::path& dir, Split split);

/// $DATA_DIR if set, else "data/cifar-10-batches-bin".
std::filesystem::path default_data_dir();

/// True when every file of both splits exists under `dir`.
bool cifar10_available(const std::filesystem::path& dir);

/// First `per_class` images of each class, in dataset order.
Dataset subset_per_class(const Dataset& ds, std::size_t per_class);

/// Bytes [count x 3 x S x S] -> x/255 then per-channel (x - mean) / std.
template <typename T>
Tensor<T> normalize(std::span<const std::uint8_t> pixels, std::size_t count,
                    std::size_t side);

/// Inverse of normalize, rounded and clamped to [0, 255].
template <typename T>
std::vector<std::uint8_t> denormalize(const Tensor<T>& images);

/// Images [indices.size() x 3 x S x S] for the given dataset rows.
template <typename T>
Tensor<T> normalized_images(const Dataset& ds, std::span<const std::size_t> indices);

enum class SyntheticKind { two_class_blobs, striped_patches };

struct SyntheticOptions {
  std::size_t image_size = 32;
  /// Blobs: per-pixel class offset and noise, in byte units.
  double blob_offset = 40.0;
  double blob_noise = 20.0;
  /// Stripes: band width in pixels (align with the patch size).
  std::size_t stripe_width = 4;
};

/// Deterministic given the seed. Labels alternate so classes stay balanced
/// within one. Blobs: every pixel is 128 +- offset plus Gaussian noise.
/// Striped patches: class 0 has horizontal bands, class 1 vertical. The band
/// at index 0 is the brighter one; intensities are drawn per image. Both
/// classes contain the same patches, only their arrangement differs.
Dataset synthetic_dataset(SyntheticKind kind, std::size_t n, std::uint64_t seed,
                          const SyntheticOptions& opts = {});

}  // namespace tvl
