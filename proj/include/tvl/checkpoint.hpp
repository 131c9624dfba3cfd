#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tvl/model.hpp"
#include "tvl/optim.hpp"

namespace tvl {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version, length, format };

  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Everything needed to resume training at an epoch boundary. Byte layout is
/// described in docs/checkpoint_format.md.
struct Checkpoint {
  std::string config;        // key=value lines
  ParamMap<float> tensors;
  std::optional<OptimState<float>> optim;
  std::string rng;           // serialized generator state
  std::uint64_t epoch = 0;   // completed epochs
  std::uint64_t step = 0;    // completed optimizer steps

  bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes to `<path>.tmp`, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tvl
