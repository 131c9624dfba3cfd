#include "tvl/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace tvl {

namespace {

using Tag = std::array<char, 4>;
constexpr Tag kMagic{'T', 'V', 'L', 'B'};
constexpr Tag kConf{'C', 'O', 'N', 'F'};
constexpr Tag kTens{'T', 'E', 'N', 'S'};
constexpr Tag kOptm{'O', 'P', 'T', 'M'};
constexpr Tag kRng{'R', 'N', 'G', ' '};
constexpr Tag kMeta{'M', 'E', 'T', 'A'};
constexpr std::size_t kHeaderBytes = 8;
constexpr std::size_t kEntryBytes = 20;

class Writer {
 public:
  std::vector<std::uint8_t> bytes;

  template <typename U>
  void put(U v) {
    auto u = static_cast<std::make_unsigned_t<U>>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i)
      bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, const char* what) : bytes_(b), what_(what) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::make_unsigned_t<U> u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      u |= static_cast<std::make_unsigned_t<U>>(static_cast<std::make_unsigned_t<U>>(bytes_[pos_ + i])
                                                << (8 * i));
    pos_ += sizeof(U);
    return static_cast<U>(u);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::span<const std::uint8_t> get_raw(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(CheckpointError::Kind::length,
                            std::string("checkpoint: section ") + what_ + " ends early at byte " +
                                std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

void put_tensors(Writer& w, const ParamMap<float>& tensors, const std::string& prefix) {
  for (const auto& [name, t] : tensors) {
    const std::string full = prefix + name;
    if (full.size() > 0xFFFF || t.rank() > 0xFF)
      throw CheckpointError(CheckpointError::Kind::format, "checkpoint: tensor '" + full +
                                                               "' name or rank too large");
    w.put(static_cast<std::uint16_t>(full.size()));
    w.put_raw(full.data(), full.size());
    w.put(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.put_f32(v);
  }
}

std::pair<std::string, Tensor<float>> get_tensor(Reader& r) {
  const auto name_len = r.get<std::uint16_t>();
  const auto name_bytes = r.get_raw(name_len);
  std::string name(name_bytes.begin(), name_bytes.end());
  const auto rank = r.get<std::uint8_t>();
  Shape shape(rank);
  for (auto& d : shape) {
    d = r.get<std::uint32_t>();
    if (d == 0)
      throw CheckpointError(CheckpointError::Kind::length,
                            "checkpoint: tensor '" + name + "' has a zero extent");
  }
  std::vector<float> data(shape_numel(shape));
  const auto raw = r.get_raw(data.size() * 4);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(raw[i * 4 + b]) << (8 * b);
    data[i] = std::bit_cast<float>(u);
  }
  return {std::move(name), Tensor<float>(std::move(shape), std::move(data))};
}

std::vector<std::uint8_t> encode_tens(const ParamMap<float>& tensors) {
  Writer w;
  w.put(static_cast<std::uint32_t>(tensors.size()));
  put_tensors(w, tensors, "");
  return w.bytes;
}

std::vector<std::uint8_t> encode_optm(const OptimState<float>& st) {
  Writer w;
  w.put(static_cast<std::uint8_t>(st.hyper.kind == OptimizerKind::adamw ? 0 : 1));
  w.put_f64(st.hyper.lr_peak);
  w.put_f64(st.hyper.beta1);
  w.put_f64(st.hyper.beta2);
  w.put_f64(st.hyper.eps);
  w.put_f64(st.hyper.weight_decay);
  w.put(st.step);
  w.put(static_cast<std::uint32_t>(st.m.size() + st.v.size()));
  put_tensors(w, st.m, "m/");
  put_tensors(w, st.v, "v/");
  return w.bytes;
}

OptimState<float> decode_optm(std::span<const std::uint8_t> b) {
  Reader r(b, "OPTM");
  OptimState<float> st;
  const auto kind = r.get<std::uint8_t>();
  if (kind > 1)
    throw CheckpointError(CheckpointError::Kind::format,
                          "checkpoint: unknown optimizer code " + std::to_string(kind));
  st.hyper.kind = kind == 0 ? OptimizerKind::adamw : OptimizerKind::lion;
  st.hyper.lr_peak = r.get_f64();
  st.hyper.beta1 = r.get_f64();
  st.hyper.beta2 = r.get_f64();
  st.hyper.eps = r.get_f64();
  st.hyper.weight_decay = r.get_f64();
  st.step = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = get_tensor(r);
    if (name.rfind("m/", 0) == 0)
      st.m.emplace(name.substr(2), std::move(t));
    else if (name.rfind("v/", 0) == 0)
      st.v.emplace(name.substr(2), std::move(t));
    else
      throw CheckpointError(CheckpointError::Kind::format,
                            "checkpoint: optimizer buffer '" + name + "' lacks m/ or v/");
  }
  if (!r.done())
    throw CheckpointError(CheckpointError::Kind::length, "checkpoint: trailing OPTM bytes");
  return st;
}

std::string tag_str(const Tag& t) { return std::string(t.begin(), t.end()); }

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::pair<Tag, std::vector<std::uint8_t>>> sections;
  sections.push_back({kConf, {ck.config.begin(), ck.config.end()}});
  sections.push_back({kTens, encode_tens(ck.tensors)});
  if (ck.optim) sections.push_back({kOptm, encode_optm(*ck.optim)});
  sections.push_back({kRng, {ck.rng.begin(), ck.rng.end()}});
  {
    Writer w;
    w.put(ck.epoch);
    w.put(ck.step);
    sections.push_back({kMeta, w.bytes});
  }

  Writer w;
  w.put_raw(kMagic.data(), 4);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint16_t>(sections.size()));
  std::uint64_t offset = kHeaderBytes + kEntryBytes * sections.size();
  for (const auto& [tag, body] : sections) {
    w.put_raw(tag.data(), 4);
    w.put(offset);
    w.put(static_cast<std::uint64_t>(body.size()));
    offset += body.size();
  }
  for (const auto& s : sections) w.put_raw(s.second.data(), s.second.size());
  return w.bytes;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0)
    throw CheckpointError(CheckpointError::Kind::bad_magic, "checkpoint: missing TVLB magic");
  Reader head(bytes.subspan(4), "header");
  const auto version = head.get<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Kind::version,
                          "checkpoint: format version " + std::to_string(version) +
                              " (this build reads " + std::to_string(kCheckpointVersion) + ")");
  const auto count = head.get<std::uint16_t>();

  Checkpoint ck;
  bool seen_tens = false, seen_meta = false;
  for (std::uint16_t i = 0; i < count; ++i) {
    Tag tag;
    const auto raw = head.get_raw(4);
    std::copy(raw.begin(), raw.end(), tag.begin());
    const auto offset = head.get<std::uint64_t>();
    const auto length = head.get<std::uint64_t>();
    if (offset > bytes.size() || length > bytes.size() - offset)
      throw CheckpointError(CheckpointError::Kind::length,
                            "checkpoint: section " + tag_str(tag) + " [" +
                                std::to_string(offset) + ", +" + std::to_string(length) +
                                ") exceeds file size " + std::to_string(bytes.size()));
    const auto body = bytes.subspan(offset, length);
    if (tag == kConf) {
      ck.config.assign(body.begin(), body.end());
    } else if (tag == kRng) {
      ck.rng.assign(body.begin(), body.end());
    } else if (tag == kTens) {
      Reader r(body, "TENS");
      const auto n = r.get<std::uint32_t>();
      for (std::uint32_t k = 0; k < n; ++k) {
        auto [name, t] = get_tensor(r);
        ck.tensors.emplace(std::move(name), std::move(t));
      }
      if (!r.done())
        throw CheckpointError(CheckpointError::Kind::length, "checkpoint: trailing TENS bytes");
      seen_tens = true;
    } else if (tag == kOptm) {
      ck.optim = decode_optm(body);
    } else if (tag == kMeta) {
      Reader r(body, "META");
      ck.epoch = r.get<std::uint64_t>();
      ck.step = r.get<std::uint64_t>();
      seen_meta = true;
    }
    // Unknown tags are skipped.
  }
  if (!seen_tens || !seen_meta)
    throw CheckpointError(CheckpointError::Kind::format,
                          "checkpoint: TENS and META sections are required");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw CheckpointError(CheckpointError::Kind::io, "checkpoint: cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out)
      throw CheckpointError(CheckpointError::Kind::io,
                            "checkpoint: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw CheckpointError(CheckpointError::Kind::io,
                          "checkpoint: rename to " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw CheckpointError(CheckpointError::Kind::io, "checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace tvl
