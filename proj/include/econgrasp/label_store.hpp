#pragma once

// Fixed little-endian binary formats for dense and economic labels.
//
//   dense     "DGL1" u32 version, n_points, n_views, n_angles, n_depths
//             then per (p, v, a, d): u8 mu code (255 infeasible), u8 collide, f32 width
//   economic  "EGL1" u32 version, n_scene_points, n_views
//             then per point: 3 x f32 position, f32 point graspness,
//             n_views x f32 view graspness,
//             n_views x {u8 angle, u8 depth, u8 score class (255 infeasible), f32 width}

#include "econgrasp/economic_labels.hpp"
#include "econgrasp/synth.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace econgrasp {

class FormatError : public Error {
 public:
  using Error::Error;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class LengthMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class IoError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::uint32_t kDenseVersion = 1;
inline constexpr std::uint32_t kEconomicVersion = 1;
inline constexpr std::size_t kDenseHeaderBytes = 24;
inline constexpr std::size_t kDenseEntryBytes = 6;
inline constexpr std::size_t kEconomicHeaderBytes = 16;
inline constexpr std::size_t kEconomicPointBytes = 16;
inline constexpr std::size_t kEconomicViewBytes = 11;  // f32 graspness + 7-byte record

inline std::uint64_t dense_file_bytes(std::uint64_t n_points, std::uint64_t n_views, std::uint64_t n_angles,
                                      std::uint64_t n_depths) {
  return kDenseHeaderBytes + n_points * n_views * n_angles * n_depths * kDenseEntryBytes;
}

inline std::uint64_t economic_file_bytes(std::uint64_t n_points, std::uint64_t n_views) {
  return kEconomicHeaderBytes + n_points * (kEconomicPointBytes + n_views * kEconomicViewBytes);
}

namespace detail {

class ByteWriter {
 public:
  void bytes(const char* data, std::size_t n) { buf_.insert(buf_.end(), data, data + n); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  const std::vector<char>& data() const { return buf_; }
  void reserve(std::size_t n) { buf_.reserve(n); }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}
  std::size_t remaining() const { return data_.size() - pos_; }
  std::uint8_t u8() { return static_cast<std::uint8_t>(data_[pos_++]); }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string tag() {
    std::string s(data_.data() + pos_, 4);
    pos_ += 4;
    return s;
  }

 private:
  std::span<const char> data_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void check_header(ByteReader& in, std::size_t header_bytes, const char* magic, std::uint32_t version,
                         const char* what) {
  if (in.remaining() < header_bytes) throw LengthMismatchError(std::string(what) + ": truncated header");
  if (in.tag() != magic) throw BadMagicError(std::string(what) + ": bad magic");
  const std::uint32_t v = in.u32();
  if (v != version) throw VersionMismatchError(std::string(what) + ": unsupported version " + std::to_string(v));
}

}  // namespace detail

inline std::vector<char> encode_dense(const DenseObjectLabels& labels) {
  detail::ByteWriter w;
  w.reserve(dense_file_bytes(labels.n_points(), labels.n_views(), labels.n_angles(), labels.n_depths()));
  w.bytes("DGL1", 4);
  w.u32(kDenseVersion);
  w.u32(static_cast<std::uint32_t>(labels.n_points()));
  w.u32(static_cast<std::uint32_t>(labels.n_views()));
  w.u32(static_cast<std::uint32_t>(labels.n_angles()));
  w.u32(static_cast<std::uint32_t>(labels.n_depths()));
  for (const DenseEntry& e : labels.entries()) {
    w.u8(e.mu_code);
    w.u8(e.collide);
    w.f32(e.width);
  }
  return w.data();
}

inline DenseObjectLabels decode_dense(std::span<const char> data) {
  detail::ByteReader in(data);
  detail::check_header(in, kDenseHeaderBytes, "DGL1", kDenseVersion, "dense labels");
  const std::uint32_t n_points = in.u32(), n_views = in.u32(), n_angles = in.u32(), n_depths = in.u32();
  if (n_views == 0 || n_angles == 0 || n_depths == 0) throw FormatError("dense labels: zero-sized grid");
  const std::uint64_t expected = dense_file_bytes(n_points, n_views, n_angles, n_depths);
  if (data.size() != expected) {
    throw LengthMismatchError("dense labels: expected " + std::to_string(expected) + " bytes, found " +
                              std::to_string(data.size()));
  }
  DenseObjectLabels labels(static_cast<int>(n_points), static_cast<int>(n_views), static_cast<int>(n_angles),
                           static_cast<int>(n_depths));
  for (DenseEntry& e : labels.entries()) {
    e.mu_code = in.u8();
    e.collide = in.u8();
    e.width = in.f32();
  }
  return labels;
}

inline void write_dense(const std::filesystem::path& path, const DenseObjectLabels& labels) {
  detail::write_file(path, encode_dense(labels));
}

inline DenseObjectLabels read_dense(const std::filesystem::path& path) {
  return decode_dense(detail::read_file(path));
}

inline std::vector<char> encode_economic(const EconomicSceneLabels& labels) {
  detail::ByteWriter w;
  w.reserve(economic_file_bytes(labels.size(), labels.n_views()));
  w.bytes("EGL1", 4);
  w.u32(kEconomicVersion);
  w.u32(static_cast<std::uint32_t>(labels.size()));
  w.u32(static_cast<std::uint32_t>(labels.n_views()));
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const Eigen::Vector3f& p = labels.point(k);
    w.f32(p.x());
    w.f32(p.y());
    w.f32(p.z());
    w.f32(labels.point_graspness(k));
    for (float g : labels.view_graspness(k)) w.f32(g);
    for (const BestGrasp& b : labels.best(k)) {
      w.u8(b.angle);
      w.u8(b.depth);
      w.u8(b.score_class);
      w.f32(b.width);
    }
  }
  return w.data();
}

inline EconomicSceneLabels decode_economic(std::span<const char> data) {
  detail::ByteReader in(data);
  detail::check_header(in, kEconomicHeaderBytes, "EGL1", kEconomicVersion, "economic labels");
  const std::uint32_t n_points = in.u32(), n_views = in.u32();
  if (n_views == 0) throw FormatError("economic labels: zero views");
  const std::uint64_t expected = economic_file_bytes(n_points, n_views);
  if (data.size() != expected) {
    throw LengthMismatchError("economic labels: expected " + std::to_string(expected) + " bytes, found " +
                              std::to_string(data.size()));
  }
  EconomicSceneLabels labels(static_cast<int>(n_views));
  for (std::uint32_t k = 0; k < n_points; ++k) {
    Eigen::Vector3f p;
    p.x() = in.f32();
    p.y() = in.f32();
    p.z() = in.f32();
    const std::size_t row = labels.add_point(p);
    labels.point_graspness(row) = in.f32();
    for (float& g : labels.view_graspness(row)) g = in.f32();
    for (BestGrasp& b : labels.best(row)) {
      b.angle = in.u8();
      b.depth = in.u8();
      b.score_class = in.u8();
      b.width = in.f32();
      if (b.score_class != kInfeasible && b.score_class >= kScoreClasses) {
        throw FormatError("economic labels: score class out of range");
      }
    }
  }
  return labels;
}

inline void write_economic(const std::filesystem::path& path, const EconomicSceneLabels& labels) {
  detail::write_file(path, encode_economic(labels));
}

inline EconomicSceneLabels read_economic(const std::filesystem::path& path) {
  return decode_economic(detail::read_file(path));
}

struct SizeReport {
  std::uint64_t dense_bytes = 0;
  std::uint64_t economic_bytes = 0;
  double ratio = 0.0;  // dense / economic
};

/// Sums on-disk sizes. A dense file may appear once per scene that uses it:
/// that is what a dense loader reads for the scene.
inline SizeReport size_report(std::span<const std::filesystem::path> dense_files,
                              std::span<const std::filesystem::path> economic_files) {
  SizeReport r;
  for (const auto& f : dense_files) {
    if (!std::filesystem::exists(f)) throw IoError("missing dense label file " + f.string());
    r.dense_bytes += std::filesystem::file_size(f);
  }
  for (const auto& f : economic_files) {
    if (!std::filesystem::exists(f)) throw IoError("missing economic label file " + f.string());
    r.economic_bytes += std::filesystem::file_size(f);
  }
  r.ratio = r.economic_bytes == 0 ? 0.0 : static_cast<double>(r.dense_bytes) / static_cast<double>(r.economic_bytes);
  return r;
}

}  // namespace econgrasp
