#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tck/tensor.hpp"

namespace tck {

using Bytes = std::vector<std::uint8_t>;
using Digest = std::array<std::uint8_t, 32>;

// Little-endian primitive writer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void raw(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void text(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  const Bytes& bytes() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

// Bounds-checked little-endian reader; throws CorruptionError on overrun.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : buf_(b) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::span<const std::uint8_t> raw(std::size_t n);
  std::string text(std::size_t n);

  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

using NamedArray = std::pair<std::string, Tensor>;
using NamedArrays = std::vector<NamedArray>;

inline constexpr std::uint16_t kArrayFormatVersion = 1;

// Array container: 4-byte magic, u16 version, u32 array count, then per array
// u32 name length, UTF-8 name, u32 rank, rank x u32 extents, f64 payload.
Bytes serialize_arrays(std::string_view magic, const NamedArrays& arrays);
NamedArrays parse_arrays(std::span<const std::uint8_t> bytes, std::string_view magic);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
// Writes to a sibling temporary and renames, so readers never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void write_arrays(const std::filesystem::path& path, std::string_view magic, const NamedArrays& arrays);
NamedArrays read_arrays(const std::filesystem::path& path, std::string_view magic);

const Tensor& find_array(const NamedArrays& arrays, std::string_view name);

Digest sha256(std::span<const std::uint8_t> bytes);
std::string to_hex(std::span<const std::uint8_t> bytes);

}  // namespace tck
