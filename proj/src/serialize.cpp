#include "tck/serialize.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tck/errors.hpp"

namespace tck {

void ByteWriter::u16(std::uint16_t v) {
  u8(static_cast<std::uint8_t>(v));
  u8(static_cast<std::uint8_t>(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteReader::need(std::size_t n) const {
  if (buf_.size() - pos_ < n) {
    throw CorruptionError("truncated payload: need " + std::to_string(n) + " bytes at offset " +
                          std::to_string(pos_) + ", " + std::to_string(buf_.size() - pos_) + " remain");
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return buf_[pos_++];
}

std::uint16_t ByteReader::u16() {
  need(2);
  const std::uint16_t v = static_cast<std::uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::span<const std::uint8_t> ByteReader::raw(std::size_t n) {
  need(n);
  auto s = buf_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::string ByteReader::text(std::size_t n) {
  auto s = raw(n);
  return std::string(s.begin(), s.end());
}

Bytes serialize_arrays(std::string_view magic, const NamedArrays& arrays) {
  if (magic.size() != 4) throw std::invalid_argument("array container magic must be 4 bytes");
  ByteWriter w;
  w.text(magic);
  w.u16(kArrayFormatVersion);
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.text(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : t.values()) w.f64(v);
  }
  return w.take();
}

NamedArrays parse_arrays(std::span<const std::uint8_t> bytes, std::string_view magic) {
  ByteReader r(bytes);
  if (r.remaining() < 4 || r.text(4) != magic) {
    throw CorruptionError("bad magic: expected \"" + std::string(magic) + "\"");
  }
  const std::uint16_t version = r.u16();
  if (version != kArrayFormatVersion) {
    throw VersionError("unsupported " + std::string(magic) + " format version " + std::to_string(version) +
                       " (this build reads version " + std::to_string(kArrayFormatVersion) + ")");
  }
  const std::uint32_t count = r.u32();
  NamedArrays out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    std::string name = r.text(len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CorruptionError("implausible rank " + std::to_string(rank) + " for " + name);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint32_t e = r.u32();
      if (e == 0 || e > (1u << 28)) throw CorruptionError("bad extent in array " + name);
      shape.push_back(static_cast<int>(e));
      n *= e;
    }
    if (n * 8 > r.remaining()) throw CorruptionError("truncated payload for array " + name);
    std::vector<double> data(n);
    for (double& v : data) v = r.f64();
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after array container");
  return out;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PrerequisiteError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".partial";
  write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

void write_arrays(const std::filesystem::path& path, std::string_view magic, const NamedArrays& arrays) {
  write_file_atomic(path, serialize_arrays(magic, arrays));
}

NamedArrays read_arrays(const std::filesystem::path& path, std::string_view magic) {
  return parse_arrays(read_file(path), magic);
}

const Tensor& find_array(const NamedArrays& arrays, std::string_view name) {
  for (const auto& [n, t] : arrays) {
    if (n == name) return t;
  }
  throw CorruptionError("missing array \"" + std::string(name) + "\"");
}

Digest sha256(std::span<const std::uint8_t> bytes) {
  Digest d{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), d.data(), &len, EVP_sha256(), nullptr) != 1 || len != d.size()) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  return d;
}

std::string to_hex(std::span<const std::uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

}  // namespace tck
