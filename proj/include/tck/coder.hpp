#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tck/quantize.hpp"
#include "tck/serialize.hpp"

namespace tck {

// Frozen integer CDF over symbols offset .. offset + size() - 1. cum has
// size() + 1 entries, strictly increasing from 0 to 2^precision.
struct CdfTable {
  int precision = 16;
  int offset = 0;
  std::vector<std::uint32_t> cum;

  int size() const { return static_cast<int>(cum.size()) - 1; }
  bool contains(int symbol) const { return symbol >= offset && symbol < offset + size(); }
  std::uint32_t freq(int symbol) const;
  // -log2 of the quantized probability.
  double bits(int symbol) const;
  friend bool operator==(const CdfTable&, const CdfTable&) = default;
};

inline constexpr int kMinPrecision = 8;
inline constexpr int kMaxPrecision = 16;
inline constexpr int kDefaultPrecision = 16;

// Every symbol receives 1 + floor(p * (2^precision - size)) counts; the
// remainder goes to the most probable symbol (lowest index on ties).
CdfTable cdf_from_pmf(std::span<const double> pmf, int offset, int precision);
CdfTable build_cdf(double mu, double sigma, const QuantSpec& spec, int precision = kDefaultPrecision);

struct BitStream {
  Bytes bytes;
  std::uint64_t bit_length = 0;
  friend bool operator==(const BitStream&, const BitStream&) = default;
};

// Range coder: 32-bit low/range registers, byte-wise renormalisation while
// range < 2^24, big-endian bytes with carry propagation, and a final flush
// of the 4 bytes of a value inside the last interval. Trailing zero bits of
// that value are not stored; the decoder reads missing bytes as zero.
class RangeEncoder {
 public:
  void encode(int symbol, const CdfTable& table);
  BitStream finish();

 private:
  void shift_byte();
  std::uint64_t low_ = 0;  // 32 bits plus a carry bit
  std::uint32_t range_ = 0xFFFFFFFFu;
  Bytes out_;
  bool finished_ = false;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(const BitStream& stream);
  int decode(const CdfTable& table);

 private:
  std::uint8_t next_byte();
  const BitStream& stream_;
  std::size_t pos_ = 0;
  std::uint32_t diff_ = 0;  // code - low
  std::uint32_t range_ = 0xFFFFFFFFu;
};

// Tables addressed per symbol through `table_index`, or one table per symbol
// when the index is empty. Symbols outside their table are rejected before
// any bits are produced.
BitStream encode_symbols(std::span<const std::int32_t> symbols, std::span<const CdfTable> tables,
                         std::span<const int> table_index = {});
std::vector<std::int32_t> decode_symbols(const BitStream& stream, std::span<const CdfTable> tables,
                                         std::size_t count, std::span<const int> table_index = {});

// Sum of table bits for the sequence.
double table_bits(std::span<const std::int32_t> symbols, std::span<const CdfTable> tables,
                  std::span<const int> table_index = {});

}  // namespace tck
