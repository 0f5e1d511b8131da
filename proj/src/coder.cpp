#include "tck/coder.hpp"

#include <algorithm>
#include <cmath>

#include "tck/entropy.hpp"
#include "tck/errors.hpp"

namespace tck {

namespace {

constexpr std::uint32_t kTop = 1u << 24;

void check_precision(int precision) {
  if (precision < kMinPrecision || precision > kMaxPrecision) {
    throw DomainError("precision " + std::to_string(precision) + " outside [" + std::to_string(kMinPrecision) + ", " +
                      std::to_string(kMaxPrecision) + "]");
  }
}

const CdfTable& table_for(std::span<const CdfTable> tables, std::span<const int> index, std::size_t i) {
  const std::size_t t = index.empty() ? i : static_cast<std::size_t>(index[i]);
  if (t >= tables.size()) throw DomainError("table index " + std::to_string(t) + " out of range");
  return tables[t];
}

void check_addressing(std::size_t count, std::span<const CdfTable> tables, std::span<const int> index) {
  if (index.empty() ? tables.size() != count : index.size() != count) {
    throw ShapeError("need one table (or table index) per symbol: " + std::to_string(count) + " symbols, " +
                     std::to_string(index.empty() ? tables.size() : index.size()) + " given");
  }
}

}  // namespace

std::uint32_t CdfTable::freq(int symbol) const {
  const auto i = static_cast<std::size_t>(symbol - offset);
  return cum[i + 1] - cum[i];
}

double CdfTable::bits(int symbol) const {
  return static_cast<double>(precision) - std::log2(static_cast<double>(freq(symbol)));
}

CdfTable cdf_from_pmf(std::span<const double> pmf, int offset, int precision) {
  check_precision(precision);
  const std::uint64_t total = 1ull << precision;
  const std::size_t n = pmf.size();
  if (n == 0 || n >= total) throw DomainError("alphabet of " + std::to_string(n) + " symbols does not fit the precision");
  std::vector<std::uint64_t> counts(n);
  std::uint64_t used = 0;
  std::size_t best = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = pmf[i];
    if (!(p >= 0.0) || !std::isfinite(p)) throw DomainError("invalid probability in pmf");
    const double extra = std::floor(std::min(p, 1.0) * static_cast<double>(total - n));
    counts[i] = 1 + static_cast<std::uint64_t>(extra);
    used += counts[i];
    if (pmf[i] > pmf[best]) best = i;
  }
  if (used > total) throw DomainError("pmf sums above one");
  counts[best] += total - used;
  CdfTable t;
  t.precision = precision;
  t.offset = offset;
  t.cum.resize(n + 1);
  t.cum[0] = 0;
  for (std::size_t i = 0; i < n; ++i) t.cum[i + 1] = t.cum[i] + static_cast<std::uint32_t>(counts[i]);
  return t;
}

CdfTable build_cdf(double mu, double sigma, const QuantSpec& spec, int precision) {
  check_precision(precision);
  const auto pmf = pmf_vector(mu, sigma, spec);
  return cdf_from_pmf(pmf, spec.t_min, precision);
}

void RangeEncoder::shift_byte() {
  out_.push_back(static_cast<std::uint8_t>(low_ >> 24));
  low_ = (low_ << 8) & 0xFFFFFFFFull;
  range_ <<= 8;
}

void RangeEncoder::encode(int symbol, const CdfTable& table) {
  if (finished_) throw std::logic_error("encode after finish");
  if (!table.contains(symbol)) throw DomainError("symbol " + std::to_string(symbol) + " outside table alphabet");
  const auto i = static_cast<std::size_t>(symbol - table.offset);
  const std::uint64_t r = range_;
  const std::uint64_t a = (r * table.cum[i]) >> table.precision;
  const std::uint64_t b = (r * table.cum[i + 1]) >> table.precision;
  low_ += a;
  range_ = static_cast<std::uint32_t>(b - a);
  if (low_ > 0xFFFFFFFFull) {
    for (std::size_t k = out_.size(); k-- > 0;) {
      if (++out_[k] != 0) break;
    }
    low_ &= 0xFFFFFFFFull;
  }
  while (range_ < kTop) shift_byte();
}

BitStream RangeEncoder::finish() {
  if (finished_) throw std::logic_error("finish called twice");
  finished_ = true;
  // Pick the value in [low, low + range) with the most trailing zero bits.
  const std::uint64_t hi = low_ + range_ - 1;
  int kept = 0;
  std::uint64_t v = 0;
  for (kept = 0; kept <= 32; ++kept) {
    const std::uint64_t unit = 1ull << (32 - kept);
    v = (low_ + unit - 1) / unit * unit;
    if (v <= hi) break;
  }
  if (v > 0xFFFFFFFFull) {
    for (std::size_t k = out_.size(); k-- > 0;) {
      if (++out_[k] != 0) break;
    }
    v &= 0xFFFFFFFFull;
  }
  const std::size_t emitted = out_.size();
  for (int k = 0; k < (kept + 7) / 8; ++k) out_.push_back(static_cast<std::uint8_t>(v >> (24 - 8 * k)));
  BitStream s;
  s.bit_length = 8 * static_cast<std::uint64_t>(emitted) + static_cast<std::uint64_t>(kept);
  s.bytes = std::move(out_);
  return s;
}

RangeDecoder::RangeDecoder(const BitStream& stream) : stream_(stream) {
  const std::uint64_t n = stream.bytes.size();
  if (stream.bit_length > 8 * n || 8 * n > stream.bit_length + 7) {
    throw CorruptionError("bit stream of " + std::to_string(n) + " bytes cannot hold " +
                          std::to_string(stream.bit_length) + " bits (truncated?)");
  }
  for (int k = 0; k < 4; ++k) diff_ = (diff_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  const std::size_t n = stream_.bytes.size();
  if (pos_ < n) return stream_.bytes[pos_++];
  // Up to four implicit zero bytes complete the final flush.
  if (pos_ >= n + 4) throw CorruptionError("bit stream exhausted before all symbols were decoded");
  ++pos_;
  return 0;
}

int RangeDecoder::decode(const CdfTable& table) {
  if (diff_ >= range_) throw CorruptionError("range decoder out of sync (corrupt stream or mismatched tables)");
  const std::uint64_t r = range_;
  const std::uint64_t target = ((static_cast<std::uint64_t>(diff_) + 1) << table.precision) - 1;
  const std::uint64_t t = target / r;
  const auto it = std::upper_bound(table.cum.begin(), table.cum.end(), static_cast<std::uint32_t>(t));
  const std::size_t i = static_cast<std::size_t>(it - table.cum.begin()) - 1;
  if (t >= table.cum.back() || i + 1 >= table.cum.size()) {
    throw CorruptionError("decoded value outside the table (corrupt stream or mismatched tables)");
  }
  const std::uint64_t a = (r * table.cum[i]) >> table.precision;
  const std::uint64_t b = (r * table.cum[i + 1]) >> table.precision;
  diff_ -= static_cast<std::uint32_t>(a);
  range_ = static_cast<std::uint32_t>(b - a);
  while (range_ < kTop) {
    diff_ = (diff_ << 8) | next_byte();
    range_ <<= 8;
  }
  return table.offset + static_cast<int>(i);
}

BitStream encode_symbols(std::span<const std::int32_t> symbols, std::span<const CdfTable> tables,
                         std::span<const int> table_index) {
  check_addressing(symbols.size(), tables, table_index);
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (!table_for(tables, table_index, i).contains(symbols[i])) {
      throw DomainError("symbol " + std::to_string(symbols[i]) + " at position " + std::to_string(i) +
                        " outside its table alphabet");
    }
  }
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode(symbols[i], table_for(tables, table_index, i));
  return enc.finish();
}

std::vector<std::int32_t> decode_symbols(const BitStream& stream, std::span<const CdfTable> tables, std::size_t count,
                                         std::span<const int> table_index) {
  check_addressing(count, tables, table_index);
  RangeDecoder dec(stream);
  std::vector<std::int32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = dec.decode(table_for(tables, table_index, i));
  return out;
}

double table_bits(std::span<const std::int32_t> symbols, std::span<const CdfTable> tables,
                  std::span<const int> table_index) {
  check_addressing(symbols.size(), tables, table_index);
  double bits = 0.0;
  for (std::size_t i = 0; i < symbols.size(); ++i) bits += table_for(tables, table_index, i).bits(symbols[i]);
  return bits;
}

}  // namespace tck
