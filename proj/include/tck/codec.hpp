#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "tck/coder.hpp"
#include "tck/entropy.hpp"
#include "tck/network.hpp"
#include "tck/quantize.hpp"
#include "tck/serialize.hpp"

namespace tck {

// Registered per-item feature extents of one task port.
struct PortSpec {
  int task_id = 0;
  int channels = 16;
  int height = 8;
  int width = 8;
  friend bool operator==(const PortSpec&, const PortSpec&) = default;
};

enum class PriorKind { codebook, spatial };

struct CodecConfig {
  int port_channels = 8;    // aligned channels per port after the peripheral transform
  int peripheral_depth = 2;  // conv layers per peripheral transform; 0 = identity
  int latent_channels = 64;
  int analysis_downs = 2;    // stride-2 stages; 0 = identity analysis/synthesis
  PriorKind prior = PriorKind::codebook;
  CodebookPriorConfig codebook;  // latent_channels filled in by the codec
  SpatialPriorConfig spatial;
  QuantSpec quant;
  int precision = kDefaultPrecision;
  std::uint64_t seed = 1;
};

struct TaskPort {
  PortSpec spec;
  Network peripheral_in;
  Network peripheral_out;
};

inline constexpr std::uint16_t kContainerVersion = 1;

struct ContainerStream {
  std::uint16_t version = kContainerVersion;
  std::vector<std::uint16_t> task_ids;
  std::uint16_t latent[3] = {0, 0, 0};  // C, H, W
  std::uint16_t source[2] = {0, 0};     // H, W of the source image
  Digest digest{};
  BitStream side;
  BitStream latent_payload;

  // Transmitted payload octets, in bits.
  std::uint64_t payload_bits() const { return 8 * (side.bytes.size() + latent_payload.bytes.size()); }
  double bpp() const;

  // Layout: "TCKS", u16 version, u8 task count, u16 id per task, u16 x 3
  // latent extents, u16 x 2 source extents, 32-byte digest, u32 length +
  // side payload, u32 length + latent payload. Little-endian.
  Bytes serialize() const;
  static ContainerStream parse(std::span<const std::uint8_t> bytes);
};

struct CompressResult {
  ContainerStream stream;
  std::vector<Tensor> reconstruction;  // encoder-side decoded features
  SymbolGrid side_symbols;
  SymbolGrid latent_symbols;
  EntropyParams latent_params;
  double estimated_side_bits = 0.0;
  double estimated_latent_bits = 0.0;
};

struct DecompressResult {
  std::vector<Tensor> features;
  SymbolGrid side_symbols;
  SymbolGrid latent_symbols;
  EntropyParams latent_params;
};

class AggregateCodec {
 public:
  AggregateCodec(std::vector<PortSpec> ports, const CodecConfig& cfg);
  AggregateCodec(const AggregateCodec& other);
  AggregateCodec& operator=(const AggregateCodec& other);
  AggregateCodec(AggregateCodec&&) noexcept = default;
  AggregateCodec& operator=(AggregateCodec&&) noexcept = default;

  const CodecConfig& config() const { return cfg_; }
  const std::vector<TaskPort>& ports() const { return ports_; }
  std::vector<TaskPort>& ports() { return ports_; }
  Network& analysis() { return analysis_; }
  Network& synthesis() { return synthesis_; }
  HyperPrior& prior() { return *prior_; }
  const HyperPrior& prior() const { return *prior_; }

  // Per-item latent extents (C, H, W).
  Shape latent_shape() const;
  std::vector<Parameter*> parameters();
  void set_frozen(bool frozen);

  // Graph versions used by training. Features are batched (B, C, H, W).
  Var analyze(Graph& g, const std::vector<Var>& features);
  std::vector<Var> synthesize(Graph& g, Var z_hat);

  Tensor aggregate_analyze(const std::vector<Tensor>& features);
  std::vector<Tensor> aggregate_synthesize(const Tensor& z_hat);

  // One item per stream; features may be (C, H, W) or (1, C, H, W).
  CompressResult compress(const std::vector<Tensor>& features, int source_h, int source_w);
  DecompressResult decompress(const ContainerStream& stream);

  // Tables for the side latent and for z given the decoded side latent; the
  // only path from side symbols to latent probabilities on both ends.
  std::vector<CdfTable> side_tables(const Shape& side_shape);
  std::vector<CdfTable> latent_tables(const SymbolGrid& side, const Shape& z_shape, EntropyParams* params_out = nullptr);

  NamedArrays parameter_arrays();
  Digest digest();

  void save(const std::filesystem::path& path);
  static AggregateCodec load(const std::filesystem::path& path);
  Bytes serialize();
  static AggregateCodec deserialize(std::span<const std::uint8_t> bytes);

 private:
  void check_features(const std::vector<Shape>& shapes) const;

  CodecConfig cfg_;
  std::vector<TaskPort> ports_;
  Network analysis_;
  Network synthesis_;
  std::unique_ptr<HyperPrior> prior_;
};

// Feature file: array container with magic "TCKF" holding "task.<id>"
// arrays in port order and a two-element "source" array (H, W).
struct FeatureFile {
  std::vector<int> task_ids;
  std::vector<Tensor> features;
  int source_h = 0;
  int source_w = 0;
};

FeatureFile read_feature_file(const std::filesystem::path& path);
Bytes serialize_feature_file(const FeatureFile& f);
void write_feature_file(const std::filesystem::path& path, const FeatureFile& f);

}  // namespace tck
