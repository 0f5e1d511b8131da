#pragma once

#include <cstdint>
#include <vector>

#include "tck/rng.hpp"
#include "tck/tensor.hpp"

namespace tck {

enum class QuantMode { hard, noise };

// Finite symbol alphabet [t_min, t_max] with t_min < 0 < t_max.
struct QuantSpec {
  int t_min = -127;
  int t_max = 127;
  QuantMode mode = QuantMode::hard;

  int alphabet_size() const { return t_max - t_min + 1; }
  void validate() const;
};

// Integer latent over a QuantSpec alphabet, shaped like its source tensor.
struct SymbolGrid {
  Shape shape;
  std::vector<std::int32_t> symbols;

  std::size_t size() const { return symbols.size(); }
  Tensor to_tensor() const;
  friend bool operator==(const SymbolGrid&, const SymbolGrid&) = default;
};

// Round half to even, then clamp to [t_min, t_max].
int quantize_scalar(double x, int t_min, int t_max);

SymbolGrid quantize(const Tensor& x, const QuantSpec& spec);
// x + u with u i.i.d. uniform on (-0.5, 0.5).
Tensor noise_proxy(const Tensor& x, Rng& rng);

}  // namespace tck
