#include "tck/quantize.hpp"

#include <cmath>

#include "tck/errors.hpp"

namespace tck {

void QuantSpec::validate() const {
  if (!(t_min < 0 && 0 < t_max)) {
    throw DomainError("quantizer bounds must satisfy t_min < 0 < t_max, got [" + std::to_string(t_min) +
                      ", " + std::to_string(t_max) + "]");
  }
}

Tensor SymbolGrid::to_tensor() const {
  std::vector<double> d(symbols.begin(), symbols.end());
  return Tensor(shape, std::move(d));
}

int quantize_scalar(double x, int t_min, int t_max) {
  if (x <= t_min) return t_min;
  if (x >= t_max) return t_max;
  double r = std::round(x);
  // std::round breaks ties away from zero; pull exact halves back to even.
  if (std::abs(x - std::trunc(x)) == 0.5 && std::fmod(r, 2.0) != 0.0) r -= std::copysign(1.0, x);
  return static_cast<int>(r);
}

SymbolGrid quantize(const Tensor& x, const QuantSpec& spec) {
  spec.validate();
  if (spec.mode != QuantMode::hard) throw DomainError("quantize requires hard mode");
  SymbolGrid g;
  g.shape = x.shape();
  g.symbols.reserve(x.numel());
  for (double v : x.values()) {
    if (!std::isfinite(v)) throw DomainError("quantize: non-finite input element");
    g.symbols.push_back(quantize_scalar(v, spec.t_min, spec.t_max));
  }
  return g;
}

Tensor noise_proxy(const Tensor& x, Rng& rng) {
  Tensor out = x;
  for (double& v : out.storage()) {
    if (!std::isfinite(v)) throw DomainError("noise_proxy: non-finite input element");
    v += rng.centered_open();
  }
  return out;
}

}  // namespace tck
