#pragma once

#include <cmath>
#include <limits>
#include <numbers>

namespace tck::gauss {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kInvSqrt2 = 0.70710678118654752440;
// Lower bound applied to interval probabilities inside rate estimates.
inline constexpr double kLikelihoodFloor = 1e-9;

inline double cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
inline double survival(double x) { return 0.5 * std::erfc(x * kInvSqrt2); }
inline double pdf(double x) {
  return std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi * kInvSqrt2);
}

// Standard normal mass of [lo, hi]; either end may be infinite. Evaluated on
// whichever tail keeps both terms away from cancellation.
inline double interval_mass(double lo, double hi) {
  if (lo > 0.0) return survival(lo) - (hi == kInf ? 0.0 : survival(hi));
  return (hi == kInf ? 1.0 : cdf(hi)) - (lo == -kInf ? 0.0 : cdf(lo));
}

struct ElementBits {
  double bits = 0.0;
  double d_value = 0.0;
  double d_mean = 0.0;
  double d_scale = 0.0;
};

// -log2 of the discretized Gaussian mass of the unit interval centred at
// `value`. Intervals touching the alphabet boundary extend to infinity so the
// boundary symbols absorb the tails.
inline ElementBits element_bits(double value, double mean, double scale, int t_min, int t_max,
                                bool with_grad) {
  const bool lo_open = value <= t_min + 0.5;
  const bool hi_open = value >= t_max - 0.5;
  const double a = (value - 0.5 - mean) / scale;
  const double b = (value + 0.5 - mean) / scale;
  const double p = interval_mass(lo_open ? -kInf : a, hi_open ? kInf : b);
  ElementBits out;
  if (!(p > kLikelihoodFloor)) {
    out.bits = -std::log2(kLikelihoodFloor);
    return out;
  }
  out.bits = -std::log2(p);
  if (with_grad) {
    const double pa = lo_open ? 0.0 : pdf(a);
    const double pb = hi_open ? 0.0 : pdf(b);
    const double dp_dvalue = (pb - pa) / scale;
    const double dp_dscale = -((hi_open ? 0.0 : b * pb) - (lo_open ? 0.0 : a * pa)) / scale;
    const double dbits_dp = -1.0 / (p * std::numbers::ln2);
    out.d_value = dbits_dp * dp_dvalue;
    out.d_mean = -out.d_value;
    out.d_scale = dbits_dp * dp_dscale;
  }
  return out;
}

}  // namespace tck::gauss
