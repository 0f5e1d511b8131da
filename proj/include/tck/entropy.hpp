#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tck/graph.hpp"
#include "tck/network.hpp"
#include "tck/quantize.hpp"
#include "tck/serialize.hpp"

namespace tck {

inline constexpr double kSigmaFloor = 0.04;

// Per-element Gaussian parameters governing a latent of the same shape.
struct EntropyParams {
  Tensor mu;
  Tensor sigma;

  void validate() const;
};

// Quantized spatial-dimension-free hyper vector with its zero-mean prior scales.
struct HyperVector {
  SymbolGrid values;  // (B, m)
  Tensor prior_scales;  // (m)
};

// Discretized Gaussian mass of symbol k; the boundary symbols absorb the tails.
double discretize_pmf(int k, double mu, double sigma, const QuantSpec& spec);
// Masses of every symbol of the alphabet, in order t_min..t_max.
std::vector<double> pmf_vector(double mu, double sigma, const QuantSpec& spec);
// Entropy in bits of the discretized Gaussian, by exact summation.
double discrete_entropy(double mu, double sigma, const QuantSpec& spec);
// Kullback-Leibler divergence D(p||q) in bits between two discretized Gaussians.
double discrete_kl(double mu_p, double sigma_p, double mu_q, double sigma_q, const QuantSpec& spec);

// Sum of -log2 q over all elements. Integer symbols or noised reals.
double rate_estimate(const SymbolGrid& z, const EntropyParams& params, const QuantSpec& spec);
double rate_estimate(const Tensor& z, const EntropyParams& params, const QuantSpec& spec);
double hyper_rate(const HyperVector& v, const QuantSpec& spec);

// Linear combination of codebook bases: coeffs (B, n, tau) or (n, tau),
// bases (tau, h, w) -> (B, n, h, w), then bilinear resampling to the target.
Tensor synthesize_hyperprior(const Tensor& coeffs, const Tensor& bases, int target_h, int target_w);
Var synthesize_hyperprior(Var coeffs, Var bases, int n, int target_h, int target_w);

// Side-information model: a hyper latent extracted from z and coded under a
// zero-mean Gaussian prior, from which the parameters of z are predicted.
class HyperPrior {
 public:
  virtual ~HyperPrior() = default;

  virtual std::string kind() const = 0;
  virtual std::unique_ptr<HyperPrior> clone() const = 0;
  virtual std::vector<Parameter*> parameters() = 0;

  // Continuous side latent.
  virtual Var analyze(Graph& g, Var z) = 0;
  // Prior scales for a side latent of the given shape.
  virtual Var side_scales(Graph& g, Shape side_shape) = 0;
  // (mu, sigma) for z of shape `z_shape`, from the quantized side latent.
  virtual std::pair<Var, Var> predict(Graph& g, Var side_hat, Shape z_shape) = 0;

  Tensor analyze(const Tensor& z);
  Tensor side_scales(Shape side_shape);
  EntropyParams predict(const Tensor& side_hat, Shape z_shape);

  std::vector<const Parameter*> parameters() const;
  NamedArrays export_arrays() const;
  // Throws CorruptionError when an array is missing or mis-shaped.
  void import_arrays(const NamedArrays& arrays);

  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen);

 protected:
  virtual std::vector<Network*> networks() = 0;
  bool frozen_ = false;
};

struct CodebookPriorConfig {
  int latent_channels = 64;
  int m = 64;           // hyper vector length
  int n = 32;           // synthesized channels
  int tau = 64;         // codebook size
  int hc = 16;          // basis extents
  int wc = 16;
  int coeff_hidden = 128;
  int predictor_width = 64;
  int hyper_downs = 1;  // stride-2 stages before pooling
  std::uint64_t seed = 1;
};

class CodebookPrior final : public HyperPrior {
 public:
  explicit CodebookPrior(const CodebookPriorConfig& cfg);

  std::string kind() const override { return "codebook"; }
  std::unique_ptr<HyperPrior> clone() const override { return std::make_unique<CodebookPrior>(*this); }
  std::vector<Parameter*> parameters() override;
  std::vector<Network*> networks() override;

  Var analyze(Graph& g, Var z) override;
  Var side_scales(Graph& g, Shape side_shape) override;
  std::pair<Var, Var> predict(Graph& g, Var side_hat, Shape z_shape) override;
  using HyperPrior::analyze;
  using HyperPrior::predict;
  using HyperPrior::side_scales;

  const CodebookPriorConfig& config() const { return cfg_; }
  Network& hyper_net() { return hyper_; }
  Network& coeff_net() { return coeff_; }
  Network& predictor() { return predictor_; }
  Parameter& codebook() { return codebook_; }
  Parameter& prior_raw() { return prior_raw_; }

  // Quantized hyper vector and its prior.
  HyperVector hyper_analyze(const Tensor& z, const QuantSpec& spec);
  // (B, n, tau) coefficient sequences decoded from the hyper vector.
  Tensor decode_coefficients(const Tensor& v);
  EntropyParams predict_params(const Tensor& v_z);

 private:
  CodebookPriorConfig cfg_;
  Network hyper_;
  Network coeff_;
  Network predictor_;
  Parameter codebook_;
  Parameter prior_raw_;
};

struct SpatialPriorConfig {
  int latent_channels = 64;
  int side_channels = 16;
  int width = 64;
  std::uint64_t seed = 1;
};

// Baseline with a spatial side latent at a quarter of the latent extents,
// per-channel zero-mean priors and a deconvolutional synthesis.
class SpatialPrior final : public HyperPrior {
 public:
  explicit SpatialPrior(const SpatialPriorConfig& cfg);

  std::string kind() const override { return "spatial"; }
  std::unique_ptr<HyperPrior> clone() const override { return std::make_unique<SpatialPrior>(*this); }
  std::vector<Parameter*> parameters() override;
  std::vector<Network*> networks() override;

  Var analyze(Graph& g, Var z) override;
  Var side_scales(Graph& g, Shape side_shape) override;
  std::pair<Var, Var> predict(Graph& g, Var side_hat, Shape z_shape) override;
  using HyperPrior::analyze;
  using HyperPrior::predict;
  using HyperPrior::side_scales;

 private:
  SpatialPriorConfig cfg_;
  Network hyper_;
  Network synth_;
  Parameter prior_raw_;
};

struct VectorPriorConfig {
  int feature_len = 64;
  int m = 16;
  int hidden = 128;
  std::uint64_t seed = 1;
};

// Vector-feature path: latents without spatial extents, (B, F).
class VectorPrior final : public HyperPrior {
 public:
  explicit VectorPrior(const VectorPriorConfig& cfg);

  std::string kind() const override { return "vector"; }
  std::unique_ptr<HyperPrior> clone() const override { return std::make_unique<VectorPrior>(*this); }
  std::vector<Parameter*> parameters() override;
  std::vector<Network*> networks() override;

  Var analyze(Graph& g, Var z) override;
  Var side_scales(Graph& g, Shape side_shape) override;
  std::pair<Var, Var> predict(Graph& g, Var side_hat, Shape z_shape) override;
  using HyperPrior::analyze;
  using HyperPrior::predict;
  using HyperPrior::side_scales;

  Network& hyper_net() { return hyper_; }
  Network& param_net() { return params_; }
  EntropyParams vector_predict_params(const Tensor& v);

 private:
  VectorPriorConfig cfg_;
  Network hyper_;
  Network params_;
  Parameter prior_raw_;
};

// Estimated bits of z under a prior: side bits + latent bits, differentiable.
struct RateTerms {
  Var side_bits;
  Var latent_bits;
  Var side_hat;
  Var mu;
  Var sigma;
};

// `z_in` is the noised or rounded latent; the side latent is extracted from it
// and then noised when an rng is supplied, rounded otherwise.
RateTerms rate_terms(Graph& g, HyperPrior& prior, Var z_in, const QuantSpec& spec, Rng* rng);

}  // namespace tck
