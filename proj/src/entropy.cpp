#include "tck/entropy.hpp"

#include <cmath>

#include "tck/errors.hpp"
#include "tck/gaussian.hpp"
#include "tck/ops.hpp"

namespace tck {

namespace {

void check_sigma(double sigma) {
  if (!(sigma >= kSigmaFloor) || !std::isfinite(sigma)) {
    throw DomainError("scale " + std::to_string(sigma) + " below floor " + std::to_string(kSigmaFloor));
  }
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

Parameter make_raw(const std::string& name, int len, double init) { return {name, Tensor({len}, init), {}}; }

}  // namespace

void EntropyParams::validate() const {
  if (mu.shape() != sigma.shape()) {
    throw ShapeError("mu " + shape_str(mu.shape()) + " and sigma " + shape_str(sigma.shape()) + " differ");
  }
  for (double s : sigma.values()) check_sigma(s);
}

double discretize_pmf(int k, double mu, double sigma, const QuantSpec& spec) {
  check_sigma(sigma);
  if (k < spec.t_min || k > spec.t_max) throw DomainError("symbol " + std::to_string(k) + " outside alphabet");
  const double lo = k == spec.t_min ? -gauss::kInf : (k - 0.5 - mu) / sigma;
  const double hi = k == spec.t_max ? gauss::kInf : (k + 0.5 - mu) / sigma;
  return gauss::interval_mass(lo, hi);
}

std::vector<double> pmf_vector(double mu, double sigma, const QuantSpec& spec) {
  std::vector<double> p;
  p.reserve(static_cast<std::size_t>(spec.alphabet_size()));
  for (int k = spec.t_min; k <= spec.t_max; ++k) p.push_back(discretize_pmf(k, mu, sigma, spec));
  return p;
}

double discrete_entropy(double mu, double sigma, const QuantSpec& spec) {
  double h = 0.0;
  for (double p : pmf_vector(mu, sigma, spec)) {
    if (p > 0.0) h -= p * std::log2(p);
  }
  return h;
}

double discrete_kl(double mu_p, double sigma_p, double mu_q, double sigma_q, const QuantSpec& spec) {
  const auto p = pmf_vector(mu_p, sigma_p, spec);
  const auto q = pmf_vector(mu_q, sigma_q, spec);
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0)) continue;
    if (!(q[i] > 0.0)) {
      // q underflowed in a far tail; such terms are below double resolution
      // unless p itself carries visible mass there.
      if (p[i] < 1e-200) continue;
      return gauss::kInf;
    }
    d += p[i] * (std::log2(p[i]) - std::log2(q[i]));
  }
  return d;
}

double rate_estimate(const Tensor& z, const EntropyParams& params, const QuantSpec& spec) {
  if (z.shape() != params.mu.shape()) {
    throw ShapeError("latent " + shape_str(z.shape()) + " vs params " + shape_str(params.mu.shape()));
  }
  params.validate();
  double bits = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    bits += gauss::element_bits(z[i], params.mu[i], params.sigma[i], spec.t_min, spec.t_max, false).bits;
  }
  return bits;
}

double rate_estimate(const SymbolGrid& z, const EntropyParams& params, const QuantSpec& spec) {
  return rate_estimate(z.to_tensor(), params, spec);
}

double hyper_rate(const HyperVector& v, const QuantSpec& spec) {
  const Tensor values = v.values.to_tensor();
  if (values.rank() != 2 || values.dim(1) != static_cast<int>(v.prior_scales.numel())) {
    throw ShapeError("hyper vector " + shape_str(values.shape()) + " does not match " +
                     std::to_string(v.prior_scales.numel()) + " prior scales");
  }
  const int m = values.dim(1);
  EntropyParams p{Tensor(values.shape(), 0.0), Tensor(values.shape())};
  for (std::size_t i = 0; i < values.numel(); ++i) p.sigma[i] = v.prior_scales[i % m];
  return rate_estimate(values, p, spec);
}

Tensor synthesize_hyperprior(const Tensor& coeffs, const Tensor& bases, int target_h, int target_w) {
  if (bases.rank() != 3) throw ShapeError("codebook must be (tau, h, w), got " + shape_str(bases.shape()));
  Tensor c = coeffs.rank() == 2 ? coeffs.reshaped({1, coeffs.dim(0), coeffs.dim(1)}) : coeffs;
  if (c.rank() != 3 || c.dim(2) != bases.dim(0)) {
    throw ShapeError("coefficients " + shape_str(coeffs.shape()) + " do not match codebook " +
                     shape_str(bases.shape()));
  }
  Graph g(false);
  Var flat = g.constant(c.reshaped({c.dim(0), c.dim(1) * c.dim(2)}));
  Var b = g.constant(bases.reshaped({bases.dim(0), bases.dim(1) * bases.dim(2)}));
  if (bases.dim(1) != bases.dim(2)) throw ShapeError("codebook bases must be square");
  return synthesize_hyperprior(flat, b, c.dim(1), target_h, target_w).value();
}

Var synthesize_hyperprior(Var coeffs, Var bases, int n, int target_h, int target_w) {
  const int batch = coeffs.shape()[0];
  const int tau = bases.shape()[0];
  if (coeffs.shape()[1] != n * tau) {
    throw ShapeError("coefficient width " + std::to_string(coeffs.shape()[1]) + " != n*tau = " +
                     std::to_string(n * tau));
  }
  const int hw = bases.shape()[1];
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(hw))));
  if (side * side != hw) throw ShapeError("flattened codebook bases must be square");
  Var combo = ops::matmul(ops::reshape(coeffs, {batch * n, tau}), bases);
  Var maps = ops::reshape(combo, {batch, n, side, side});
  if (side == target_h && side == target_w) return maps;
  return ops::resample_bilinear(maps, target_h, target_w);
}

Tensor HyperPrior::analyze(const Tensor& z) {
  Graph g(false);
  return analyze(g, g.constant(z)).value();
}

Tensor HyperPrior::side_scales(Shape side_shape) {
  Graph g(false);
  return side_scales(g, side_shape).value();
}

EntropyParams HyperPrior::predict(const Tensor& side_hat, Shape z_shape) {
  Graph g(false);
  auto [mu, sigma] = predict(g, g.constant(side_hat), z_shape);
  return {mu.value(), sigma.value()};
}

std::vector<const Parameter*> HyperPrior::parameters() const {
  auto* self = const_cast<HyperPrior*>(this);
  std::vector<const Parameter*> out;
  for (Parameter* p : self->parameters()) out.push_back(p);
  return out;
}

NamedArrays HyperPrior::export_arrays() const {
  NamedArrays out;
  append_arrays(out, const_cast<HyperPrior*>(this)->parameters());
  return out;
}

void HyperPrior::import_arrays(const NamedArrays& arrays) { assign_arrays(parameters(), arrays); }

// ---- codebook prior ----

CodebookPrior::CodebookPrior(const CodebookPriorConfig& cfg) : cfg_(cfg) {
  if (cfg.m < 1 || cfg.n < 1 || cfg.tau < 1 || cfg.hc < 1 || cfg.wc < 1 || cfg.hc != cfg.wc) {
    throw ShapeError("codebook prior needs positive extents and square bases");
  }
  std::vector<LayerDesc> h;
  int ch = cfg.latent_channels;
  for (int i = 0; i < cfg.hyper_downs; ++i) {
    h.push_back({LayerKind::conv3x3_s2, ch, cfg.m});
    h.push_back({LayerKind::relu});
    ch = cfg.m;
  }
  h.push_back({LayerKind::conv1x1, ch, cfg.m});
  h.push_back({LayerKind::global_avg_pool});
  hyper_ = Network("hyper", h, mix_seed(cfg.seed, 1));
  coeff_ = Network("coeff",
                   {{LayerKind::linear, cfg.m, cfg.coeff_hidden},
                    {LayerKind::relu},
                    {LayerKind::linear, cfg.coeff_hidden, cfg.n * cfg.tau}},
                   mix_seed(cfg.seed, 2));
  predictor_ = Network("predict",
                       {{LayerKind::conv1x1, cfg.n, cfg.predictor_width},
                        {LayerKind::relu},
                        {LayerKind::conv1x1, cfg.predictor_width, 2 * cfg.latent_channels}},
                       mix_seed(cfg.seed, 3));
  codebook_ = {"codebook", Tensor({cfg.tau, cfg.hc, cfg.wc}), {}};
  Rng rng(mix_seed(cfg.seed, 4));
  for (double& v : codebook_.value.storage()) v = rng.uniform(-1.0, 1.0);
  prior_raw_ = make_raw("hyper_prior_raw", cfg.m, 0.5);
}

std::vector<Parameter*> CodebookPrior::parameters() {
  std::vector<Parameter*> out;
  for (Network* net : {&hyper_, &coeff_, &predictor_}) {
    for (Parameter& p : net->parameters()) out.push_back(&p);
  }
  out.push_back(&codebook_);
  out.push_back(&prior_raw_);
  return out;
}

std::vector<Network*> CodebookPrior::networks() { return {&hyper_, &coeff_, &predictor_}; }

Var CodebookPrior::analyze(Graph& g, Var z) { return hyper_.apply(g, z); }

Var CodebookPrior::side_scales(Graph& g, Shape side_shape) {
  if (side_shape.size() != 2 || side_shape[1] != cfg_.m) {
    throw ShapeError("hyper vector shape " + shape_str(side_shape) + " does not match m=" + std::to_string(cfg_.m));
  }
  return ops::tile_rows(ops::positive_scale(g.param(prior_raw_, !frozen_), kSigmaFloor), side_shape[0]);
}

std::pair<Var, Var> CodebookPrior::predict(Graph& g, Var side_hat, Shape z_shape) {
  if (z_shape.size() != 4 || z_shape[1] != cfg_.latent_channels) {
    throw ShapeError("latent shape " + shape_str(z_shape) + " does not match the codebook prior");
  }
  Var coeffs = coeff_.apply(g, side_hat);
  Var bases = ops::reshape(g.param(codebook_, !frozen_), {cfg_.tau, cfg_.hc * cfg_.wc});
  Var v_z = synthesize_hyperprior(coeffs, bases, cfg_.n, z_shape[2], z_shape[3]);
  Var out = predictor_.apply(g, v_z);
  const int c = cfg_.latent_channels;
  return {ops::slice_channels(out, 0, c), ops::positive_scale(ops::slice_channels(out, c, c), kSigmaFloor)};
}

HyperVector CodebookPrior::hyper_analyze(const Tensor& z, const QuantSpec& spec) {
  HyperVector v{quantize(analyze(z), spec), {}};
  v.prior_scales = side_scales({1, cfg_.m}).reshaped({cfg_.m});
  return v;
}

Tensor CodebookPrior::decode_coefficients(const Tensor& v) {
  Graph g(false);
  Tensor c = coeff_.apply(g, g.constant(v)).value();
  return c.reshaped({c.dim(0), cfg_.n, cfg_.tau});
}

EntropyParams CodebookPrior::predict_params(const Tensor& v_z) {
  Graph g(false);
  Var out = predictor_.apply(g, g.constant(v_z));
  const int c = cfg_.latent_channels;
  return {ops::slice_channels(out, 0, c).value(),
          ops::positive_scale(ops::slice_channels(out, c, c), kSigmaFloor).value()};
}

// ---- spatial prior ----

SpatialPrior::SpatialPrior(const SpatialPriorConfig& cfg) : cfg_(cfg) {
  hyper_ = Network("shyper",
                   {{LayerKind::conv3x3_s2, cfg.latent_channels, cfg.width},
                    {LayerKind::relu},
                    {LayerKind::conv3x3_s2, cfg.width, cfg.side_channels}},
                   mix_seed(cfg.seed, 11));
  synth_ = Network("ssynth",
                   {{LayerKind::deconv2, cfg.side_channels, cfg.width},
                    {LayerKind::relu},
                    {LayerKind::deconv2, cfg.width, cfg.width},
                    {LayerKind::relu},
                    {LayerKind::conv1x1, cfg.width, 2 * cfg.latent_channels}},
                   mix_seed(cfg.seed, 12));
  prior_raw_ = make_raw("side_prior_raw", cfg.side_channels, 0.5);
}

std::vector<Parameter*> SpatialPrior::parameters() {
  std::vector<Parameter*> out;
  for (Network* net : {&hyper_, &synth_}) {
    for (Parameter& p : net->parameters()) out.push_back(&p);
  }
  out.push_back(&prior_raw_);
  return out;
}

std::vector<Network*> SpatialPrior::networks() { return {&hyper_, &synth_}; }

Var SpatialPrior::analyze(Graph& g, Var z) { return hyper_.apply(g, z); }

Var SpatialPrior::side_scales(Graph& g, Shape s) {
  if (s.size() != 4 || s[1] != cfg_.side_channels) throw ShapeError("side latent shape " + shape_str(s));
  Var per_channel = ops::positive_scale(g.param(prior_raw_, !frozen_), kSigmaFloor);
  return ops::broadcast_spatial(ops::tile_rows(per_channel, s[0]), s[2], s[3]);
}

std::pair<Var, Var> SpatialPrior::predict(Graph& g, Var side_hat, Shape z_shape) {
  Var out = synth_.apply(g, side_hat);
  if (out.shape()[2] != z_shape[2] || out.shape()[3] != z_shape[3]) {
    out = ops::resample_bilinear(out, z_shape[2], z_shape[3]);
  }
  const int c = cfg_.latent_channels;
  return {ops::slice_channels(out, 0, c), ops::positive_scale(ops::slice_channels(out, c, c), kSigmaFloor)};
}

// ---- vector prior ----

VectorPrior::VectorPrior(const VectorPriorConfig& cfg) : cfg_(cfg) {
  hyper_ = Network("vhyper",
                   {{LayerKind::linear, cfg.feature_len, cfg.hidden},
                    {LayerKind::relu},
                    {LayerKind::linear, cfg.hidden, cfg.m}},
                   mix_seed(cfg.seed, 21));
  params_ = Network("vparams",
                    {{LayerKind::linear, cfg.m, cfg.hidden},
                     {LayerKind::relu},
                     {LayerKind::linear, cfg.hidden, 2 * cfg.feature_len}},
                    mix_seed(cfg.seed, 22));
  prior_raw_ = make_raw("vector_prior_raw", cfg.m, 0.5);
}

std::vector<Parameter*> VectorPrior::parameters() {
  std::vector<Parameter*> out;
  for (Network* net : {&hyper_, &params_}) {
    for (Parameter& p : net->parameters()) out.push_back(&p);
  }
  out.push_back(&prior_raw_);
  return out;
}

std::vector<Network*> VectorPrior::networks() { return {&hyper_, &params_}; }

Var VectorPrior::analyze(Graph& g, Var z) { return hyper_.apply(g, z); }

Var VectorPrior::side_scales(Graph& g, Shape s) {
  if (s.size() != 2 || s[1] != cfg_.m) throw ShapeError("hyper vector shape " + shape_str(s));
  return ops::tile_rows(ops::positive_scale(g.param(prior_raw_, !frozen_), kSigmaFloor), s[0]);
}

std::pair<Var, Var> VectorPrior::predict(Graph& g, Var side_hat, Shape z_shape) {
  if (z_shape.size() != 2 || z_shape[1] != cfg_.feature_len) {
    throw ShapeError("vector latent shape " + shape_str(z_shape) + " does not match feature_len " +
                     std::to_string(cfg_.feature_len));
  }
  Var out = params_.apply(g, side_hat);
  const int f = cfg_.feature_len;
  Var mu = ops::reshape(ops::slice_channels(ops::reshape(out, {z_shape[0], 2 * f, 1, 1}), 0, f), z_shape);
  Var raw = ops::reshape(ops::slice_channels(ops::reshape(out, {z_shape[0], 2 * f, 1, 1}), f, f), z_shape);
  return {mu, ops::positive_scale(raw, kSigmaFloor)};
}

EntropyParams VectorPrior::vector_predict_params(const Tensor& v) {
  return predict(v, {v.dim(0), cfg_.feature_len});
}

void HyperPrior::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (Network* n : networks()) {
    if (frozen) {
      n->freeze();
    } else {
      n->unfreeze();
    }
  }
}

RateTerms rate_terms(Graph& g, HyperPrior& prior, Var z_in, const QuantSpec& spec, Rng* rng) {
  RateTerms t;
  Var side = prior.analyze(g, z_in);
  t.side_hat = rng != nullptr ? ops::add_uniform_noise(side, *rng) : ops::round_hard(side, spec.t_min, spec.t_max);
  Var side_sigma = prior.side_scales(g, side.shape());
  Var zeros = g.constant(Tensor(side.shape(), 0.0));
  t.side_bits = ops::gaussian_bits(t.side_hat, zeros, side_sigma, spec.t_min, spec.t_max);
  auto [mu, sigma] = prior.predict(g, t.side_hat, z_in.shape());
  t.mu = mu;
  t.sigma = sigma;
  t.latent_bits = ops::gaussian_bits(z_in, mu, sigma, spec.t_min, spec.t_max);
  return t;
}

}  // namespace tck
