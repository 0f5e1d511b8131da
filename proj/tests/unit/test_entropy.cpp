#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fd_oracle.hpp"
#include "tck/entropy.hpp"
#include "tck/errors.hpp"
#include "tck/ops.hpp"

using namespace tck;
using fd::random_tensor;

namespace {

double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Inverse-CDF sampler over the discretized pmf.
std::vector<int> sample_symbols(double mu, double sigma, const QuantSpec& spec, std::size_t count, Rng& rng) {
  const auto pmf = pmf_vector(mu, sigma, spec);
  std::vector<double> cdf(pmf.size());
  std::partial_sum(pmf.begin(), pmf.end(), cdf.begin());
  std::vector<int> out(count);
  for (auto& s : out) {
    const double u = rng.uniform() * cdf.back();
    s = spec.t_min + static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    s = std::min(s, spec.t_max);
  }
  return out;
}

void zero_biases(Network& net) {
  for (auto& p : net.parameters()) {
    if (p.name.ends_with(".bias")) p.value.fill(0.0);
  }
}

// Zero-initialised biases behind a relu put activations exactly on the kink.
void jitter_biases(HyperPrior& prior, std::uint64_t seed) {
  Rng rng(seed);
  for (Parameter* p : prior.parameters()) {
    if (p->name.ends_with(".bias")) {
      for (double& v : p->value.storage()) v = rng.uniform(-0.3, 0.3);
    }
  }
}

CodebookPriorConfig small_codebook() {
  CodebookPriorConfig c;
  c.latent_channels = 4;
  c.m = 6;
  c.n = 3;
  c.tau = 5;
  c.hc = c.wc = 4;
  c.coeff_hidden = 8;
  c.predictor_width = 5;
  c.hyper_downs = 1;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("discretized pmf examples") {
  const QuantSpec spec;
  CHECK(discretize_pmf(0, 0.0, 1.0, spec) == doctest::Approx(phi(0.5) - phi(-0.5)).epsilon(1e-14));
  CHECK(discretize_pmf(0, 0.0, 1.0, spec) == doctest::Approx(0.38292492254802624).epsilon(1e-12));
  for (int k = 1; k <= 127; ++k) {
    CHECK(discretize_pmf(k, 0.0, 1.7, spec) == doctest::Approx(discretize_pmf(-k, 0.0, 1.7, spec)).epsilon(1e-12));
  }
  for (double sigma : {0.04, 0.3, 1.0, 17.0, 400.0}) {
    const auto p = pmf_vector(3.3, sigma, spec);
    CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) <= 1e-12);
  }
  CHECK_THROWS_AS(discretize_pmf(0, 0.0, 0.039, spec), DomainError);
  CHECK_THROWS_AS(discretize_pmf(128, 0.0, 1.0, spec), DomainError);
}

TEST_CASE("boundary symbols absorb the tails") {
  const QuantSpec spec{-3, 3};
  CHECK(discretize_pmf(3, 0.0, 1.0, spec) == doctest::Approx(1.0 - phi(2.5)).epsilon(1e-13));
  CHECK(discretize_pmf(-3, 10.0, 1.0, spec) == doctest::Approx(phi(-12.5)).epsilon(1e-6));
}

TEST_CASE("hyper rate") {
  const QuantSpec spec;
  SUBCASE("sharp prior at zero costs almost nothing") {
    HyperVector v{SymbolGrid{{1, 1}, {0}}, Tensor({1}, 0.1)};
    const double expected = -std::log2(phi(5.0) - phi(-5.0));
    CHECK(hyper_rate(v, spec) == doctest::Approx(expected).epsilon(1e-6));
    CHECK(hyper_rate(v, spec) < 1e-5);
  }
  SUBCASE("two symbols add") {
    HyperVector a{SymbolGrid{{1, 1}, {2}}, Tensor({1}, 1.5)};
    HyperVector b{SymbolGrid{{1, 1}, {-1}}, Tensor({1}, 0.7)};
    HyperVector ab{SymbolGrid{{1, 2}, {2, -1}}, Tensor({2}, std::vector<double>{1.5, 0.7})};
    CHECK(hyper_rate(ab, spec) == doctest::Approx(hyper_rate(a, spec) + hyper_rate(b, spec)).epsilon(1e-14));
  }
  SUBCASE("wide prior approaches the density limit") {
    // With tails absorbed at the boundaries an interior symbol keeps only its
    // density mass, so the cost exceeds the uniform log2(255).
    const double sigma = 1000.0;
    HyperVector v{SymbolGrid{{1, 1}, {0}}, Tensor({1}, sigma)};
    const double density_bits = -std::log2(1.0 / (sigma * std::sqrt(2.0 * M_PI)));
    CHECK(hyper_rate(v, spec) == doctest::Approx(density_bits).epsilon(1e-6));
    CHECK(hyper_rate(v, spec) > std::log2(255.0));
  }
  SUBCASE("scale below floor rejected") {
    HyperVector v{SymbolGrid{{1, 1}, {0}}, Tensor({1}, 0.01)};
    CHECK_THROWS_AS(hyper_rate(v, spec), DomainError);
  }
}

TEST_CASE("rate estimate of zeros under a sharp model") {
  const QuantSpec spec;
  SymbolGrid z{{1, 1000}, std::vector<std::int32_t>(1000, 0)};
  EntropyParams p{Tensor({1, 1000}, 0.0), Tensor({1, 1000}, 0.05)};
  CHECK(rate_estimate(z, p, spec) < 1e-3);
}

TEST_CASE("empirical bits approach H(p) and exceed it under a shifted model") {
  const QuantSpec spec;
  const double mu = 0.3, sigma = 2.0;
  Rng rng(77);
  const auto s = sample_symbols(mu, sigma, spec, 1000000, rng);
  SymbolGrid z{{static_cast<int>(s.size())}, std::vector<std::int32_t>(s.begin(), s.end())};
  EntropyParams p{Tensor(z.shape, mu), Tensor(z.shape, sigma)};
  EntropyParams q{Tensor(z.shape, mu + 1.0), Tensor(z.shape, sigma)};
  const double h = discrete_entropy(mu, sigma, spec);
  const double per_p = rate_estimate(z, p, spec) / static_cast<double>(s.size());
  const double per_q = rate_estimate(z, q, spec) / static_cast<double>(s.size());
  CHECK(std::abs(per_p - h) < 0.01 * h);
  CHECK(per_q > h);
  CHECK(per_q - per_p == doctest::Approx(discrete_kl(mu, sigma, mu + 1.0, sigma, spec)).epsilon(0.05));
}

TEST_CASE("rate estimate is invariant to joint permutation") {
  const QuantSpec spec;
  Tensor z = random_tensor({40}, 5, -4, 4);
  Tensor mu = random_tensor({40}, 6, -2, 2);
  Tensor sigma = random_tensor({40}, 7, 0.1, 3);
  std::vector<int> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[3], perm[17]);
  Tensor z2({40}), m2({40}), s2({40});
  for (int i = 0; i < 40; ++i) {
    z2[i] = z[perm[i]];
    m2[i] = mu[perm[i]];
    s2[i] = sigma[perm[i]];
  }
  CHECK(rate_estimate(z, {mu, sigma}, spec) == doctest::Approx(rate_estimate(z2, {m2, s2}, spec)).epsilon(1e-13));
}

TEST_CASE("codebook synthesis") {
  Tensor c1 = random_tensor({1, 4, 4}, 1);
  SUBCASE("single basis, unit coefficient reproduces the basis") {
    Tensor out = synthesize_hyperprior(Tensor({1, 1}, 1.0), c1, 4, 4);
    CHECK(out.reshaped({1, 4, 4}) == c1);
  }
  SUBCASE("zero coefficients") {
    Tensor bases = random_tensor({3, 4, 4}, 2);
    CHECK(synthesize_hyperprior(Tensor({2, 3}, 0.0), bases, 6, 6).max_abs() == 0.0);
  }
  SUBCASE("a = (2, 3)") {
    Tensor bases = random_tensor({2, 4, 4}, 3);
    Tensor out = synthesize_hyperprior(Tensor({1, 2}, std::vector<double>{2.0, 3.0}), bases, 4, 4);
    for (int i = 0; i < 16; ++i) CHECK(out[i] == doctest::Approx(2.0 * bases[i] + 3.0 * bases[16 + i]).epsilon(1e-15));
  }
  SUBCASE("linearity before resampling") {
    Tensor bases = random_tensor({5, 4, 4}, 4);
    Tensor a = random_tensor({2, 3, 5}, 5), b = random_tensor({2, 3, 5}, 6);
    const double alpha = 0.7, beta = -1.3;
    Tensor mix(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) mix[i] = alpha * a[i] + beta * b[i];
    Tensor sa = synthesize_hyperprior(a, bases, 4, 4), sb = synthesize_hyperprior(b, bases, 4, 4);
    Tensor sm = synthesize_hyperprior(mix, bases, 4, 4);
    for (std::size_t i = 0; i < sm.numel(); ++i) CHECK(std::abs(sm[i] - (alpha * sa[i] + beta * sb[i])) <= 1e-12);
  }
  SUBCASE("mismatch rejected") {
    CHECK_THROWS_AS(synthesize_hyperprior(Tensor({2, 3}, 1.0), random_tensor({4, 4, 4}, 1), 4, 4), ShapeError);
  }
}

TEST_CASE("hyper analysis") {
  CodebookPriorConfig cfg = small_codebook();
  cfg.hyper_downs = 0;
  CodebookPrior prior(cfg);
  SUBCASE("constant input pools to the 1x1 response") {
    Tensor z({1, 4, 5, 5}, 0.0);
    const double vals[4] = {0.5, -1.0, 2.0, 0.25};
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 25; ++i) z[c * 25 + i] = vals[c];
    Tensor v = prior.analyze(z);
    const Tensor& w = prior.hyper_net().parameters()[0].value;
    const Tensor& b = prior.hyper_net().parameters()[1].value;
    for (int o = 0; o < cfg.m; ++o) {
      double r = b[o];
      for (int c = 0; c < 4; ++c) r += w[o * 4 + c] * vals[c];
      CHECK(v[o] == doctest::Approx(r).epsilon(1e-13));
    }
  }
  SUBCASE("equal channel means give equal vectors") {
    Tensor z1 = random_tensor({1, 4, 3, 3}, 9);
    Tensor z2 = z1;
    // swap two pixels in every channel: 1x1 conv then mean is permutation invariant
    for (int c = 0; c < 4; ++c) std::swap(z2[c * 9 + 1], z2[c * 9 + 7]);
    CHECK(prior.hyper_analyze(z1, QuantSpec{}).values == prior.hyper_analyze(z2, QuantSpec{}).values);
    CHECK(prior.analyze(z1).max_abs() > 0.0);
    Tensor a = prior.analyze(z1), b = prior.analyze(z2);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-13));
  }
  SUBCASE("zero input with zero biases") {
    zero_biases(prior.hyper_net());
    HyperVector v = prior.hyper_analyze(Tensor({2, 4, 6, 6}, 0.0), QuantSpec{});
    CHECK(v.values.shape == Shape{2, cfg.m});
    for (int s : v.values.symbols) CHECK(s == 0);
    for (double s : v.prior_scales.values()) CHECK(s >= kSigmaFloor);
  }
}

TEST_CASE("coefficient decoding") {
  CodebookPrior prior(small_codebook());
  const auto& cfg = prior.config();
  SUBCASE("zero input, zero biases") {
    zero_biases(prior.coeff_net());
    Tensor c = prior.decode_coefficients(Tensor({1, cfg.m}, 0.0));
    CHECK(c.shape() == Shape{1, cfg.n, cfg.tau});
    CHECK(c.max_abs() == 0.0);
  }
  SUBCASE("deterministic and Lipschitz in the input") {
    Tensor v = random_tensor({1, cfg.m}, 3, -3, 3);
    CHECK(prior.decode_coefficients(v) == prior.decode_coefficients(v));
    auto frob = [](const Tensor& t) {
      double s = 0.0;
      for (double x : t.values()) s += x * x;
      return std::sqrt(s);
    };
    const double bound = frob(prior.coeff_net().parameters()[0].value) * frob(prior.coeff_net().parameters()[2].value);
    for (int j = 0; j < cfg.m; ++j) {
      Tensor v2 = v;
      v2[j] += 1.0;
      Tensor a = prior.decode_coefficients(v), b = prior.decode_coefficients(v2);
      double d = 0.0;
      for (std::size_t i = 0; i < a.numel(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
      CHECK(std::sqrt(d) <= bound + 1e-12);
    }
  }
}

TEST_CASE("parameter prediction") {
  CodebookPrior prior(small_codebook());
  const auto& cfg = prior.config();
  SUBCASE("constant input gives constant maps") {
    Tensor vz({1, cfg.n, 3, 3});
    for (int c = 0; c < cfg.n; ++c)
      for (int i = 0; i < 9; ++i) vz[c * 9 + i] = 0.3 * c - 0.4;
    EntropyParams p = prior.predict_params(vz);
    for (int c = 0; c < cfg.latent_channels; ++c) {
      for (int i = 1; i < 9; ++i) {
        CHECK(p.mu[c * 9 + i] == p.mu[c * 9]);
        CHECK(p.sigma[c * 9 + i] == p.sigma[c * 9]);
      }
    }
  }
  SUBCASE("large negative raw scale hits the floor") {
    auto& params = prior.predictor().parameters();
    params[2].value.fill(0.0);
    params[3].value.fill(-1000.0);
    EntropyParams p = prior.predict_params(random_tensor({1, cfg.n, 2, 2}, 4));
    for (double s : p.sigma.values()) CHECK(s == kSigmaFloor);
  }
  SUBCASE("scales never fall below the floor") {
    for (int trial = 0; trial < 20; ++trial) {
      EntropyParams p = prior.predict_params(random_tensor({2, cfg.n, 3, 3}, 100 + trial, -20, 20));
      for (double s : p.sigma.values()) REQUIRE(s >= kSigmaFloor);
    }
  }
}

TEST_CASE("vector path") {
  VectorPriorConfig cfg;
  cfg.feature_len = 7;
  cfg.m = 5;
  cfg.hidden = 9;
  VectorPrior prior(cfg);
  SUBCASE("zero input, zero biases gives zero means") {
    zero_biases(prior.param_net());
    EntropyParams p = prior.vector_predict_params(Tensor({1, 5}, 0.0));
    CHECK(p.mu.shape() == Shape{1, 7});
    CHECK(p.mu.max_abs() == 0.0);
  }
  SUBCASE("deterministic and positive over 10^4 random inputs") {
    Tensor v = random_tensor({10000, 5}, 8, -30, 30);
    EntropyParams a = prior.vector_predict_params(v), b = prior.vector_predict_params(v);
    CHECK(a.mu == b.mu);
    CHECK(a.sigma == b.sigma);
    for (double s : a.sigma.values()) REQUIRE(s >= kSigmaFloor);
  }
}

TEST_CASE("total bits follow the chain rule") {
  CodebookPrior prior(small_codebook());
  const QuantSpec spec;
  Tensor z_real = random_tensor({2, 4, 4, 4}, 12, -3, 3);
  SymbolGrid zq = quantize(z_real, spec);
  Graph g(false);
  RateTerms t = rate_terms(g, prior, g.constant(zq.to_tensor()), spec, nullptr);
  HyperVector v = prior.hyper_analyze(zq.to_tensor(), spec);
  EntropyParams p = prior.predict(v.values.to_tensor(), zq.shape);
  CHECK(t.side_bits.value()[0] == doctest::Approx(hyper_rate(v, spec)).epsilon(1e-13));
  CHECK(t.latent_bits.value()[0] == doctest::Approx(rate_estimate(zq, p, spec)).epsilon(1e-13));
}

TEST_CASE("rate gradient through every prior parameter") {
  const QuantSpec spec;
  Tensor z = random_tensor({1, 4, 4, 4}, 13, -2, 2);
  SUBCASE("codebook prior") {
    CodebookPrior prior(small_codebook());
    jitter_biases(prior, 1);
    auto obj = [&](Graph& g) {
      Rng rng(5);
      RateTerms t = rate_terms(g, prior, g.constant(z), spec, &rng);
      return ops::add(t.side_bits, t.latent_bits);
    };
    GradCheckReport r = grad_check_objective(prior.parameters(), obj, 1e-5, 12);
    INFO(r.max_rel_error());
    CHECK(r.passed(1e-4));
  }
  SUBCASE("spatial prior") {
    SpatialPriorConfig cfg{4, 3, 5, 2};
    SpatialPrior prior(cfg);
    jitter_biases(prior, 2);
    auto obj = [&](Graph& g) {
      Rng rng(5);
      RateTerms t = rate_terms(g, prior, g.constant(z), spec, &rng);
      return ops::add(t.side_bits, t.latent_bits);
    };
    GradCheckReport r = grad_check_objective(prior.parameters(), obj, 1e-5, 12);
    INFO(r.max_rel_error());
    CHECK(r.passed(1e-4));
  }
}

TEST_CASE("arrays round trip through export and import") {
  CodebookPrior a(small_codebook());
  CodebookPriorConfig other = small_codebook();
  other.seed = 99;
  CodebookPrior b(other);
  b.import_arrays(a.export_arrays());
  Tensor z = random_tensor({1, 4, 4, 4}, 1);
  CHECK(a.analyze(z) == b.analyze(z));
}
