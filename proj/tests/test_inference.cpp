#include <doctest.h>

#include <cmath>
#include <numeric>

#include "cdmm/error.hpp"
#include "cdmm/inference.hpp"
#include "oracles.hpp"

using namespace cdmm;

namespace {

ModelConfig tiny_config(std::size_t d = 3, std::size_t z = 2) {
  ModelConfig c;
  c.obs_dim = d;
  c.latent_dim = z;
  c.encoder_channels = 4;
  c.embed_channels = 4;
  c.emission_hidden = 3;
  return c;
}

void randomize(ParameterSet& ps, Rng& rng, double sd = 0.5) {
  for (auto& [_, t] : ps.entries())
    for (double& v : t.values()) v = sd * rng.normal();
}

struct TinyModel {
  GenerativeParams theta;
  InferenceParams phi;
};

TinyModel make_tiny(std::uint64_t seed, const ModelConfig& cfg) {
  Rng rng(seed);
  TinyModel m{GenerativeParams::init(cfg, rng), InferenceParams::init(cfg, rng)};
  // Thirteen encoder layers amplify sd 0.5 weights by roughly 1e3.
  randomize(m.theta.weights, rng, 0.25);
  randomize(m.phi.weights, rng, 0.25);
  // gamma = 1 keeps the reconstruction term at a realistic magnitude.
  m.theta.weights.get("gen.rho")[0] = std::log(std::exp(1.0) - 1.0);
  return m;
}

}  // namespace

TEST_CASE("encoder length contract and receptive field") {
  ModelConfig cfg = tiny_config();
  cfg.encoder_channels = 2;
  Rng rng(1);
  const InferenceParams phi = InferenceParams::init(cfg, rng);
  CHECK(encode(Tensor({100, 3}, 0.5), phi).rows() == 25);
  CHECK(encode(Tensor({4, 3}, 0.5), phi).rows() == 1);
  CHECK(encode(Tensor({4, 3}, 0.5), phi).cols() == 2);
  CHECK_THROWS_AS(encode(Tensor({6, 3}), phi), ContractError);
  CHECK_THROWS_AS(encode(Tensor({8, 5}), phi), DimensionError);
  CHECK(encoder_receptive_field() == 68);
  CHECK(std::accumulate(kEncoderStrides.begin(), kEncoderStrides.end(), std::size_t{1}, std::multiplies<>()) == 4);
}

TEST_CASE("combiner") {
  ModelConfig cfg = tiny_config(3, 3);
  cfg.encoder_channels = 3;
  Rng rng(2);
  SUBCASE("zero weights") {
    InferenceParams phi = InferenceParams::zeros(cfg);
    phi.weights.get("inf.comb.mu.b") = Tensor({3}, {0.1, 0.2, 0.3});
    phi.weights.get("inf.comb.sigma.b") = Tensor({3}, {-1.0, 0.0, 2.0});
    const DiagGaussian q = combine(Tensor({1, 3}, {1, 2, 3}), Tensor({1, 3}), phi);
    for (std::size_t d = 0; d < 3; ++d) {
      CHECK(q.mean[d] == phi.weights.get("inf.comb.mu.b")[d]);
      CHECK(q.scale[d] == doctest::Approx(oracle::stable_softplus(phi.weights.get("inf.comb.sigma.b")[d])).epsilon(1e-15));
    }
  }
  SUBCASE("tanh(0) leaves half of h") {
    InferenceParams phi = InferenceParams::zeros(cfg);
    Tensor& wmu = phi.weights.get("inf.comb.mu.w");
    for (std::size_t i = 0; i < 3; ++i) wmu.at(i, i) = 1.0;
    const Tensor h({1, 3}, {0.8, -2.5, 7.0});
    const DiagGaussian q = combine(Tensor({1, 3}, {4, 5, 6}), h, phi);
    for (std::size_t d = 0; d < 3; ++d) CHECK(q.mean[d] == h[d] / 2);
  }
  SUBCASE("random parameters match the printed formulas") {
    InferenceParams phi = InferenceParams::init(cfg, rng);
    randomize(phi.weights, rng);
    const ParameterSet& w = phi.weights;
    for (int trial = 0; trial < 10; ++trial) {
      const Tensor zp = random_normal({1, 3}, 1.0, rng), h = random_normal({1, 3}, 1.0, rng);
      const DiagGaussian q = combine(zp, h, phi);
      auto pre = oracle::affine(zp.values(), w.get("inf.comb.w"), w.get("inf.comb.b"));
      std::vector<double> hc(3);
      for (std::size_t i = 0; i < 3; ++i) hc[i] = 0.5 * (std::tanh(pre[i]) + h[i]);
      const auto mu = oracle::affine(hc, w.get("inf.comb.mu.w"), w.get("inf.comb.mu.b"));
      const auto sg = oracle::affine(hc, w.get("inf.comb.sigma.w"), w.get("inf.comb.sigma.b"));
      for (std::size_t d = 0; d < 3; ++d) {
        CHECK(std::abs(q.mean[d] - mu[d]) <= 1e-12);
        CHECK(std::abs(q.scale[d] - oracle::stable_softplus(sg[d])) <= 1e-12);
      }
    }
    CHECK_THROWS_AS(combine(Tensor({1, 4}), Tensor({1, 3}), phi), DimensionError);
  }
}

TEST_CASE("posterior sampling") {
  const ModelConfig cfg = tiny_config();
  const TinyModel m = make_tiny(3, cfg);
  Rng data(4);
  const Tensor x = random_normal({16, 3}, 1.0, data);

  Rng a(77), b(77);
  const PosteriorPath pa = posterior_sample(x, m.phi, a);
  const PosteriorPath pb = posterior_sample(x, m.phi, b);
  CHECK(pa.z == pb.z);
  REQUIRE(pa.steps.size() == 4);
  CHECK(pa.noise.rows() == 4);
  for (const auto& q : pa.steps)
    for (double s : q.scale.values()) CHECK(s > 0);

  // Reparameterization: z_τ = μ_τ + σ_τ ε_τ.
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t d = 0; d < 2; ++d)
      CHECK(pa.z.at(t, d) == doctest::Approx(pa.steps[t].mean[d] + pa.steps[t].scale[d] * pa.noise.at(t, d)).epsilon(1e-14));

  SUBCASE("zero noise follows the chain of posterior means") {
    const PosteriorPath p0 = posterior_with_noise(x, m.phi, Tensor({4, 2}));
    const Tensor h = encode(x, m.phi);
    Tensor prev = m.phi.weights.get("inf.z0");
    for (std::size_t t = 0; t < 4; ++t) {
      const DiagGaussian q = combine(prev, Tensor::row(h.row_span(t)), m.phi);
      for (std::size_t d = 0; d < 2; ++d) CHECK(p0.z.at(t, d) == q.mean[d]);
      prev = q.mean;
    }
  }
  SUBCASE("variance of z_1 matches sigma_1 squared") {
    const Tensor x4 = random_normal({4, 3}, 1.0, data);
    const int n = 100000;
    Rng rng(5);
    double s1 = 0, s2 = 0;
    std::vector<double> draws(n);
    DiagGaussian q1;
    for (int i = 0; i < n; ++i) {
      const PosteriorPath p = posterior_sample(x4, m.phi, rng);
      if (i == 0) q1 = p.steps[0];
      draws[i] = p.z[0];
      s1 += draws[i];
    }
    const double mean = s1 / n;
    double m4 = 0;
    for (double v : draws) {
      s2 += (v - mean) * (v - mean);
      m4 += std::pow(v - mean, 4);
    }
    const double var = s2 / (n - 1);
    const double se = std::sqrt((m4 / n - var * var) / n);
    const double sigma2 = q1.scale[0] * q1.scale[0];
    CHECK(std::abs(var - sigma2) <= 4 * se);
  }
}

TEST_CASE("analytic KL") {
  const DiagGaussian std_normal{Tensor({1}, 0.0), Tensor({1}, 1.0)};
  CHECK(kl_step(std_normal, std_normal) == 0.0);
  CHECK(kl_step({Tensor({1}, 1.0), Tensor({1}, 1.0)}, std_normal) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(kl_step({Tensor({1}, 0.0), Tensor({1}, 0.0)}, std_normal), ContractError);
  CHECK_THROWS_AS(kl_step({Tensor({1}, 0.0), Tensor({1}, -1.0)}, std_normal), ContractError);
  CHECK_THROWS_AS(kl_step({Tensor({2}, 0.0), Tensor({2}, 1.0)}, std_normal), DimensionError);

  Rng rng(6);
  const DiagGaussian q{Tensor({3}, {0.2, -1.0, 0.5}), Tensor({3}, {0.5, 1.2, 2.0})};
  const DiagGaussian p{Tensor({3}, {1.0, 0.0, 0.0}), Tensor({3}, {1.0, 0.7, 1.5})};
  const double qp = kl_step(q, p), pq = kl_step(p, q);
  CHECK(qp > 0);
  CHECK(pq > 0);
  CHECK(std::abs(qp - pq) > 1e-3);

  // Monte-Carlo E_q[log q − log p].
  const int n = 1000000;
  double s = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    double lq = 0, lp = 0;
    for (std::size_t d = 0; d < 3; ++d) {
      const double z = q.mean[d] + q.scale[d] * rng.normal();
      lq += oracle::normal_log_pdf(z, q.mean[d], q.scale[d]);
      lp += oracle::normal_log_pdf(z, p.mean[d], p.scale[d]);
    }
    s += lq - lp;
    ss += (lq - lp) * (lq - lp);
  }
  const double mean = s / n;
  const double se = std::sqrt((ss / n - mean * mean) / n);
  CHECK(std::abs(mean - qp) <= 3 * se);
}

TEST_CASE("ELBO") {
  const ModelConfig cfg = tiny_config(2, 2);
  const TinyModel m = make_tiny(8, cfg);
  Rng data(9);
  const Tensor x = random_normal({8, 2}, 1.0, data);

  SUBCASE("zero KL weight leaves the reconstruction term") {
    Rng rng(1);
    const ElboBreakdown e = elbo(x, m.theta, m.phi, ModelMode::Markov, 0.0, rng);
    CHECK(e.elbo == e.recon);
    CHECK(e.frames == 8);
    Rng bad(1);
    CHECK_THROWS_AS(elbo(x, m.theta, m.phi, ModelMode::Markov, 1.5, bad), ContractError);
  }
  SUBCASE("KL is nonnegative for random parameters") {
    Rng rng(10);
    for (int i = 0; i < 1000; ++i) {
      TinyModel r = make_tiny(1000 + i, cfg);
      const ElboBreakdown e = elbo(x, r.theta, r.phi, i % 2 ? ModelMode::Markov : ModelMode::IsotropicPrior, 1.0, rng);
      REQUIRE(e.kl_total >= -1e-9);
    }
  }
  SUBCASE("ELBO lower-bounds the importance-sampled evidence") {
    const int n = 100000;
    Rng rng(11);
    double es = 0, ess = 0;
    for (int i = 0; i < n; ++i) {
      const double v = elbo(x, m.theta, m.phi, ModelMode::Markov, 1.0, rng).elbo;
      es += v;
      ess += v * v;
    }
    const double elbo_mean = es / n;
    const double elbo_se = std::sqrt((ess / n - elbo_mean * elbo_mean) / n);

    // log p(x) ≈ log mean_i p(x, z_i) / q(z_i | x), z_i ~ q.
    std::vector<double> logw(n);
    Rng isr(12);
    for (int i = 0; i < n; ++i) {
      const PosteriorPath path = posterior_sample(x, m.phi, isr);
      double lq = 0;
      for (std::size_t t = 0; t < path.steps.size(); ++t)
        for (std::size_t d = 0; d < 2; ++d)
          lq += oracle::normal_log_pdf(path.z.at(t, d), path.steps[t].mean[d], path.steps[t].scale[d]);
      logw[i] = log_joint(x, path.z, m.theta, ModelMode::Markov) - lq;
    }
    const double mx = *std::max_element(logw.begin(), logw.end());
    double w1 = 0, w2 = 0;
    for (double lw : logw) {
      const double w = std::exp(lw - mx);
      w1 += w;
      w2 += w * w;
    }
    const double wbar = w1 / n;
    const double log_evidence = mx + std::log(wbar);
    // Delta-method standard error of log(mean w).
    const double is_se = std::sqrt((w2 / n - wbar * wbar) / n) / wbar;
    INFO("elbo " << elbo_mean << " log p(x) " << log_evidence);
    CHECK(elbo_mean <= log_evidence + 3 * std::hypot(elbo_se, is_se));
    CHECK(elbo_mean < log_evidence);
  }
}

TEST_CASE("ELBO gradcheck, both parameter sets and both modes") {
  const ModelConfig cfg = tiny_config(3, 2);
  TinyModel m = make_tiny(13, cfg);
  Rng rng(14);
  const Tensor x = random_normal({8, 3}, 1.0, rng);
  const Tensor noise = random_normal({2, 2}, 1.0, rng);
  for (ModelMode mode : {ModelMode::Markov, ModelMode::IsotropicPrior}) {
    auto r = oracle::gradcheck_params(
        [&](ad::Graph& g, std::vector<Binder>& b) {
          return inf::elbo(b[0], b[1], g.constant(x), noise, mode, 0.8).elbo;
        },
        {&m.theta.weights, &m.phi.weights});
    INFO(to_string(mode) << " " << r.worst);
    CHECK(r.max_rel_error <= 1e-4);
    CHECK(r.checked == m.theta.weights.total_values() + m.phi.weights.total_values());
  }
}

TEST_CASE("feature extraction") {
  const ModelConfig cfg = tiny_config();
  const TinyModel m = make_tiny(15, cfg);
  Rng rng(16);
  const Tensor x = random_normal({12, 3}, 1.0, rng);
  const Tensor f1 = extract_features(x, m.theta, m.phi);
  const Tensor f2 = extract_features(x, m.theta, m.phi);
  CHECK(f1 == f2);
  CHECK(f1.rows() == 12);
  CHECK(f1.cols() == cfg.embed_channels);
  for (std::size_t t = 0; t < 12; ++t) {
    const std::size_t first = t - t % 4;
    CHECK(std::equal(f1.row_span(t).begin(), f1.row_span(t).end(), f1.row_span(first).begin()));
  }
  // Same as pushing the zero-noise posterior path through the embedding.
  const PosteriorPath p0 = posterior_with_noise(x, m.phi, Tensor({3, 2}));
  CHECK(embed_upsample(p0.z, m.theta) == f1);
}
