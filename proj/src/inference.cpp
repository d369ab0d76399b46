#include "cdmm/inference.hpp"

#include <cmath>
#include <string>

#include "cdmm/error.hpp"

namespace cdmm {

namespace {

std::string enc_name(std::size_t layer, const char* part) {
  return "inf.enc." + std::to_string(layer) + "." + part;
}

InferenceParams build(const ModelConfig& cfg, Rng* rng) {
  cfg.validate();
  InferenceParams p{cfg, {}};
  ParameterSet& w = p.weights;
  const std::size_t c = cfg.encoder_channels, z = cfg.latent_dim;
  auto normal = [rng](Shape s, double sd) { return rng ? random_normal(std::move(s), sd, *rng) : Tensor(std::move(s)); };

  for (std::size_t l = 0; l < kEncoderKernels.size(); ++l) {
    const std::size_t in = l == 0 ? cfg.obs_dim : c;
    const double sd = 1.0 / std::sqrt(static_cast<double>(in * kEncoderKernels[l]));
    w.add(enc_name(l, "w"), normal({c, in, kEncoderKernels[l]}, sd));
    w.add(enc_name(l, "b"), Tensor({c}));
  }
  w.add("inf.comb.w", normal({z, c}, 1.0 / std::sqrt(static_cast<double>(z))));
  w.add("inf.comb.b", Tensor({c}));
  w.add("inf.comb.mu.w", normal({c, z}, 1.0 / std::sqrt(static_cast<double>(c))));
  w.add("inf.comb.mu.b", Tensor({z}));
  w.add("inf.comb.sigma.w", Tensor({c, z}));
  w.add("inf.comb.sigma.b", Tensor({z}, rng ? std::log(std::exp(1.0) - 1.0) : 0.0));
  w.add("inf.z0", Tensor({1, z}));
  return p;
}

ad::Var linear(Binder& b, ad::Var x, const std::string& prefix) {
  return ad::add_rowwise(ad::matmul(x, b(prefix + "w")), b(prefix + "b"));
}

Tensor as_row(const Tensor& v) { return v.rank() == 2 ? v : Tensor::row(v.values()); }

}  // namespace

std::size_t encoder_receptive_field() {
  std::size_t field = 1, jump = 1;
  for (std::size_t l = 0; l < kEncoderKernels.size(); ++l) {
    field += (kEncoderKernels[l] - 1) * jump;
    jump *= kEncoderStrides[l];
  }
  return field;
}

InferenceParams InferenceParams::init(const ModelConfig& config, Rng& rng) { return build(config, &rng); }

InferenceParams InferenceParams::zeros(const ModelConfig& config) { return build(config, nullptr); }

namespace inf {

ad::Var encode(Binder& phi, ad::Var x) {
  const std::size_t frames = x.value().rows();
  if (x.value().rank() != 2 || frames % kEncoderDownsample != 0) {
    throw ContractError("encoder input length must be a positive multiple of 4, got " +
                        shape_string(x.shape()));
  }
  const std::size_t d = phi.params().get(enc_name(0, "w")).dim(1);
  if (x.value().cols() != d) {
    throw DimensionError("encoder expects " + std::to_string(d) + " input channels, got " +
                         std::to_string(x.value().cols()));
  }
  ad::Var y = ad::conv1d(x, phi(enc_name(0, "w")), phi(enc_name(0, "b")), kEncoderStrides[0], kEncoderPad);
  for (std::size_t l = 1; l < kEncoderKernels.size(); ++l) {
    ad::Var next = ad::conv1d(ad::relu(y), phi(enc_name(l, "w")), phi(enc_name(l, "b")), kEncoderStrides[l],
                              kEncoderPad);
    if (next.shape() == y.shape()) next = ad::add(next, y);
    y = next;
  }
  return y;
}

GaussianVar combine(Binder& phi, ad::Var z_prev, ad::Var h) {
  ad::Var hidden = ad::scale(ad::add(ad::tanh(linear(phi, z_prev, "inf.comb.")), h), 0.5);
  ad::Var mu = linear(phi, hidden, "inf.comb.mu.");
  ad::Var sigma = ad::softplus(linear(phi, hidden, "inf.comb.sigma."));
  return {mu, sigma};
}

PosteriorGraph posterior(Binder& phi, ad::Var x, const Tensor& noise) {
  ad::Graph& g = x.graph();
  ad::Var h = encode(phi, x);
  const std::size_t steps = h.value().rows();
  const std::size_t z = phi.params().get("inf.z0").numel();
  if (noise.rank() != 2 || noise.rows() != steps || noise.cols() != z) {
    throw DimensionError("posterior noise must be " + std::to_string(steps) + "x" + std::to_string(z) + ", got " +
                         shape_string(noise.shape()));
  }
  PosteriorGraph out;
  ad::Var prev = phi("inf.z0");
  for (std::size_t t = 0; t < steps; ++t) {
    GaussianVar q = combine(phi, prev, ad::row(h, t));
    ad::Var eps = g.constant(Tensor::row(noise.row_span(t)));
    ad::Var zt = ad::add(q.mean, ad::mul(q.scale, eps));
    out.q.push_back(q);
    out.z_rows.push_back(zt);
    prev = zt;
  }
  out.z = ad::stack_rows(out.z_rows);
  return out;
}

ElboGraph elbo(Binder& theta, Binder& phi, ad::Var x, const Tensor& noise, ModelMode mode, double beta,
               std::span<const double> frame_mask) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("KL weight must lie in [0, 1]");
  PosteriorGraph post = posterior(phi, x, noise);
  const std::size_t steps = post.q.size();
  ad::Var recon = gen::log_likelihood(theta, x, post.z, frame_mask);

  ad::Var kl = kl_standard_normal(post.q[0]);
  if (steps > 1) {
    std::vector<ad::Var> means, scales, prev;
    for (std::size_t t = 1; t < steps; ++t) {
      means.push_back(post.q[t].mean);
      scales.push_back(post.q[t].scale);
      prev.push_back(post.z_rows[t - 1]);
    }
    GaussianVar q_rest{ad::stack_rows(means), ad::stack_rows(scales)};
    if (mode == ModelMode::Markov) {
      kl = ad::add(kl, kl_diag(q_rest, gen::gated_transition(theta, ad::stack_rows(prev))));
    } else {
      kl = ad::add(kl, kl_standard_normal(q_rest));
    }
  }
  ad::Var value = ad::sub(recon, ad::scale(kl, beta));
  return {value, recon, kl};
}

}  // namespace inf

Tensor encode(const Tensor& x, const InferenceParams& phi) {
  ad::Graph g;
  Binder b(g, phi.weights, false);
  return inf::encode(b, g.constant(x)).value();
}

DiagGaussian combine(const Tensor& z_prev, const Tensor& h, const InferenceParams& phi) {
  ad::Graph g;
  Binder b(g, phi.weights, false);
  return inf::combine(b, g.constant(as_row(z_prev)), g.constant(as_row(h))).value();
}

PosteriorPath posterior_with_noise(const Tensor& x, const InferenceParams& phi, const Tensor& noise) {
  ad::Graph g;
  Binder b(g, phi.weights, false);
  inf::PosteriorGraph post = inf::posterior(b, g.constant(x), noise);
  PosteriorPath out{post.z.value(), {}, noise};
  for (const auto& q : post.q) out.steps.push_back(q.value());
  return out;
}

PosteriorPath posterior_sample(const Tensor& x, const InferenceParams& phi, Rng& rng) {
  if (x.rows() % kEncoderDownsample != 0) throw ContractError("input length must be a multiple of 4");
  Tensor noise({x.rows() / kEncoderDownsample, phi.config.latent_dim});
  for (double& v : noise.values()) v = rng.normal();
  return posterior_with_noise(x, phi, noise);
}

ElboBreakdown elbo(const Tensor& x, const GenerativeParams& theta, const InferenceParams& phi, ModelMode mode,
                   double beta, Rng& rng, std::span<const double> frame_mask) {
  if (x.rows() % kEncoderDownsample != 0) throw ContractError("input length must be a multiple of 4");
  Tensor noise({x.rows() / kEncoderDownsample, phi.config.latent_dim});
  for (double& v : noise.values()) v = rng.normal();
  ad::Graph g;
  Binder tb(g, theta.weights, false);
  Binder pb(g, phi.weights, false);
  inf::ElboGraph e = inf::elbo(tb, pb, g.constant(x), noise, mode, beta, frame_mask);
  ElboBreakdown out;
  out.recon = e.recon.value().item();
  out.kl_total = e.kl.value().item();
  out.kl_weight = beta;
  out.elbo = e.elbo.value().item();
  out.frames = x.rows();
  if (!frame_mask.empty()) {
    double n = 0.0;
    for (double m : frame_mask) n += m;
    out.frames = static_cast<std::size_t>(n);
  }
  return out;
}

Tensor extract_features(const Tensor& x, const GenerativeParams& theta, const InferenceParams& phi) {
  if (x.rows() % kEncoderDownsample != 0) throw ContractError("input length must be a multiple of 4");
  ad::Graph g;
  Binder pb(g, phi.weights, false);
  Binder tb(g, theta.weights, false);
  const Tensor zero_noise({x.rows() / kEncoderDownsample, phi.config.latent_dim});
  inf::PosteriorGraph post = inf::posterior(pb, g.constant(x), zero_noise);
  return gen::embed_upsample(tb, post.z, theta.config.upsample).value();
}

}  // namespace cdmm
