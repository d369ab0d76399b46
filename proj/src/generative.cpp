#include "cdmm/generative.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "cdmm/error.hpp"

namespace cdmm {

namespace {

std::string embed_name(std::size_t layer, const char* part) {
  return "gen.embed." + std::to_string(layer) + "." + part;
}

// Inverse of softplus at 1.
const double kRhoForUnitGamma = std::log(std::exp(1.0) - 1.0);

void add_linear(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng* rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(in));
  ps.add(prefix + "w", rng ? random_normal({in, out}, sd, *rng) : Tensor({in, out}));
  ps.add(prefix + "b", Tensor({out}));
}

GenerativeParams build(const ModelConfig& cfg, Rng* rng) {
  cfg.validate();
  GenerativeParams p{cfg, {}};
  ParameterSet& w = p.weights;
  const std::size_t z = cfg.latent_dim, h = cfg.transition_width();
  const std::size_t c = cfg.embed_channels, d = cfg.obs_dim;

  add_linear(w, "gen.trans.gate.1.", z, h, rng);
  add_linear(w, "gen.trans.gate.2.", h, z, rng);
  add_linear(w, "gen.trans.prop.1.", z, h, rng);
  add_linear(w, "gen.trans.prop.2.", h, z, rng);
  Tensor lin({z, z});
  if (rng) for (std::size_t i = 0; i < z; ++i) lin.at(i, i) = 1.0;
  w.add("gen.trans.lin.w", std::move(lin));
  w.add("gen.trans.lin.b", Tensor({z}));
  // Scale head starts input-independent at softplus(b) = 1.
  w.add("gen.trans.scale.w", Tensor({z, z}));
  w.add("gen.trans.scale.b", Tensor({z}, rng ? kRhoForUnitGamma : 0.0));

  for (std::size_t l = 0; l < kEmbedLayers; ++l) {
    const std::size_t in = l == 0 ? z : c;
    const double sd = 1.0 / std::sqrt(static_cast<double>(in * kEmbedKernel));
    w.add(embed_name(l, "w"), rng ? random_normal({c, in, kEmbedKernel}, sd, *rng) : Tensor({c, in, kEmbedKernel}));
    w.add(embed_name(l, "b"), Tensor({c}));
  }
  if (z != c) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(z));
    w.add("gen.embed.skip", rng ? random_normal({z, c}, sd, *rng) : Tensor({z, c}));
  }

  add_linear(w, "gen.emit.1.", c, cfg.emission_hidden, rng);
  add_linear(w, "gen.emit.2.", cfg.emission_hidden, d, rng);
  if (c != d) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(c));
    w.add("gen.emit.skip", rng ? random_normal({c, d}, sd, *rng) : Tensor({c, d}));
  }
  w.add("gen.rho", Tensor::scalar(rng ? kRhoForUnitGamma : 0.0));
  return p;
}

ad::Var linear(Binder& b, ad::Var x, const std::string& prefix) {
  return ad::add_rowwise(ad::matmul(x, b(prefix + "w")), b(prefix + "b"));
}

Tensor as_row(const Tensor& v) {
  if (v.rank() == 2) return v;
  return Tensor::row(v.values());
}

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

GenerativeParams GenerativeParams::init(const ModelConfig& config, Rng& rng) { return build(config, &rng); }

GenerativeParams GenerativeParams::zeros(const ModelConfig& config) { return build(config, nullptr); }

double GenerativeParams::gamma() const { return ad::softplus(weights.get("gen.rho")[0]); }

namespace gen {

GaussianVar gated_transition(Binder& theta, ad::Var z_prev) {
  const std::size_t z = theta.params().get("gen.trans.lin.b").numel();
  if (z_prev.value().rank() != 2 || z_prev.value().cols() != z) {
    throw DimensionError("gated_transition: expected rows of width " + std::to_string(z) + ", got " +
                         shape_string(z_prev.shape()));
  }
  ad::Var gate = ad::sigmoid(linear(theta, ad::relu(linear(theta, z_prev, "gen.trans.gate.1.")), "gen.trans.gate.2."));
  ad::Var proposal = linear(theta, ad::relu(linear(theta, z_prev, "gen.trans.prop.1.")), "gen.trans.prop.2.");
  ad::Var lin = linear(theta, z_prev, "gen.trans.lin.");
  // (1 − g)⊙lin + g⊙h
  ad::Var mean = ad::add(lin, ad::mul(gate, ad::sub(proposal, lin)));
  ad::Var scale = ad::softplus(linear(theta, ad::relu(proposal), "gen.trans.scale."));
  return {mean, scale};
}

ad::Var embed(Binder& theta, ad::Var z) {
  ad::Var a = z;
  for (std::size_t l = 0; l < kEmbedLayers; ++l) {
    ad::Var conv = ad::relu(ad::conv1d(a, theta(embed_name(l, "w")), theta(embed_name(l, "b")), 1, 1));
    ad::Var skip = a;
    if (a.value().cols() != conv.value().cols()) skip = ad::matmul(a, theta("gen.embed.skip"));
    a = ad::add(conv, skip);
  }
  return a;
}

ad::Var embed_upsample(Binder& theta, ad::Var z, std::size_t k) { return ad::repeat_rows(embed(theta, z), k); }

ad::Var emission_mean(Binder& theta, ad::Var e) {
  const std::size_t c = theta.params().get("gen.emit.1.w").dim(0);
  if (e.value().rank() != 2 || e.value().cols() != c) {
    throw DimensionError("emission_mean: expected " + std::to_string(c) + " channels, got " +
                         shape_string(e.shape()));
  }
  ad::Var mu = linear(theta, ad::relu(linear(theta, e, "gen.emit.1.")), "gen.emit.2.");
  ad::Var skip = theta.params().contains("gen.emit.skip") ? ad::matmul(e, theta("gen.emit.skip")) : e;
  return ad::add(mu, skip);
}

ad::Var observation_scale(Binder& theta) { return ad::softplus(theta("gen.rho")); }

ad::Var log_prior(Binder& theta, ad::Var z, ModelMode mode) {
  const Tensor& zv = z.value();
  const std::size_t length = zv.rows(), dim = zv.cols();
  // N(0, I) everywhere except the transition steps in Markov mode.
  const std::size_t iso_rows = mode == ModelMode::Markov ? 1 : length;
  ad::Var iso = ad::first_rows(z, iso_rows);
  ad::Var lp = ad::add_scalar(ad::scale(ad::sum(ad::square(iso)), -0.5),
                              -kHalfLog2Pi * static_cast<double>(iso_rows * dim));
  if (mode == ModelMode::Markov && length > 1) {
    std::vector<ad::Var> prev_rows, next_rows;
    for (std::size_t t = 0; t + 1 < length; ++t) {
      prev_rows.push_back(ad::row(z, t));
      next_rows.push_back(ad::row(z, t + 1));
    }
    GaussianVar p = gated_transition(theta, ad::stack_rows(prev_rows));
    lp = ad::add(lp, diag_gaussian_log_pdf(ad::stack_rows(next_rows), p.mean, p.scale));
  }
  return lp;
}

ad::Var log_likelihood(Binder& theta, ad::Var x, ad::Var z, std::span<const double> frame_mask) {
  const Tensor& xv = x.value();
  const std::size_t frames = xv.rows(), dim = xv.cols(), latents = z.value().rows();
  const std::size_t k = frames / latents;
  if (k * latents != frames) {
    throw ContractError("log-likelihood needs T = k·L, got T=" + std::to_string(frames) +
                        " L=" + std::to_string(latents));
  }
  if (!frame_mask.empty() && frame_mask.size() != frames) throw DimensionError("frame mask length differs from T");
  // The emission MLP acts per frame, so it runs on the L distinct embedding rows
  // and the means are repeated afterwards.
  ad::Var mu = ad::repeat_rows(emission_mean(theta, embed(theta, z)), k);
  ad::Var sq = ad::square(ad::sub(x, mu));
  double counted = static_cast<double>(frames);
  if (!frame_mask.empty()) {
    Tensor m({frames, dim});
    counted = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      counted += frame_mask[t];
      for (std::size_t d = 0; d < dim; ++d) m.at(t, d) = frame_mask[t];
    }
    sq = ad::mul(sq, x.graph().constant(std::move(m)));
  }
  const double n = counted * static_cast<double>(dim);
  ad::Var log_gamma = ad::log(observation_scale(theta));
  ad::Var quad = ad::mul(ad::sum(sq), ad::exp(ad::scale(log_gamma, -2.0)));
  ad::Var lp = ad::neg(ad::add(ad::scale(log_gamma, n), ad::scale(quad, 0.5)));
  return ad::add_scalar(lp, -kHalfLog2Pi * n);
}

}  // namespace gen

DiagGaussian gated_transition(const Tensor& z_prev, const GenerativeParams& params) {
  ad::Graph g;
  Binder theta(g, params.weights, false);
  GaussianVar p = gen::gated_transition(theta, g.constant(as_row(z_prev)));
  return p.value();
}

Tensor embed_upsample(const Tensor& z, const GenerativeParams& params) {
  ad::Graph g;
  Binder theta(g, params.weights, false);
  return gen::embed_upsample(theta, g.constant(as_row(z)), params.config.upsample).value();
}

Tensor emission_mean(const Tensor& e, const GenerativeParams& params) {
  ad::Graph g;
  Binder theta(g, params.weights, false);
  return gen::emission_mean(theta, g.constant(as_row(e))).value();
}

Tensor sample_prior_path(std::size_t length, const GenerativeParams& params, ModelMode mode, Rng& rng) {
  if (length == 0) throw ContractError("latent path length must be at least 1");
  const std::size_t dim = params.config.latent_dim;
  Tensor z({length, dim});
  for (std::size_t d = 0; d < dim; ++d) z.at(0, d) = rng.normal();
  for (std::size_t t = 1; t < length; ++t) {
    if (mode == ModelMode::IsotropicPrior) {
      for (std::size_t d = 0; d < dim; ++d) z.at(t, d) = rng.normal();
      continue;
    }
    const DiagGaussian p = gated_transition(Tensor::row(z.row_span(t - 1)), params);
    for (std::size_t d = 0; d < dim; ++d) z.at(t, d) = p.mean[d] + p.scale[d] * rng.normal();
  }
  return z;
}

double log_joint(const Tensor& x, const Tensor& z, const GenerativeParams& params, ModelMode mode) {
  if (x.rows() != params.config.upsample * z.rows()) {
    throw ContractError("log_joint needs T = k·L (T=" + std::to_string(x.rows()) + ", k=" +
                        std::to_string(params.config.upsample) + ", L=" + std::to_string(z.rows()) + ")");
  }
  ad::Graph g;
  Binder theta(g, params.weights, false);
  ad::Var zv = g.constant(z);
  return ad::add(gen::log_prior(theta, zv, mode), gen::log_likelihood(theta, g.constant(x), zv)).value().item();
}

}  // namespace cdmm
