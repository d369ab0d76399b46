#pragma once

#include <cstddef>
#include <span>

#include "cdmm/gaussian.hpp"
#include "cdmm/model_config.hpp"
#include "cdmm/params.hpp"
#include "cdmm/rng.hpp"

namespace cdmm {

// Learnable weights of the generative model:
//   gen.trans.*  gated transition (gate MLP, proposal MLP, linear map, scale head)
//   gen.embed.*  four-layer residual CNN over the latent path
//   gen.emit.*   two-layer residual MLP producing the observation mean
//   gen.rho      unconstrained observation scale, gamma = softplus(rho)
struct GenerativeParams {
  ModelConfig config;
  ParameterSet weights;

  // Seeded initialization. The linear transition map starts at the identity and
  // gamma starts at 1.
  static GenerativeParams init(const ModelConfig& config, Rng& rng);
  // All weights and biases zero (the linear map and rho included).
  static GenerativeParams zeros(const ModelConfig& config);

  friend bool operator==(const GenerativeParams&, const GenerativeParams&) = default;

  double gamma() const;
};

inline constexpr std::size_t kEmbedLayers = 4;
inline constexpr std::size_t kEmbedKernel = 3;

// Graph-level building blocks. Every latent is a row: z[N×Z].
namespace gen {

// Prior over z_τ for each row z_{τ−1} of `z_prev`.
GaussianVar gated_transition(Binder& theta, ad::Var z_prev);
// Residual CNN over z[L×Z] before repetition: [L×C].
ad::Var embed(Binder& theta, ad::Var z);
// embed() followed by k-fold frame repetition: [kL×C].
ad::Var embed_upsample(Binder& theta, ad::Var z, std::size_t k);
// Emission mean per frame: e[T×C] -> [T×D].
ad::Var emission_mean(Binder& theta, ad::Var e);
ad::Var observation_scale(Binder& theta);
// log p(z_{1:L}) for z[L×Z] under the chosen prior.
ad::Var log_prior(Binder& theta, ad::Var z, ModelMode mode);
// Σ over unmasked frames of log N(x_t; μ_t, γ). `frame_mask` holds one entry per
// row of x (1 = real frame); empty means every frame counts.
ad::Var log_likelihood(Binder& theta, ad::Var x, ad::Var z, std::span<const double> frame_mask = {});

}  // namespace gen

// Value-level API.
DiagGaussian gated_transition(const Tensor& z_prev, const GenerativeParams& params);
Tensor embed_upsample(const Tensor& z, const GenerativeParams& params);
Tensor emission_mean(const Tensor& e, const GenerativeParams& params);
// z_1 ~ N(0, I); later steps from the transition (Markov) or N(0, I) (IsotropicPrior).
Tensor sample_prior_path(std::size_t length, const GenerativeParams& params, ModelMode mode, Rng& rng);
// log p(z_{1:L}) + Σ_t log N(x_t; μ_t, γ); requires T = k·L.
double log_joint(const Tensor& x, const Tensor& z, const GenerativeParams& params, ModelMode mode);

}  // namespace cdmm
