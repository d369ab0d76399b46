#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "cdmm/gaussian.hpp"
#include "cdmm/generative.hpp"
#include "cdmm/model_config.hpp"
#include "cdmm/params.hpp"
#include "cdmm/rng.hpp"

namespace cdmm {

inline constexpr std::array<std::size_t, 13> kEncoderKernels{3, 3, 3, 3, 3, 4, 4, 3, 3, 3, 3, 3, 3};
inline constexpr std::array<std::size_t, 13> kEncoderStrides{1, 1, 1, 1, 1, 2, 2, 1, 1, 1, 1, 1, 1};
inline constexpr std::size_t kEncoderPad = 1;
inline constexpr std::size_t kEncoderDownsample = 4;

// Receptive field (in input frames) of one output frame of the encoder.
std::size_t encoder_receptive_field();

// Weights of the amortized posterior:
//   inf.enc.<l>.{w,b}   13-layer strided CNN
//   inf.comb.*          combiner (W, b, W_mu, b_mu, W_sigma, b_sigma)
//   inf.z0              learned seed fed to the combiner for the first step
struct InferenceParams {
  ModelConfig config;
  ParameterSet weights;

  static InferenceParams init(const ModelConfig& config, Rng& rng);
  static InferenceParams zeros(const ModelConfig& config);

  friend bool operator==(const InferenceParams&, const InferenceParams&) = default;
};

struct PosteriorPath {
  Tensor z;                          // L×Z sampled path
  std::vector<DiagGaussian> steps;   // q(z_τ | z_{τ−1}, x)
  Tensor noise;                      // L×Z standard-normal draws
};

struct ElboBreakdown {
  double recon = 0.0;      // nats
  double kl_total = 0.0;   // nats
  double kl_weight = 1.0;
  double elbo = 0.0;       // recon − β·kl_total
  std::size_t frames = 0;  // unmasked frames
  double recon_per_frame() const { return recon / static_cast<double>(frames); }
  double kl_per_frame() const { return kl_total / static_cast<double>(frames); }
  double elbo_per_frame() const { return elbo / static_cast<double>(frames); }
};

namespace inf {

// x[T×D] -> h[T/4 × C]
ad::Var encode(Binder& phi, ad::Var x);
// z_prev[N×Z], h[N×C] -> q rows
GaussianVar combine(Binder& phi, ad::Var z_prev, ad::Var h);

struct PosteriorGraph {
  ad::Var z;  // L×Z
  std::vector<ad::Var> z_rows;
  std::vector<GaussianVar> q;  // one 1×Z posterior per step
};
// Sequential reparameterized sampling: z_τ = μ_τ + σ_τ ⊙ noise_τ.
PosteriorGraph posterior(Binder& phi, ad::Var x, const Tensor& noise);

struct ElboGraph {
  ad::Var elbo;
  ad::Var recon;
  ad::Var kl;
};
// Single-sample ELBO with analytic per-step KL. `frame_mask` as in gen::log_likelihood.
ElboGraph elbo(Binder& theta, Binder& phi, ad::Var x, const Tensor& noise, ModelMode mode, double beta,
               std::span<const double> frame_mask = {});

}  // namespace inf

Tensor encode(const Tensor& x, const InferenceParams& phi);
DiagGaussian combine(const Tensor& z_prev, const Tensor& h, const InferenceParams& phi);
PosteriorPath posterior_sample(const Tensor& x, const InferenceParams& phi, Rng& rng);
// Same with explicit noise draws (L×Z).
PosteriorPath posterior_with_noise(const Tensor& x, const InferenceParams& phi, const Tensor& noise);
ElboBreakdown elbo(const Tensor& x, const GenerativeParams& theta, const InferenceParams& phi, ModelMode mode,
                   double beta, Rng& rng, std::span<const double> frame_mask = {});
// Posterior-mean chain pushed through the embedding CNN: [T×C]. Deterministic.
Tensor extract_features(const Tensor& x, const GenerativeParams& theta, const InferenceParams& phi);

}  // namespace cdmm
