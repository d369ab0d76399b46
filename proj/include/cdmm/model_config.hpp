#pragma once

#include <cstddef>
#include <string>

namespace cdmm {

// Markov: gated transition prior. IsotropicPrior: N(0, I) at every latent step.
enum class ModelMode { Markov, IsotropicPrior };

std::string to_string(ModelMode mode);
ModelMode parse_model_mode(const std::string& s);

// Architecture sizes shared by the generative model and the inference network.
struct ModelConfig {
  std::size_t obs_dim = 39;
  std::size_t latent_dim = 16;
  std::size_t encoder_channels = 1024;
  std::size_t embed_channels = 1024;
  std::size_t emission_hidden = 256;
  // Hidden width of the gate and proposal MLPs; 0 means latent_dim.
  std::size_t transition_hidden = 0;
  std::size_t upsample = 4;

  std::size_t transition_width() const { return transition_hidden ? transition_hidden : latent_dim; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace cdmm
