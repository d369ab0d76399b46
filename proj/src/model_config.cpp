#include "cdmm/model_config.hpp"

#include "cdmm/error.hpp"

namespace cdmm {

std::string to_string(ModelMode mode) { return mode == ModelMode::Markov ? "markov" : "isotropic"; }

ModelMode parse_model_mode(const std::string& s) {
  if (s == "markov" || s == "convdmm") return ModelMode::Markov;
  if (s == "isotropic" || s == "gaussvae") return ModelMode::IsotropicPrior;
  throw ContractError("unknown model mode '" + s + "' (expected markov or isotropic)");
}

void ModelConfig::validate() const {
  if (obs_dim == 0 || latent_dim == 0 || encoder_channels == 0 || embed_channels == 0 || emission_hidden == 0) {
    throw ContractError("model widths must be positive");
  }
  if (upsample == 0) throw ContractError("upsample factor must be at least 1");
}

}  // namespace cdmm
