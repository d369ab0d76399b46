#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cdmm/data.hpp"
#include "cdmm/generative.hpp"
#include "cdmm/inference.hpp"
#include "cdmm/model_config.hpp"
#include "cdmm/params.hpp"

namespace cdmm {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double l2_weight = 5e-7;
  double kl_start = 0.5;
  std::size_t kl_anneal_epochs = 20;
  std::size_t plateau_patience = 3;
  double plateau_factor = 0.5;
  std::uint64_t seed = 0;
  ModelMode mode = ModelMode::Markov;
  // Worker threads for per-utterance gradients. Results do not depend on it.
  std::size_t threads = 1;

  void validate() const;
};

// β for a 0-based epoch index.
double kl_anneal_weight(std::size_t epoch, const TrainConfig& cfg);

// Improvement must beat the best loss so far by more than this.
inline constexpr double kPlateauThreshold = 1e-6;

// Replays the patience counter over the whole history and returns the learning
// rate to use after its last entry.
double plateau_lr(const std::vector<double>& dev_losses, double current_lr, const TrainConfig& cfg);

struct AdamState {
  ParameterSet m, v;
  std::uint64_t step = 0;

  static AdamState for_params(const ParameterSet& params);
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// One Adam step on `params` descending `grads` (+ l2·param).
void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& state, double lr, double l2_weight);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;     // −mean ELBO at the epoch's β, averaged over the epoch
  double dev_loss = 0.0;       // −mean ELBO at β = 1, end of epoch
  double dev_loss_beta = 0.0;  // same at the epoch's β
  double beta = 0.0;
  double lr = 0.0;             // rate used during the epoch
};

struct Checkpoint {
  GenerativeParams theta;
  InferenceParams phi;
  AdamState adam_theta, adam_phi;
  std::size_t epoch = 0;  // epochs completed
  double lr = 0.0;        // rate for the next epoch
  ModelMode mode = ModelMode::Markov;
  std::vector<double> dev_history;
  std::uint64_t config_hash = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr char kCheckpointMagic[] = "CDMM";
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t config_hash(const ModelConfig& model, const TrainConfig& train);

// Per-utterance ELBO terms for a padded sequence; masked frames are excluded.
struct UtteranceLoss {
  double loss = 0.0;  // −ELBO
  ParameterSet grad_theta, grad_phi;
};

// −ELBO of one utterance with its gradients. `noise_seed` fixes the reparameterization draw.
UtteranceLoss utterance_loss(const Tensor& x, std::span<const double> mask, const GenerativeParams& theta,
                             const InferenceParams& phi, ModelMode mode, double beta, std::uint64_t noise_seed,
                             bool with_gradients);

// Mean −ELBO over a corpus at weight β with per-utterance noise from `seed`.
double corpus_loss(const Corpus& corpus, const GenerativeParams& theta, const InferenceParams& phi, ModelMode mode,
                   double beta, std::uint64_t seed, std::size_t threads = 1);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // last.ckpt, best.ckpt and train_log.csv
  std::function<void(const EpochRecord&)> on_epoch;
  std::optional<Checkpoint> resume;
};

struct TrainResult {
  Checkpoint last;
  Checkpoint best;
  std::vector<EpochRecord> log;
};

// Throws NumericalError naming the batch when a loss or gradient is not finite.
TrainResult train(const Corpus& train_corpus, const Corpus& dev_corpus, const ModelConfig& model,
                  const TrainConfig& cfg, const TrainOptions& opts = {});

std::string log_header();
std::string log_line(const EpochRecord& r);

// Runs fn(i) for i in [0, n) on up to `threads` workers; the first exception is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace cdmm
