#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cdmm/data.hpp"
#include "cdmm/generative.hpp"
#include "cdmm/inference.hpp"
#include "cdmm/model_config.hpp"
#include "cdmm/params.hpp"
#include "cdmm/probes.hpp"
#include "cdmm/trainer.hpp"

namespace cdmm {

// ---- label splits ----

struct SplitSpec {
  double fraction = 1.0;
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> ids;  // in corpus order

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

// max(1, round-half-up(fraction·n)).
std::size_t split_size(double fraction, std::size_t n);

// Split i draws a uniform subset with seed derive_seed(base_seed, i). Splits of
// different fractions with the same index are nested.
std::vector<SplitSpec> sample_splits(const std::vector<std::string>& ids, double fraction, std::size_t n_splits,
                                     std::uint64_t base_seed);
std::vector<SplitSpec> sample_splits(const Corpus& corpus, double fraction, std::size_t n_splits,
                                     std::uint64_t base_seed);

// ---- outlier-rejected aggregation ----

// Quantile by linear interpolation at position p·(n−1) of the sorted values.
double quantile_linear(std::span<const double> sorted, double p);

struct IqrSummary {
  double mean = 0.0;         // over survivors
  double sd = 0.0;           // sample sd over survivors; 0 for a single survivor
  std::size_t removed = 0;
  std::size_t count = 0;     // values supplied
  double q1 = 0.0, q3 = 0.0;
};

// Discards values outside [q1 − 1.5·iqr, q3 + 1.5·iqr]. Fewer than four values:
// plain mean, nothing removed, warning logged.
IqrSummary aggregate_iqr(std::span<const double> values);

// ---- feature extraction ----

// x[T×D] with T a multiple of 4 -> features[T×F].
using FeatureExtractor = std::function<Tensor(const Tensor&)>;

FeatureExtractor identity_extractor();
FeatureExtractor convdmm_extractor(GenerativeParams theta, InferenceParams phi);

// Runs `fx` on each utterance padded to round_up4(T) and keeps the first T rows.
// Ids and labels are carried over.
Corpus extract_corpus(const Corpus& corpus, const FeatureExtractor& fx, std::size_t threads = 1);

// Pairs externally computed features with the labels of `labeled` by id. A
// missing or length-mismatched utterance raises FormatError naming it.
Corpus attach_labels(const Corpus& features, const Corpus& labeled);

// Phone inventory size implied by the labels (max id + 1).
std::size_t label_count(const Corpus& corpus);

// ---- supervised transfer baseline ----

// The inference encoder (inf.enc.*) topped by a linear CTC head (sup.head.{w,b})
// whose per-step logits are repeated to the frame rate.
struct SupervisedModel {
  ModelConfig config;
  std::size_t n_phones = 0;
  ParameterSet weights;

  static SupervisedModel init(const ModelConfig& config, std::size_t n_phones, Rng& rng);
  static SupervisedModel zeros(const ModelConfig& config, std::size_t n_phones);
  friend bool operator==(const SupervisedModel&, const SupervisedModel&) = default;
};

// [T×(n_phones+1)] CTC logits and [T×C] encoder features; T a multiple of 4.
Tensor supervised_logits(const SupervisedModel& m, const Tensor& x);
Tensor supervised_features(const SupervisedModel& m, const Tensor& x);
FeatureExtractor supervised_extractor(SupervisedModel m);
// Greedy-decoded PER of the model's own head, pooled over the corpus.
double supervised_per(const SupervisedModel& m, const Corpus& corpus, std::size_t threads = 1);

struct SupervisedConfig {
  double lr = 1e-3;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double l2_weight = 5e-7;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
};

struct SupervisedEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean CTC loss per utterance
  double dev_loss = 0.0;
};

struct SupervisedResult {
  SupervisedModel best;  // lowest dev loss
  std::vector<SupervisedEpoch> log;
  double dev_per = 0.0;
};

// End-to-end CTC training of encoder and head; nothing is frozen.
SupervisedResult train_supervised_baseline(const Corpus& train_corpus, const Corpus& dev_corpus,
                                           const ModelConfig& model, std::size_t n_phones,
                                           const SupervisedConfig& cfg);

inline constexpr char kSupervisedMagic[] = "CDSV";
inline constexpr std::uint32_t kSupervisedVersion = 1;
void save_supervised(const std::filesystem::path& path, const SupervisedModel& m);
SupervisedModel load_supervised(const std::filesystem::path& path);

// ---- the protocol ----

struct ProtocolConfig {
  std::vector<double> fractions{0.01, 0.1, 0.5};
  std::size_t n_splits = 3;
  std::size_t n_probe_seeds = 5;
  std::uint64_t split_seed = 0;
  std::uint64_t probe_seed = 0;  // probe run k uses probe_seed + k
  ProbeConfig probe;
  std::size_t jobs = 1;

  void validate() const;
};

// One representation: frozen features of the probe pool and of the test set.
struct SystemFeatures {
  std::string name;
  Corpus pool;
  Corpus test;
};

struct ProbeRun {
  std::string system;
  double fraction = 0.0;
  std::size_t split_index = 0;
  std::uint64_t split_seed = 0;
  std::uint64_t probe_seed = 0;
  double fer = 0.0;
  double per = 0.0;

  friend bool operator==(const ProbeRun&, const ProbeRun&) = default;
};

struct ProtocolReport {
  std::vector<std::string> systems;
  std::vector<double> fractions;
  std::vector<SplitSpec> splits;
  std::vector<std::uint64_t> probe_seeds;
  std::vector<ProbeRun> runs;  // system-major, then fraction, split, probe seed

  friend bool operator==(const ProtocolReport&, const ProtocolReport&) = default;
};

enum class Metric { Fer, Per };
std::string to_string(Metric m);

// For every system, fraction, split and probe seed: a frame classifier and a
// CTC recognizer trained on the split's pool features, scored on the test set.
ProtocolReport run_protocol(const std::vector<SystemFeatures>& systems, const ProtocolConfig& cfg);

// The raw values of one (system, fraction, metric) cell, in run order.
std::vector<double> cell_values(const ProtocolReport& r, const std::string& system, double fraction, Metric m);
// Mean over probe seeds for each split.
std::vector<double> split_means(const ProtocolReport& r, const std::string& system, double fraction, Metric m);

struct CellSummary {
  std::string system;
  double fraction = 0.0;
  Metric metric = Metric::Fer;
  std::vector<double> values;
  IqrSummary aggregate;
};
std::vector<CellSummary> summarize(const ProtocolReport& r);

// Rows = systems, columns = fractions × {FER, PER}, cells = aggregate_iqr means.
std::string report_csv(const ProtocolReport& r);
// Raw runs, split specs and aggregates.
std::string report_json(const ProtocolReport& r);
// Inverse of report_json; aggregates are recomputed, not read. Throws FormatError.
ProtocolReport parse_report_json(const std::string& text);

struct AblationResult {
  TrainResult markov, isotropic;
  ProtocolReport report;  // systems "convdmm" and "gaussvae"
};

// Trains both priors with the same data, seeds and config, then probes the
// best checkpoints with identical splits.
AblationResult run_ablation(const Corpus& train_corpus, const Corpus& dev_corpus, const Corpus& pool,
                            const Corpus& test, const ModelConfig& model, TrainConfig train_cfg,
                            const ProtocolConfig& protocol);

}  // namespace cdmm
