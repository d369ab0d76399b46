#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cdmm/tensor.hpp"

namespace cdmm {

struct FeatureSequence {
  std::string id;
  Tensor features;                              // T×D
  std::optional<std::vector<int>> frame_labels;  // length T
  std::optional<std::vector<int>> phone_seq;

  std::size_t length() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
  void validate() const;

  friend bool operator==(const FeatureSequence&, const FeatureSequence&) = default;
};

using Corpus = std::vector<FeatureSequence>;

// Common feature width; throws DimensionError when utterances disagree.
std::size_t corpus_dim(const Corpus& corpus);
std::size_t corpus_frames(const Corpus& corpus);

inline constexpr char kFeatureMagic[] = "CDFT";
inline constexpr std::uint32_t kFeatureVersion = 1;

std::vector<char> encode_features(const Corpus& corpus);
Corpus decode_features(std::vector<char> bytes);
void write_features(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_features(const std::filesystem::path& path);

struct ManifestEntry {
  std::string id;
  std::filesystem::path path;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

// One `id<TAB>path` line per utterance. Relative paths resolve against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
// Loads every listed utterance, in manifest order.
Corpus load_manifest(const std::filesystem::path& path);

struct SyntheticConfig {
  std::size_t n_states = 12;
  std::size_t dim = 39;
  double self_transition = 0.9;
  // Optional explicit n_states×n_states row-stochastic matrix; overrides self_transition.
  std::vector<double> transition;
  double mean_scale = 0.5;      // sd of the per-state means
  double noise_min = 0.8;       // per-state, per-dimension noise sd drawn from [noise_min, noise_max]
  double noise_max = 1.2;
  double nonlinearity = 0.5;    // strength of the tanh distortion
  std::size_t min_length = 64;
  std::size_t max_length = 192;
  std::size_t n_utterances = 200;
  std::uint64_t seed = 0;
  std::string id_prefix = "syn";

  void validate() const;
};

// Row-major transition matrix implied by the config.
std::vector<double> transition_matrix(const SyntheticConfig& cfg);

Corpus generate_synthetic_corpus(const SyntheticConfig& cfg);

// Consecutive duplicates removed.
std::vector<int> collapse_runs(const std::vector<int>& path);

inline std::size_t round_up4(std::size_t n) { return (n + 3) / 4 * 4; }

struct Batch {
  Tensor features;                  // B×T_max×D, zeros where masked
  std::vector<std::uint8_t> mask;   // B×T_max
  std::vector<std::size_t> lengths; // real frames per utterance
  std::vector<std::size_t> indices; // position of each utterance in the input slice

  std::size_t size() const { return lengths.size(); }
  std::size_t max_length() const { return features.dim(1); }
  // Utterance b cut to its own padded length round_up4(lengths[b]).
  Tensor sequence(std::size_t b) const;
  // 1 for real frames, 0 for padding, over the same frames as sequence(b).
  std::vector<double> frame_mask(std::size_t b) const;
};

std::vector<Batch> batchify(const Corpus& slice, std::size_t batch_size, std::uint64_t seed);

}  // namespace cdmm
