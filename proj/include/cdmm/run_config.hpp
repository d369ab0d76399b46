#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cdmm/data.hpp"
#include "cdmm/eval.hpp"
#include "cdmm/model_config.hpp"
#include "cdmm/probes.hpp"
#include "cdmm/trainer.hpp"

namespace cdmm {

// How gen-data partitions one synthetic corpus; all four sets share the generator's states.
struct CorpusCounts {
  std::size_t train = 200;
  std::size_t dev = 20;
  std::size_t probe = 200;
  std::size_t test = 100;

  std::size_t total() const { return train + dev + probe + test; }
};

// Everything a run can be configured with. Seeds and the training mode are not
// config keys: they come from --seed and --mode. obs_dim follows the data.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticConfig data;
  CorpusCounts counts;
  ProtocolConfig protocol;
  SupervisedConfig supervised;

  void validate() const;
};

// Flat `key = value` lines; blank lines and lines starting with '#' are skipped.
// Unknown or repeated keys and unparsable values raise FormatError naming the line.
RunConfig parse_run_config(std::string_view text, const std::string& origin = "config");
RunConfig load_run_config(const std::filesystem::path& path);
// Every key with its current value, one per line; parse_run_config inverts it.
std::string format_run_config(const RunConfig& cfg);
std::vector<std::string> run_config_keys();

}  // namespace cdmm
