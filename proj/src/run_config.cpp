#include "cdmm/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <stdexcept>
#include <sstream>

#include "cdmm/error.hpp"

namespace cdmm {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

struct BadValue {
  std::string expected;
};

std::size_t parse_size(const std::string& s) {
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) throw BadValue{"a non-negative integer"};
  return v;
}

double parse_real(const std::string& s) {
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) throw BadValue{"a real number"};
  return v;
}

std::vector<double> parse_reals(const std::string& s) {
  std::vector<double> out;
  if (trim(s).empty()) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_real(trim(item)));
  return out;
}

std::string show(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::string show(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + show(v[i]);
  return out;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_KEY(name, field)                                                   \
  Key {                                                                         \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_size(v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }             \
  }
#define REAL_KEY(name, field)                                                   \
  Key {                                                                         \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_real(v); }, \
        [](const RunConfig& c) { return show(c.field); }                       \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> k{
      SIZE_KEY("model.latent_dim", model.latent_dim),
      SIZE_KEY("model.encoder_channels", model.encoder_channels),
      SIZE_KEY("model.embed_channels", model.embed_channels),
      SIZE_KEY("model.emission_hidden", model.emission_hidden),
      SIZE_KEY("model.transition_hidden", model.transition_hidden),
      SIZE_KEY("model.upsample", model.upsample),

      REAL_KEY("train.lr", train.lr),
      SIZE_KEY("train.epochs", train.epochs),
      SIZE_KEY("train.batch_size", train.batch_size),
      REAL_KEY("train.l2_weight", train.l2_weight),
      REAL_KEY("train.kl_start", train.kl_start),
      SIZE_KEY("train.kl_anneal_epochs", train.kl_anneal_epochs),
      SIZE_KEY("train.plateau_patience", train.plateau_patience),
      REAL_KEY("train.plateau_factor", train.plateau_factor),

      SIZE_KEY("data.n_states", data.n_states),
      SIZE_KEY("data.dim", data.dim),
      REAL_KEY("data.self_transition", data.self_transition),
      Key{"data.transition", [](RunConfig& c, const std::string& v) { c.data.transition = parse_reals(v); },
          [](const RunConfig& c) { return show(c.data.transition); }},
      REAL_KEY("data.mean_scale", data.mean_scale),
      REAL_KEY("data.noise_min", data.noise_min),
      REAL_KEY("data.noise_max", data.noise_max),
      REAL_KEY("data.nonlinearity", data.nonlinearity),
      SIZE_KEY("data.min_length", data.min_length),
      SIZE_KEY("data.max_length", data.max_length),
      Key{"data.id_prefix", [](RunConfig& c, const std::string& v) { c.data.id_prefix = v; },
          [](const RunConfig& c) { return c.data.id_prefix; }},
      SIZE_KEY("data.train_utterances", counts.train),
      SIZE_KEY("data.dev_utterances", counts.dev),
      SIZE_KEY("data.probe_utterances", counts.probe),
      SIZE_KEY("data.test_utterances", counts.test),

      Key{"protocol.fractions", [](RunConfig& c, const std::string& v) { c.protocol.fractions = parse_reals(v); },
          [](const RunConfig& c) { return show(c.protocol.fractions); }},
      SIZE_KEY("protocol.n_splits", protocol.n_splits),
      SIZE_KEY("protocol.n_probe_seeds", protocol.n_probe_seeds),

      REAL_KEY("probe.lr", protocol.probe.lr),
      SIZE_KEY("probe.max_epochs", protocol.probe.max_epochs),
      SIZE_KEY("probe.frame_batch", protocol.probe.frame_batch),
      SIZE_KEY("probe.ctc_batch", protocol.probe.ctc_batch),
      REAL_KEY("probe.holdout_fraction", protocol.probe.holdout_fraction),
      SIZE_KEY("probe.patience", protocol.probe.patience),

      REAL_KEY("supervised.lr", supervised.lr),
      SIZE_KEY("supervised.epochs", supervised.epochs),
      SIZE_KEY("supervised.batch_size", supervised.batch_size),
      REAL_KEY("supervised.l2_weight", supervised.l2_weight),
  };
  return k;
}

#undef SIZE_KEY
#undef REAL_KEY

}  // namespace

void RunConfig::validate() const {
  ModelConfig m = model;
  m.obs_dim = data.dim;
  m.validate();
  train.validate();
  data.validate();
  protocol.validate();
  supervised.validate();
}

RunConfig parse_run_config(std::string_view text, const std::string& origin) {
  std::map<std::string, const Key*> by_name;
  for (const Key& k : keys()) by_name[k.name] = &k;
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  for (std::size_t line = 1; std::getline(in, raw); ++line) {
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#') continue;
    const std::string where = origin + ":" + std::to_string(line);
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw FormatError(where + ": expected key = value");
    const std::string key = trim(s.substr(0, eq)), value = trim(s.substr(eq + 1));
    const auto it = by_name.find(key);
    if (it == by_name.end()) throw FormatError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw FormatError(where + ": key '" + key + "' given twice");
    try {
      it->second->set(cfg, value);
    } catch (const BadValue& b) {
      throw FormatError(where + ": '" + key + "' expects " + b.expected + ", got '" + value + "'");
    }
  }
  try {
    cfg.validate();
  } catch (const std::logic_error& e) {
    throw FormatError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read config file '" + path.string() + "'");
  std::stringstream s;
  s << in.rdbuf();
  return parse_run_config(s.str(), path.string());
}

std::string format_run_config(const RunConfig& cfg) {
  std::string out;
  for (const Key& k : keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> out;
  for (const Key& k : keys()) out.push_back(k.name);
  return out;
}

}  // namespace cdmm
