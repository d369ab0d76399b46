#include "cdmm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "cdmm/binary_io.hpp"
#include "cdmm/error.hpp"
#include "cdmm/rng.hpp"

namespace cdmm {

namespace {

constexpr std::uint8_t kHasLabels = 1;
constexpr std::uint8_t kHasPhones = 2;

void check_u16(const std::vector<int>& v, const std::string& id, const char* what) {
  for (int x : v) {
    if (x < 0 || x > 0xffff) {
      throw ContractError(std::string(what) + " of '" + id + "' out of u16 range: " + std::to_string(x));
    }
  }
}

}  // namespace

void FeatureSequence::validate() const {
  if (features.rank() != 2) throw DimensionError("features of '" + id + "' must be T×D");
  if (frame_labels && frame_labels->size() != length()) {
    throw DimensionError("frame labels of '" + id + "' have length " + std::to_string(frame_labels->size()) +
                         ", expected " + std::to_string(length()));
  }
}

std::size_t corpus_dim(const Corpus& corpus) {
  if (corpus.empty()) throw ContractError("empty corpus");
  const std::size_t d = corpus.front().dim();
  for (const auto& u : corpus) {
    if (u.dim() != d) {
      throw DimensionError("utterance '" + u.id + "' has width " + std::to_string(u.dim()) + ", expected " +
                           std::to_string(d));
    }
  }
  return d;
}

std::size_t corpus_frames(const Corpus& corpus) {
  std::size_t n = 0;
  for (const auto& u : corpus) n += u.length();
  return n;
}

std::vector<char> encode_features(const Corpus& corpus) {
  ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(corpus.size()));
  for (const auto& u : corpus) {
    u.validate();
    if (u.id.size() > 0xffff) throw ContractError("utterance id too long: " + u.id.substr(0, 32));
    w.u16(static_cast<std::uint16_t>(u.id.size()));
    w.bytes(u.id);
    w.u32(static_cast<std::uint32_t>(u.length()));
    w.u32(static_cast<std::uint32_t>(u.dim()));
    std::uint8_t flags = 0;
    if (u.frame_labels) flags |= kHasLabels;
    if (u.phone_seq) flags |= kHasPhones;
    w.u8(flags);
    for (double v : u.features.values()) w.f64(v);
    if (u.frame_labels) {
      check_u16(*u.frame_labels, u.id, "frame label");
      for (int x : *u.frame_labels) w.u16(static_cast<std::uint16_t>(x));
    }
    if (u.phone_seq) {
      check_u16(*u.phone_seq, u.id, "phone label");
      w.u32(static_cast<std::uint32_t>(u.phone_seq->size()));
      for (int x : *u.phone_seq) w.u16(static_cast<std::uint16_t>(x));
    }
  }
  return w.buffer();
}

Corpus decode_features(std::vector<char> bytes) {
  ByteReader r(std::move(bytes));
  r.expect_magic(kFeatureMagic);
  const std::uint64_t version_at = r.offset();
  if (const std::uint32_t v = r.u32(); v != kFeatureVersion) {
    throw FormatError("unsupported feature file version " + std::to_string(v), version_at);
  }
  const std::uint64_t count_at = r.offset();
  const std::uint32_t count = r.u32();
  // Smallest possible record: empty id, one 1-wide frame.
  if (count > r.remaining() / 19) throw FormatError("utterance count " + std::to_string(count) + " exceeds file size", count_at);

  Corpus corpus;
  corpus.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureSequence u;
    const std::uint16_t id_len = r.u16();
    u.id = r.string(id_len);
    const std::uint64_t dims_at = r.offset();
    const std::uint32_t t = r.u32();
    const std::uint32_t d = r.u32();
    if (t == 0 || d == 0) throw FormatError("utterance '" + u.id + "' has an empty dimension", dims_at);
    const std::uint64_t flags_at = r.offset();
    const std::uint8_t flags = r.u8();
    if (flags & ~(kHasLabels | kHasPhones)) throw FormatError("unknown flag bits", flags_at);
    const std::uint64_t n = static_cast<std::uint64_t>(t) * d;
    if (n > r.remaining() / 8) throw FormatError("truncated features of '" + u.id + "'", r.offset());
    std::vector<double> values(n);
    for (double& v : values) v = r.f64();
    u.features = Tensor({t, d}, std::move(values));
    if (flags & kHasLabels) {
      if (t > r.remaining() / 2) throw FormatError("truncated frame labels of '" + u.id + "'", r.offset());
      std::vector<int> labels(t);
      for (int& x : labels) x = r.u16();
      u.frame_labels = std::move(labels);
    }
    if (flags & kHasPhones) {
      const std::uint32_t len = r.u32();
      if (len > r.remaining() / 2) throw FormatError("truncated phone sequence of '" + u.id + "'", r.offset());
      std::vector<int> phones(len);
      for (int& x : phones) x = r.u16();
      u.phone_seq = std::move(phones);
    }
    corpus.push_back(std::move(u));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last utterance", r.offset());
  return corpus;
}

void write_features(const std::filesystem::path& path, const Corpus& corpus) {
  ByteWriter w;
  const auto bytes = encode_features(corpus);
  w.bytes(std::string_view(bytes.data(), bytes.size()));
  w.save(path);
}

Corpus read_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_features(std::move(data));
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest '" + path.string() + "'");
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 'id<TAB>path'");
    }
    std::filesystem::path p = line.substr(tab + 1);
    if (p.is_relative()) p = path.parent_path() / p;
    entries.push_back({line.substr(0, tab), p});
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  for (const auto& e : entries) out << e.id << '\t' << e.path.string() << '\n';
}

Corpus load_manifest(const std::filesystem::path& path) {
  std::map<std::filesystem::path, Corpus> files;
  Corpus out;
  for (const auto& e : read_manifest(path)) {
    auto it = files.find(e.path);
    if (it == files.end()) it = files.emplace(e.path, read_features(e.path)).first;
    const auto& c = it->second;
    const auto u = std::find_if(c.begin(), c.end(), [&](const FeatureSequence& s) { return s.id == e.id; });
    if (u == c.end()) throw FormatError("utterance '" + e.id + "' not found in " + e.path.string());
    out.push_back(*u);
  }
  return out;
}

void SyntheticConfig::validate() const {
  if (n_states < 1 || dim < 1) throw ContractError("synthetic corpus needs at least one state and one dimension");
  if (!(self_transition >= 0.0 && self_transition <= 1.0)) throw ContractError("self_transition must lie in [0, 1]");
  if (n_states == 1 && self_transition != 1.0 && transition.empty()) {
    throw ContractError("a single state must have self_transition 1");
  }
  if (!(noise_min > 0.0 && noise_max >= noise_min)) throw ContractError("noise scales must be positive");
  if (!(mean_scale >= 0.0 && nonlinearity >= 0.0)) throw ContractError("mean_scale and nonlinearity must be non-negative");
  if (min_length < 4 || max_length < min_length) throw ContractError("need 4 <= min_length <= max_length");
  if (round_up4(min_length) > max_length / 4 * 4) throw ContractError("length range contains no multiple of 4");
  if (n_utterances < 1) throw ContractError("n_utterances must be positive");
  if (!transition.empty()) {
    if (transition.size() != n_states * n_states) throw ContractError("transition matrix must be n_states×n_states");
    for (std::size_t i = 0; i < n_states; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n_states; ++j) {
        const double p = transition[i * n_states + j];
        if (!(p >= 0.0)) throw ContractError("transition probabilities must be non-negative");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) throw ContractError("transition row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

std::vector<double> transition_matrix(const SyntheticConfig& cfg) {
  cfg.validate();
  if (!cfg.transition.empty()) return cfg.transition;
  const std::size_t n = cfg.n_states;
  std::vector<double> m(n * n, n > 1 ? (1.0 - cfg.self_transition) / static_cast<double>(n - 1) : 0.0);
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = cfg.self_transition;
  return m;
}

std::vector<int> collapse_runs(const std::vector<int>& path) {
  std::vector<int> out;
  for (int s : path) {
    if (out.empty() || out.back() != s) out.push_back(s);
  }
  return out;
}

Corpus generate_synthetic_corpus(const SyntheticConfig& cfg) {
  const std::vector<double> trans = transition_matrix(cfg);
  const std::size_t n = cfg.n_states, d = cfg.dim;

  // Emission parameters and the distortion map come from their own stream so that
  // changing the utterance count does not change the states.
  Rng erng(derive_seed(cfg.seed, 1));
  Tensor means({n, d}), scales({n, d}), mix({d, d});
  for (double& v : means.values()) v = cfg.mean_scale * erng.normal();
  for (double& v : scales.values()) v = cfg.noise_min + (cfg.noise_max - cfg.noise_min) * erng.uniform();
  for (double& v : mix.values()) v = erng.normal() / std::sqrt(static_cast<double>(d));

  auto draw = [](Rng& rng, std::span<const double> probs) {
    const double u = rng.uniform();
    double c = 0.0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
      c += probs[j];
      if (u < c) return static_cast<int>(j);
    }
    // Round-off in the cumulative sum: fall back to the last state with mass.
    for (std::size_t j = probs.size(); j-- > 0;)
      if (probs[j] > 0.0) return static_cast<int>(j);
    return 0;
  };

  const std::size_t lo = round_up4(cfg.min_length) / 4, hi = cfg.max_length / 4;
  Corpus corpus;
  corpus.reserve(cfg.n_utterances);
  for (std::size_t u = 0; u < cfg.n_utterances; ++u) {
    Rng rng(derive_seed(cfg.seed, 1000 + u));
    const std::size_t t_len = 4 * (lo + rng.below(hi - lo + 1));
    std::vector<int> path(t_len);
    path[0] = static_cast<int>(rng.below(n));
    for (std::size_t t = 1; t < t_len; ++t) {
      path[t] = draw(rng, std::span<const double>(trans).subspan(static_cast<std::size_t>(path[t - 1]) * n, n));
    }
    Tensor x({t_len, d});
    std::vector<double> base(d);
    for (std::size_t t = 0; t < t_len; ++t) {
      const auto s = static_cast<std::size_t>(path[t]);
      for (std::size_t j = 0; j < d; ++j) base[j] = means.at(s, j) + scales.at(s, j) * rng.normal();
      for (std::size_t j = 0; j < d; ++j) {
        double a = 0.0;
        for (std::size_t i = 0; i < d; ++i) a += base[i] * mix.at(i, j);
        x.at(t, j) = base[j] + cfg.nonlinearity * std::tanh(a);
      }
    }
    std::ostringstream id;
    id << cfg.id_prefix << '-' << std::setw(5) << std::setfill('0') << u;
    corpus.push_back({id.str(), std::move(x), path, collapse_runs(path)});
  }
  return corpus;
}

Tensor Batch::sequence(std::size_t b) const {
  const std::size_t t = round_up4(lengths.at(b)), d = features.dim(2), tmax = max_length();
  const auto src = features.values().subspan(b * tmax * d, t * d);
  return Tensor({t, d}, std::vector<double>(src.begin(), src.end()));
}

std::vector<double> Batch::frame_mask(std::size_t b) const {
  std::vector<double> m(round_up4(lengths.at(b)), 0.0);
  std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(lengths[b]), 1.0);
  return m;
}

std::vector<Batch> batchify(const Corpus& slice, std::size_t batch_size, std::uint64_t seed) {
  if (slice.empty()) throw ContractError("batchify needs a nonempty slice");
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  const std::size_t d = corpus_dim(slice);
  std::vector<std::size_t> order(slice.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    Batch b;
    std::size_t tmax = 0;
    for (std::size_t i = start; i < stop; ++i) tmax = std::max(tmax, round_up4(slice[order[i]].length()));
    b.features = Tensor({stop - start, tmax, d});
    b.mask.assign((stop - start) * tmax, 0);
    for (std::size_t i = start; i < stop; ++i) {
      const std::size_t k = i - start;
      const FeatureSequence& u = slice[order[i]];
      std::copy(u.features.values().begin(), u.features.values().end(),
                b.features.values().begin() + static_cast<std::ptrdiff_t>(k * tmax * d));
      std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(k * tmax), u.length(), std::uint8_t{1});
      b.lengths.push_back(u.length());
      b.indices.push_back(order[i]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace cdmm
