#include "cdmm/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "cdmm/error.hpp"
#include "cdmm/log.hpp"

namespace cdmm {

std::size_t split_size(double fraction, std::size_t n) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("split fraction must lie in (0, 1]");
  if (n == 0) throw ContractError("cannot split an empty corpus");
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
  return std::clamp<std::size_t>(k, 1, n);
}

std::vector<SplitSpec> sample_splits(const std::vector<std::string>& ids, double fraction, std::size_t n_splits,
                                     std::uint64_t base_seed) {
  const std::size_t k = split_size(fraction, ids.size());
  if (std::floor(fraction * static_cast<double>(ids.size()) + 0.5) < 1.0) {
    log_warn("fraction " + std::to_string(fraction) + " of " + std::to_string(ids.size()) +
             " utterances rounds to zero; using one utterance per split");
  }
  std::vector<SplitSpec> out;
  for (std::size_t i = 0; i < n_splits; ++i) {
    SplitSpec s{fraction, i, derive_seed(base_seed, i), {}};
    std::vector<std::size_t> order(ids.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(s.seed);
    rng.shuffle(std::span<std::size_t>(order));
    order.resize(k);
    std::sort(order.begin(), order.end());
    for (std::size_t j : order) s.ids.push_back(ids[j]);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<SplitSpec> sample_splits(const Corpus& corpus, double fraction, std::size_t n_splits,
                                     std::uint64_t base_seed) {
  std::vector<std::string> ids;
  for (const auto& u : corpus) ids.push_back(u.id);
  return sample_splits(ids, fraction, n_splits, base_seed);
}

double quantile_linear(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ContractError("quantile of an empty list");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

IqrSummary aggregate_iqr(std::span<const double> values) {
  if (values.empty()) throw ContractError("aggregate_iqr needs at least one value");
  IqrSummary s;
  s.count = values.size();
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> keep;
  if (values.size() < 4) {
    log_warn("aggregate_iqr: only " + std::to_string(values.size()) + " values, using the plain mean");
    keep = sorted;
    s.q1 = quantile_linear(sorted, 0.25);
    s.q3 = quantile_linear(sorted, 0.75);
  } else {
    s.q1 = quantile_linear(sorted, 0.25);
    s.q3 = quantile_linear(sorted, 0.75);
    const double iqr = s.q3 - s.q1;
    const double lo = s.q1 - 1.5 * iqr, hi = s.q3 + 1.5 * iqr;
    for (double v : sorted)
      if (v >= lo && v <= hi) keep.push_back(v);
  }
  s.removed = values.size() - keep.size();
  // Summing in sorted order keeps the result independent of input order.
  double sum = 0.0;
  for (double v : keep) sum += v;
  s.mean = sum / static_cast<double>(keep.size());
  if (keep.size() > 1) {
    double ss = 0.0;
    for (double v : keep) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(keep.size() - 1));
  }
  return s;
}

FeatureExtractor identity_extractor() {
  return [](const Tensor& x) { return x; };
}

FeatureExtractor convdmm_extractor(GenerativeParams theta, InferenceParams phi) {
  return [theta = std::move(theta), phi = std::move(phi)](const Tensor& x) { return extract_features(x, theta, phi); };
}

Corpus extract_corpus(const Corpus& corpus, const FeatureExtractor& fx, std::size_t threads) {
  Corpus out(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    const FeatureSequence& u = corpus[i];
    Tensor x({round_up4(u.length()), u.dim()});
    std::copy(u.features.values().begin(), u.features.values().end(), x.values().begin());
    const Tensor f = fx(x);
    if (f.rank() != 2 || f.rows() != x.rows()) {
      throw DimensionError("extractor returned " + shape_string(f.shape()) + " for '" + u.id + "'");
    }
    FeatureSequence& o = out[i];
    o.id = u.id;
    o.features = Tensor({u.length(), f.cols()});
    std::copy_n(f.values().begin(), u.length() * f.cols(), o.features.values().begin());
    o.frame_labels = u.frame_labels;
    o.phone_seq = u.phone_seq;
  });
  return out;
}

Corpus attach_labels(const Corpus& features, const Corpus& labeled) {
  std::map<std::string, const FeatureSequence*> by_id;
  for (const auto& f : features) by_id[f.id] = &f;
  Corpus out;
  for (const auto& u : labeled) {
    const auto it = by_id.find(u.id);
    if (it == by_id.end()) throw FormatError("no features for utterance '" + u.id + "'");
    if (it->second->length() != u.length()) {
      throw FormatError("features for utterance '" + u.id + "' have " + std::to_string(it->second->length()) +
                        " frames, labels have " + std::to_string(u.length()));
    }
    FeatureSequence o = *it->second;
    o.frame_labels = u.frame_labels;
    o.phone_seq = u.phone_seq;
    out.push_back(std::move(o));
  }
  return out;
}

std::size_t label_count(const Corpus& corpus) {
  int mx = -1;
  for (const auto& u : corpus) {
    if (u.frame_labels)
      for (int l : *u.frame_labels) mx = std::max(mx, l);
    if (u.phone_seq)
      for (int l : *u.phone_seq) mx = std::max(mx, l);
  }
  if (mx < 0) throw ContractError("corpus carries no labels");
  return static_cast<std::size_t>(mx) + 1;
}

// ---- supervised baseline ----

namespace {

void require_labels(const FeatureSequence& u, const std::string& context) {
  if (!u.frame_labels || !u.phone_seq) {
    throw FormatError(context + ": utterance '" + u.id + "' lacks frame labels or a phone sequence");
  }
}

std::vector<int> ctc_targets(const FeatureSequence& u, std::size_t n_phones) {
  const LabelAlphabet a{n_phones};
  std::vector<int> out;
  for (int p : *u.phone_seq) out.push_back(a.to_ctc(p));
  return out;
}

ad::Var supervised_graph(Binder& b, ad::Var x, std::size_t frames) {
  const ad::Var h = inf::encode(b, x);
  const ad::Var step_logits = ad::add_rowwise(ad::matmul(h, b("sup.head.w")), b("sup.head.b"));
  return ad::first_rows(ad::repeat_rows(step_logits, kEncoderDownsample), frames);
}

Tensor padded(const FeatureSequence& u) {
  Tensor x({round_up4(u.length()), u.dim()});
  std::copy(u.features.values().begin(), u.features.values().end(), x.values().begin());
  return x;
}

double supervised_corpus_loss(const SupervisedModel& m, const Corpus& corpus, std::size_t threads) {
  std::vector<double> losses(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    ad::Graph g;
    Binder b(g, m.weights, false);
    const auto y = ctc_targets(corpus[i], m.n_phones);
    losses[i] = ctc_loss(supervised_graph(b, g.constant(padded(corpus[i])), corpus[i].length()), y).value().item();
  });
  double s = 0.0;
  for (double l : losses) s += l;
  return s / static_cast<double>(corpus.size());
}

}  // namespace

SupervisedModel SupervisedModel::init(const ModelConfig& config, std::size_t n_phones, Rng& rng) {
  config.validate();
  if (n_phones == 0) throw ContractError("supervised model needs at least one phone");
  SupervisedModel m{config, n_phones, {}};
  const InferenceParams phi = InferenceParams::init(config, rng);
  for (const auto& [name, t] : phi.weights.entries())
    if (name.starts_with("inf.enc.")) m.weights.add(name, t);
  const double c = static_cast<double>(config.encoder_channels);
  m.weights.add("sup.head.w", random_normal({config.encoder_channels, n_phones + 1}, 1.0 / std::sqrt(c), rng));
  m.weights.add("sup.head.b", Tensor({n_phones + 1}));
  return m;
}

SupervisedModel SupervisedModel::zeros(const ModelConfig& config, std::size_t n_phones) {
  SupervisedModel m{config, n_phones, {}};
  const InferenceParams phi = InferenceParams::zeros(config);
  for (const auto& [name, t] : phi.weights.entries())
    if (name.starts_with("inf.enc.")) m.weights.add(name, t);
  m.weights.add("sup.head.w", Tensor({config.encoder_channels, n_phones + 1}));
  m.weights.add("sup.head.b", Tensor({n_phones + 1}));
  return m;
}

Tensor supervised_logits(const SupervisedModel& m, const Tensor& x) {
  if (x.rows() % kEncoderDownsample != 0) throw ContractError("input length must be a multiple of 4");
  ad::Graph g;
  Binder b(g, m.weights, false);
  return supervised_graph(b, g.constant(x), x.rows()).value();
}

Tensor supervised_features(const SupervisedModel& m, const Tensor& x) {
  if (x.rows() % kEncoderDownsample != 0) throw ContractError("input length must be a multiple of 4");
  ad::Graph g;
  Binder b(g, m.weights, false);
  return ad::repeat_rows(inf::encode(b, g.constant(x)), kEncoderDownsample).value();
}

FeatureExtractor supervised_extractor(SupervisedModel m) {
  return [m = std::move(m)](const Tensor& x) { return supervised_features(m, x); };
}

double supervised_per(const SupervisedModel& m, const Corpus& corpus, std::size_t threads) {
  std::vector<std::size_t> edits(corpus.size()), refs(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    require_labels(corpus[i], "supervised_per");
    const Tensor l = supervised_logits(m, padded(corpus[i]));
    Tensor real({corpus[i].length(), l.cols()});
    std::copy_n(l.values().begin(), real.numel(), real.values().begin());
    std::vector<int> hyp;
    for (int c : ctc_greedy_decode(real)) hyp.push_back(c - 1);
    edits[i] = edit_distance(hyp, *corpus[i].phone_seq);
    refs[i] = corpus[i].phone_seq->size();
  });
  const std::size_t r = std::accumulate(refs.begin(), refs.end(), std::size_t{0});
  if (r == 0) throw ContractError("supervised_per: empty references");
  return static_cast<double>(std::accumulate(edits.begin(), edits.end(), std::size_t{0})) / static_cast<double>(r);
}

void SupervisedConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ContractError("supervised lr must be positive");
  if (epochs == 0 || batch_size == 0 || threads == 0) throw ContractError("supervised epochs, batch_size and threads must be positive");
  if (!(l2_weight >= 0.0)) throw ContractError("l2_weight must be non-negative");
}

SupervisedResult train_supervised_baseline(const Corpus& train_corpus, const Corpus& dev_corpus,
                                           const ModelConfig& model, std::size_t n_phones,
                                           const SupervisedConfig& cfg) {
  cfg.validate();
  if (train_corpus.empty() || dev_corpus.empty()) throw ContractError("supervised training needs train and dev data");
  for (const auto* c : {&train_corpus, &dev_corpus}) {
    if (corpus_dim(*c) != model.obs_dim) throw DimensionError("corpus width does not match obs_dim");
    for (const auto& u : *c) require_labels(u, "supervised training");
  }
  Rng init_rng(derive_seed(cfg.seed, 1));
  SupervisedModel m = SupervisedModel::init(model, n_phones, init_rng);
  AdamState adam = AdamState::for_params(m.weights);

  SupervisedResult result;
  result.best = m;
  double best_dev = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = batchify(train_corpus, cfg.batch_size, derive_seed(derive_seed(cfg.seed, 2), epoch));
    double total = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& b = batches[bi];
      std::vector<double> losses(b.size());
      std::vector<ParameterSet> grads(b.size());
      parallel_for(b.size(), cfg.threads, [&](std::size_t i) {
        const FeatureSequence& u = train_corpus[b.indices[i]];
        ad::Graph g;
        Binder bind(g, m.weights, true);
        const ad::Var loss =
            ctc_loss(supervised_graph(bind, g.constant(b.sequence(i)), u.length()), ctc_targets(u, n_phones));
        g.backward(loss);
        losses[i] = loss.value().item();
        grads[i] = bind.gradients();
      });
      ParameterSet g = m.weights.zeros_like();
      for (std::size_t i = 0; i < b.size(); ++i) {
        g.add_scaled(grads[i], 1.0 / static_cast<double>(b.size()));
        total += losses[i];
      }
      if (!std::isfinite(total) || !g.all_finite()) {
        throw NumericalError("non-finite CTC loss or gradient in supervised epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(bi));
      }
      adam_step(m.weights, g, adam, cfg.lr, cfg.l2_weight);
    }
    SupervisedEpoch rec{epoch, total / static_cast<double>(train_corpus.size()),
                        supervised_corpus_loss(m, dev_corpus, cfg.threads)};
    if (!std::isfinite(rec.dev_loss)) throw NumericalError("non-finite supervised dev loss in epoch " + std::to_string(epoch));
    log_debug("supervised epoch " + std::to_string(epoch) + " train " + std::to_string(rec.train_loss) + " dev " +
              std::to_string(rec.dev_loss));
    result.log.push_back(rec);
    if (rec.dev_loss < best_dev) {
      best_dev = rec.dev_loss;
      result.best = m;
    }
  }
  result.dev_per = supervised_per(result.best, dev_corpus, cfg.threads);
  return result;
}

void save_supervised(const std::filesystem::path& path, const SupervisedModel& m) {
  ParameterSet f = m.weights;
  const ModelConfig& c = m.config;
  f.add("meta.model", Tensor({8}, {double(c.obs_dim), double(c.latent_dim), double(c.encoder_channels),
                                   double(c.embed_channels), double(c.emission_hidden), double(c.transition_hidden),
                                   double(c.upsample), double(m.n_phones)}));
  write_tensor_file(path, kSupervisedMagic, kSupervisedVersion, f);
}

SupervisedModel load_supervised(const std::filesystem::path& path) {
  const ParameterSet f = read_tensor_file(path, kSupervisedMagic, kSupervisedVersion);
  const Tensor* meta = f.find("meta.model");
  if (!meta || meta->numel() != 8) throw FormatError(path.string() + ": missing or malformed 'meta.model'");
  std::array<std::size_t, 8> v{};
  for (std::size_t i = 0; i < 8; ++i) {
    const double d = (*meta)[i];
    if (!(d >= 0.0 && d <= 1e9 && d == std::floor(d))) throw FormatError(path.string() + ": bad integer field");
    v[i] = static_cast<std::size_t>(d);
  }
  ModelConfig c;
  c.obs_dim = v[0];
  c.latent_dim = v[1];
  c.encoder_channels = v[2];
  c.embed_channels = v[3];
  c.emission_hidden = v[4];
  c.transition_hidden = v[5];
  c.upsample = v[6];
  try {
    c.validate();
    if (v[7] == 0) throw ContractError("no phones");
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": invalid model configuration: " + e.what());
  }
  SupervisedModel m = SupervisedModel::zeros(c, v[7]);
  for (auto& [name, t] : m.weights.entries()) {
    const Tensor* found = f.find(name);
    if (!found) throw FormatError(path.string() + ": lacks '" + name + "'");
    if (!found->same_shape(t)) throw FormatError(path.string() + ": '" + name + "' has the wrong shape");
    t = *found;
  }
  if (f.size() != m.weights.size() + 1) throw FormatError(path.string() + ": unexpected extra tensors");
  return m;
}

// ---- protocol ----

void ProtocolConfig::validate() const {
  if (fractions.empty()) throw ContractError("protocol needs at least one fraction");
  for (double f : fractions)
    if (!(f > 0.0 && f <= 1.0)) throw ContractError("protocol fractions must lie in (0, 1]");
  if (n_splits == 0 || n_probe_seeds == 0 || jobs == 0) throw ContractError("n_splits, n_probe_seeds and jobs must be positive");
  probe.validate();
}

std::string to_string(Metric m) { return m == Metric::Fer ? "fer" : "per"; }

ProtocolReport run_protocol(const std::vector<SystemFeatures>& systems, const ProtocolConfig& cfg) {
  cfg.validate();
  if (systems.empty()) throw ContractError("run_protocol needs at least one system");
  const Corpus& ref_pool = systems.front().pool;
  if (ref_pool.empty() || systems.front().test.empty()) throw ContractError("probe pool and test set must be nonempty");

  std::size_t n_classes = 0;
  for (const auto& s : systems) {
    if (s.pool.size() != ref_pool.size() || s.test.size() != systems.front().test.size()) {
      throw FormatError("system '" + s.name + "' covers a different set of utterances");
    }
    for (std::size_t i = 0; i < s.pool.size(); ++i) {
      if (s.pool[i].id != ref_pool[i].id) throw FormatError("system '" + s.name + "' lacks utterance '" + ref_pool[i].id + "'");
      require_labels(s.pool[i], "system '" + s.name + "'");
    }
    for (std::size_t i = 0; i < s.test.size(); ++i) {
      if (s.test[i].id != systems.front().test[i].id) {
        throw FormatError("system '" + s.name + "' lacks test utterance '" + systems.front().test[i].id + "'");
      }
      require_labels(s.test[i], "system '" + s.name + "'");
    }
    n_classes = std::max({n_classes, label_count(s.pool), label_count(s.test)});
  }

  ProtocolReport report;
  for (const auto& s : systems) report.systems.push_back(s.name);
  report.fractions = cfg.fractions;
  for (std::size_t k = 0; k < cfg.n_probe_seeds; ++k) report.probe_seeds.push_back(cfg.probe_seed + k);
  std::map<std::string, std::size_t> pool_index;
  for (std::size_t i = 0; i < ref_pool.size(); ++i) pool_index[ref_pool[i].id] = i;
  for (double f : cfg.fractions) {
    for (auto& s : sample_splits(ref_pool, f, cfg.n_splits, cfg.split_seed)) report.splits.push_back(std::move(s));
  }

  for (const auto& sys : systems)
    for (const auto& split : report.splits)
      for (std::uint64_t seed : report.probe_seeds)
        report.runs.push_back({sys.name, split.fraction, split.index, split.seed, seed, 0.0, 0.0});

  const std::size_t per_system = report.splits.size() * report.probe_seeds.size();
  parallel_for(report.runs.size(), cfg.jobs, [&](std::size_t r) {
    ProbeRun& run = report.runs[r];
    const SystemFeatures& sys = systems[r / per_system];
    const SplitSpec& split = report.splits[(r % per_system) / report.probe_seeds.size()];
    std::vector<Tensor> xs;
    std::vector<std::vector<int>> frames, phones;
    for (const auto& id : split.ids) {
      const FeatureSequence& u = sys.pool[pool_index.at(id)];
      xs.push_back(u.features);
      frames.push_back(*u.frame_labels);
      phones.push_back(*u.phone_seq);
    }
    std::vector<Tensor> tx;
    std::vector<std::vector<int>> tf, tp;
    for (const auto& u : sys.test) {
      tx.push_back(u.features);
      tf.push_back(*u.frame_labels);
      tp.push_back(*u.phone_seq);
    }
    ProbeConfig pc = cfg.probe;
    pc.seed = run.probe_seed;
    run.fer = evaluate_fer(train_frame_classifier(xs, frames, n_classes, pc), tx, tf);
    run.per = evaluate_per(train_ctc_recognizer(xs, phones, n_classes, pc), tx, tp);
    log_debug(sys.name + " fraction " + std::to_string(run.fraction) + " split " + std::to_string(run.split_index) +
              " seed " + std::to_string(run.probe_seed) + ": FER " + std::to_string(run.fer) + " PER " +
              std::to_string(run.per));
  });
  return report;
}

std::vector<double> cell_values(const ProtocolReport& r, const std::string& system, double fraction, Metric m) {
  std::vector<double> out;
  for (const auto& run : r.runs)
    if (run.system == system && run.fraction == fraction) out.push_back(m == Metric::Fer ? run.fer : run.per);
  return out;
}

std::vector<double> split_means(const ProtocolReport& r, const std::string& system, double fraction, Metric m) {
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  for (const auto& run : r.runs) {
    if (run.system != system || run.fraction != fraction) continue;
    auto& [s, n] = acc[run.split_index];
    s += m == Metric::Fer ? run.fer : run.per;
    ++n;
  }
  std::vector<double> out;
  for (const auto& [idx, sn] : acc) out.push_back(sn.first / static_cast<double>(sn.second));
  return out;
}

std::vector<CellSummary> summarize(const ProtocolReport& r) {
  std::vector<CellSummary> out;
  for (const auto& sys : r.systems)
    for (double f : r.fractions)
      for (Metric m : {Metric::Fer, Metric::Per}) {
        CellSummary c{sys, f, m, cell_values(r, sys, f, m), {}};
        if (c.values.empty()) throw FormatError("report has no runs for " + sys + " at fraction " + std::to_string(f));
        c.aggregate = aggregate_iqr(c.values);
        out.push_back(std::move(c));
      }
  return out;
}

namespace {

std::string fraction_label(double f) {
  std::ostringstream s;
  s << f;
  return s.str();
}

}  // namespace

std::string report_csv(const ProtocolReport& r) {
  const auto cells = summarize(r);
  std::ostringstream s;
  s << "system";
  for (double f : r.fractions) s << ",fer@" << fraction_label(f) << ",per@" << fraction_label(f);
  s << '\n' << std::fixed << std::setprecision(6);
  std::size_t c = 0;
  for (const auto& sys : r.systems) {
    s << sys;
    for (std::size_t i = 0; i < 2 * r.fractions.size(); ++i) s << ',' << cells[c++].aggregate.mean;
    s << '\n';
  }
  return s.str();
}

std::string report_json(const ProtocolReport& r) {
  using nlohmann::json;
  json j;
  j["systems"] = r.systems;
  j["fractions"] = r.fractions;
  j["probe_seeds"] = r.probe_seeds;
  j["splits"] = json::array();
  for (const auto& s : r.splits) {
    j["splits"].push_back({{"fraction", s.fraction}, {"index", s.index}, {"seed", s.seed}, {"ids", s.ids}});
  }
  j["runs"] = json::array();
  for (const auto& run : r.runs) {
    j["runs"].push_back({{"system", run.system},
                         {"fraction", run.fraction},
                         {"split_index", run.split_index},
                         {"split_seed", run.split_seed},
                         {"probe_seed", run.probe_seed},
                         {"fer", run.fer},
                         {"per", run.per}});
  }
  j["cells"] = json::array();
  for (const auto& c : summarize(r)) {
    j["cells"].push_back({{"system", c.system},
                          {"fraction", c.fraction},
                          {"metric", to_string(c.metric)},
                          {"values", c.values},
                          {"mean", c.aggregate.mean},
                          {"sd", c.aggregate.sd},
                          {"removed", c.aggregate.removed},
                          {"q1", c.aggregate.q1},
                          {"q3", c.aggregate.q3}});
  }
  return j.dump(2) + "\n";
}

ProtocolReport parse_report_json(const std::string& text) {
  using nlohmann::json;
  try {
    const json j = json::parse(text);
    ProtocolReport r;
    r.systems = j.at("systems").get<std::vector<std::string>>();
    r.fractions = j.at("fractions").get<std::vector<double>>();
    r.probe_seeds = j.at("probe_seeds").get<std::vector<std::uint64_t>>();
    for (const auto& s : j.at("splits")) {
      r.splits.push_back({s.at("fraction").get<double>(), s.at("index").get<std::size_t>(),
                          s.at("seed").get<std::uint64_t>(), s.at("ids").get<std::vector<std::string>>()});
    }
    for (const auto& run : j.at("runs")) {
      r.runs.push_back({run.at("system").get<std::string>(), run.at("fraction").get<double>(),
                        run.at("split_index").get<std::size_t>(), run.at("split_seed").get<std::uint64_t>(),
                        run.at("probe_seed").get<std::uint64_t>(), run.at("fer").get<double>(),
                        run.at("per").get<double>()});
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

AblationResult run_ablation(const Corpus& train_corpus, const Corpus& dev_corpus, const Corpus& pool,
                            const Corpus& test, const ModelConfig& model, TrainConfig train_cfg,
                            const ProtocolConfig& protocol) {
  AblationResult out;
  std::vector<SystemFeatures> systems;
  for (ModelMode mode : {ModelMode::Markov, ModelMode::IsotropicPrior}) {
    train_cfg.mode = mode;
    TrainResult tr = train(train_corpus, dev_corpus, model, train_cfg);
    const FeatureExtractor fx = convdmm_extractor(tr.best.theta, tr.best.phi);
    systems.push_back({mode == ModelMode::Markov ? "convdmm" : "gaussvae", extract_corpus(pool, fx, train_cfg.threads),
                       extract_corpus(test, fx, train_cfg.threads)});
    (mode == ModelMode::Markov ? out.markov : out.isotropic) = std::move(tr);
  }
  out.report = run_protocol(systems, protocol);
  return out;
}

}  // namespace cdmm
