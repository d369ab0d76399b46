#include "cdmm/trainer.hpp"

#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "cdmm/error.hpp"
#include "cdmm/log.hpp"

namespace cdmm {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ContractError("lr must be a non-negative number");
  if (epochs == 0 || batch_size == 0) throw ContractError("epochs and batch_size must be positive");
  if (!(l2_weight >= 0.0)) throw ContractError("l2_weight must be non-negative");
  if (!(kl_start >= 0.0 && kl_start <= 1.0)) throw ContractError("kl_start must lie in [0, 1]");
  if (kl_anneal_epochs == 0 || plateau_patience == 0) throw ContractError("kl_anneal_epochs and plateau_patience must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ContractError("plateau_factor must lie in (0, 1)");
  if (threads == 0) throw ContractError("threads must be positive");
}

double kl_anneal_weight(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.kl_anneal_epochs) return 1.0;
  const double frac = static_cast<double>(epoch) / static_cast<double>(cfg.kl_anneal_epochs);
  return cfg.kl_start + (1.0 - cfg.kl_start) * frac;
}

double plateau_lr(const std::vector<double>& dev_losses, double current_lr, const TrainConfig& cfg) {
  if (dev_losses.empty()) throw ContractError("plateau_lr needs a nonempty history");
  double best = dev_losses.front();
  std::size_t stale = 0;
  bool halve = false;
  for (std::size_t i = 1; i < dev_losses.size(); ++i) {
    halve = false;
    if (dev_losses[i] < best - kPlateauThreshold) {
      best = dev_losses[i];
      stale = 0;
    } else if (++stale == cfg.plateau_patience) {
      halve = true;
      stale = 0;
    }
  }
  return halve ? current_lr * cfg.plateau_factor : current_lr;
}

AdamState AdamState::for_params(const ParameterSet& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& state, double lr, double l2_weight) {
  auto& pe = params.entries();
  const auto& ge = grads.entries();
  if (pe.size() != ge.size() || state.m.size() != pe.size() || state.v.size() != pe.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment sets differ in size");
  }
  for (std::size_t i = 0; i < pe.size(); ++i) {
    if (pe[i].first != ge[i].first || !pe[i].second.same_shape(ge[i].second) ||
        !pe[i].second.same_shape(state.m.entries()[i].second) || !pe[i].second.same_shape(state.v.entries()[i].second)) {
      throw DimensionError("adam_step: mismatch at '" + pe[i].first + "' (" + shape_string(pe[i].second.shape()) +
                           " vs " + shape_string(ge[i].second.shape()) + ")");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(kAdamBeta1, t);
  const double c2 = 1.0 - std::pow(kAdamBeta2, t);
  for (std::size_t i = 0; i < pe.size(); ++i) {
    auto p = pe[i].second.values();
    const auto g = ge[i].second.values();
    auto m = state.m.entries()[i].second.values();
    auto v = state.v.entries()[i].second.values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] + l2_weight * p[j];
      m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * gj;
      v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * gj * gj;
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }
}

namespace {

void put_prefixed(ParameterSet& out, const std::string& prefix, const ParameterSet& in) {
  for (const auto& [name, t] : in.entries()) out.add(prefix + name, t);
}

// Copies the entries named like `like` (after prefixing) out of a loaded file.
ParameterSet take_prefixed(const ParameterSet& file, const std::string& prefix, const ParameterSet& like,
                           const std::filesystem::path& path) {
  ParameterSet out;
  for (const auto& [name, t] : like.entries()) {
    const Tensor* found = file.find(prefix + name);
    if (!found) throw FormatError(path.string() + ": checkpoint lacks '" + prefix + name + "'");
    if (!found->same_shape(t)) {
      throw FormatError(path.string() + ": '" + prefix + name + "' has shape " + shape_string(found->shape()) +
                        ", expected " + shape_string(t.shape()));
    }
    out.add(name, *found);
  }
  return out;
}

const Tensor& meta(const ParameterSet& file, const std::string& name, std::size_t n, const std::filesystem::path& path) {
  const Tensor* t = file.find(name);
  if (!t || t->numel() != n) throw FormatError(path.string() + ": missing or malformed '" + name + "'");
  return *t;
}

std::size_t as_size(double v, const std::filesystem::path& path) {
  if (!(v >= 0.0 && v <= 9.0e15 && v == std::floor(v))) throw FormatError(path.string() + ": bad integer field");
  return static_cast<std::size_t>(v);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  ParameterSet f;
  put_prefixed(f, "", c.theta.weights);
  put_prefixed(f, "", c.phi.weights);
  put_prefixed(f, "adam.m.", c.adam_theta.m);
  put_prefixed(f, "adam.v.", c.adam_theta.v);
  put_prefixed(f, "adam.m.", c.adam_phi.m);
  put_prefixed(f, "adam.v.", c.adam_phi.v);
  const ModelConfig& m = c.theta.config;
  f.add("meta.model", Tensor({7}, {double(m.obs_dim), double(m.latent_dim), double(m.encoder_channels),
                                   double(m.embed_channels), double(m.emission_hidden), double(m.transition_hidden),
                                   double(m.upsample)}));
  f.add("meta.state", Tensor({7}, {double(c.epoch), double(c.adam_theta.step), double(c.adam_phi.step), c.lr,
                                   c.mode == ModelMode::Markov ? 0.0 : 1.0, double(c.config_hash >> 32),
                                   double(c.config_hash & 0xffffffffULL)}));
  std::vector<double> hist{double(c.dev_history.size())};
  hist.insert(hist.end(), c.dev_history.begin(), c.dev_history.end());
  f.add("meta.dev_history", Tensor({hist.size()}, hist));
  write_tensor_file(path, kCheckpointMagic, kCheckpointVersion, f);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const ParameterSet f = read_tensor_file(path, kCheckpointMagic, kCheckpointVersion);
  const Tensor& mt = meta(f, "meta.model", 7, path);
  ModelConfig m;
  m.obs_dim = as_size(mt[0], path);
  m.latent_dim = as_size(mt[1], path);
  m.encoder_channels = as_size(mt[2], path);
  m.embed_channels = as_size(mt[3], path);
  m.emission_hidden = as_size(mt[4], path);
  m.transition_hidden = as_size(mt[5], path);
  m.upsample = as_size(mt[6], path);
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": invalid model configuration: " + e.what());
  }
  const GenerativeParams gz = GenerativeParams::zeros(m);
  const InferenceParams iz = InferenceParams::zeros(m);

  Checkpoint c;
  c.theta = {m, take_prefixed(f, "", gz.weights, path)};
  c.phi = {m, take_prefixed(f, "", iz.weights, path)};
  c.adam_theta = {take_prefixed(f, "adam.m.", gz.weights, path), take_prefixed(f, "adam.v.", gz.weights, path), 0};
  c.adam_phi = {take_prefixed(f, "adam.m.", iz.weights, path), take_prefixed(f, "adam.v.", iz.weights, path), 0};
  const Tensor& st = meta(f, "meta.state", 7, path);
  c.epoch = as_size(st[0], path);
  c.adam_theta.step = as_size(st[1], path);
  c.adam_phi.step = as_size(st[2], path);
  c.lr = st[3];
  if (st[4] != 0.0 && st[4] != 1.0) throw FormatError(path.string() + ": bad model mode");
  c.mode = st[4] == 0.0 ? ModelMode::Markov : ModelMode::IsotropicPrior;
  c.config_hash = (static_cast<std::uint64_t>(as_size(st[5], path)) << 32) | as_size(st[6], path);
  const Tensor* hist = f.find("meta.dev_history");
  if (!hist || as_size((*hist)[0], path) + 1 != hist->numel()) throw FormatError(path.string() + ": bad dev history");
  c.dev_history.assign(hist->values().begin() + 1, hist->values().end());

  const std::size_t expected = 2 * (gz.weights.size() + iz.weights.size()) + gz.weights.size() + iz.weights.size() + 3;
  if (f.size() != expected) throw FormatError(path.string() + ": unexpected extra tensors in checkpoint");
  return c;
}

std::uint64_t config_hash(const ModelConfig& m, const TrainConfig& t) {
  std::ostringstream s;
  s << std::setprecision(17) << m.obs_dim << ' ' << m.latent_dim << ' ' << m.encoder_channels << ' '
    << m.embed_channels << ' ' << m.emission_hidden << ' ' << m.transition_hidden << ' ' << m.upsample << '|' << t.lr
    << ' ' << t.epochs << ' ' << t.batch_size << ' ' << t.l2_weight << ' ' << t.kl_start << ' ' << t.kl_anneal_epochs
    << ' ' << t.plateau_patience << ' ' << t.plateau_factor << ' ' << t.seed << ' ' << to_string(t.mode);
  const std::string str = s.str();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : str) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

UtteranceLoss utterance_loss(const Tensor& x, std::span<const double> mask, const GenerativeParams& theta,
                             const InferenceParams& phi, ModelMode mode, double beta, std::uint64_t noise_seed,
                             bool with_gradients) {
  const std::size_t steps = x.rows() / theta.config.upsample;
  Rng rng(noise_seed);
  Tensor noise({std::max<std::size_t>(steps, 1), theta.config.latent_dim});
  for (double& v : noise.values()) v = rng.normal();

  // Masked frames are zeroed so that their content cannot reach the encoder either.
  Tensor xm = x;
  if (!mask.empty()) {
    if (mask.size() != x.rows()) throw DimensionError("frame mask length does not match the sequence");
    for (std::size_t t = 0; t < x.rows(); ++t)
      if (mask[t] == 0.0)
        for (double& v : xm.row_span(t)) v = 0.0;
  }

  ad::Graph g;
  Binder bt(g, theta.weights, with_gradients), bp(g, phi.weights, with_gradients);
  const auto e = inf::elbo(bt, bp, g.constant(std::move(xm)), noise, mode, beta, mask);
  const ad::Var loss = ad::neg(e.elbo);
  UtteranceLoss out;
  out.loss = loss.value().item();
  if (with_gradients) {
    g.backward(loss);
    out.grad_theta = bt.gradients();
    out.grad_phi = bp.gradients();
  }
  return out;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (error || next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

double corpus_loss(const Corpus& corpus, const GenerativeParams& theta, const InferenceParams& phi, ModelMode mode,
                   double beta, std::uint64_t seed, std::size_t threads) {
  std::vector<double> losses(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    const FeatureSequence& u = corpus[i];
    const std::size_t t = round_up4(u.length());
    Tensor x({t, u.dim()});
    std::copy(u.features.values().begin(), u.features.values().end(), x.values().begin());
    std::vector<double> mask(t, 0.0);
    std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(u.length()), 1.0);
    losses[i] = utterance_loss(x, mask, theta, phi, mode, beta, derive_seed(seed, i), false).loss;
  });
  double s = 0.0;
  for (double l : losses) s += l;
  return s / static_cast<double>(corpus.size());
}

std::string log_header() { return "epoch,train_loss,dev_loss,beta,lr"; }

std::string log_line(const EpochRecord& r) {
  std::ostringstream s;
  s << std::setprecision(17) << r.epoch << ',' << r.train_loss << ',' << r.dev_loss << ',' << r.beta << ',' << r.lr;
  return s.str();
}

TrainResult train(const Corpus& train_corpus, const Corpus& dev_corpus, const ModelConfig& model,
                  const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  model.validate();
  if (train_corpus.empty() || dev_corpus.empty()) throw ContractError("training needs nonempty train and dev corpora");
  if (corpus_dim(train_corpus) != model.obs_dim || corpus_dim(dev_corpus) != model.obs_dim) {
    throw DimensionError("corpus width " + std::to_string(corpus_dim(train_corpus)) + " does not match obs_dim " +
                         std::to_string(model.obs_dim));
  }

  Checkpoint state;
  if (opts.resume) {
    state = *opts.resume;
    if (!(state.theta.config == model)) throw ContractError("resume checkpoint has a different model configuration");
  } else {
    Rng rt(derive_seed(cfg.seed, 1)), rp(derive_seed(cfg.seed, 2));
    state.theta = GenerativeParams::init(model, rt);
    state.phi = InferenceParams::init(model, rp);
    state.adam_theta = AdamState::for_params(state.theta.weights);
    state.adam_phi = AdamState::for_params(state.phi.weights);
    state.lr = cfg.lr;
  }
  state.mode = cfg.mode;
  state.config_hash = config_hash(model, cfg);

  std::ofstream log_file;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    const auto log_path = *opts.out_dir / "train_log.csv";
    const bool fresh = !opts.resume || !std::filesystem::exists(log_path);
    log_file.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log_file) throw FormatError("cannot open '" + log_path.string() + "' for writing");
    if (fresh) log_file << log_header() << '\n' << std::flush;
  }

  TrainResult result;
  result.best = state;
  double best_dev = std::numeric_limits<double>::infinity();
  for (double d : state.dev_history) best_dev = std::min(best_dev, d);

  const std::uint64_t dev_seed = derive_seed(cfg.seed, 4);
  for (std::size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const double beta = kl_anneal_weight(epoch, cfg);
    const std::uint64_t epoch_seed = derive_seed(derive_seed(cfg.seed, 3), epoch);
    const auto batches = batchify(train_corpus, cfg.batch_size, derive_seed(epoch_seed, 0));
    const std::uint64_t noise_seed = derive_seed(epoch_seed, 1);
    double total = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& b = batches[bi];
      std::vector<UtteranceLoss> parts(b.size());
      parallel_for(b.size(), cfg.threads, [&](std::size_t i) {
        parts[i] = utterance_loss(b.sequence(i), b.frame_mask(i), state.theta, state.phi, cfg.mode, beta,
                                  derive_seed(noise_seed, b.indices[i]), true);
      });
      ParameterSet gt = state.theta.weights.zeros_like(), gp = state.phi.weights.zeros_like();
      double batch_loss = 0.0;
      const double w = 1.0 / static_cast<double>(b.size());
      for (const auto& p : parts) {
        batch_loss += p.loss;
        gt.add_scaled(p.grad_theta, w);
        gp.add_scaled(p.grad_phi, w);
      }
      if (!std::isfinite(batch_loss) || !gt.all_finite() || !gp.all_finite()) {
        std::string ids;
        for (std::size_t i = 0; i < b.size(); ++i) ids += (i ? "," : "") + train_corpus[b.indices[i]].id;
        throw NumericalError("non-finite loss or gradient in epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bi) + " (utterances " + ids + ")");
      }
      adam_step(state.theta.weights, gt, state.adam_theta, state.lr, cfg.l2_weight);
      adam_step(state.phi.weights, gp, state.adam_phi, state.lr, cfg.l2_weight);
      total += batch_loss;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(train_corpus.size());
    rec.dev_loss = corpus_loss(dev_corpus, state.theta, state.phi, cfg.mode, 1.0, dev_seed, cfg.threads);
    rec.dev_loss_beta = beta == 1.0 ? rec.dev_loss
                                    : corpus_loss(dev_corpus, state.theta, state.phi, cfg.mode, beta, dev_seed, cfg.threads);
    rec.beta = beta;
    rec.lr = state.lr;
    if (!std::isfinite(rec.dev_loss)) {
      throw NumericalError("non-finite dev loss after epoch " + std::to_string(epoch));
    }

    state.dev_history.push_back(rec.dev_loss);
    state.lr = plateau_lr(state.dev_history, state.lr, cfg);
    state.epoch = epoch + 1;
    result.log.push_back(rec);
    log_debug("epoch " + std::to_string(epoch) + " train " + std::to_string(rec.train_loss) + " dev " +
              std::to_string(rec.dev_loss) + " lr " + std::to_string(rec.lr));

    const bool improved = rec.dev_loss < best_dev;
    if (improved) {
      best_dev = rec.dev_loss;
      result.best = state;
    }
    if (opts.out_dir) {
      save_checkpoint(*opts.out_dir / "last.ckpt", state);
      if (improved) save_checkpoint(*opts.out_dir / "best.ckpt", state);
      log_file << log_line(rec) << '\n' << std::flush;
    }
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  result.last = state;
  return result;
}

}  // namespace cdmm
