#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "cdmm/error.hpp"
#include "cdmm/trainer.hpp"
#include "temp_dir.hpp"

using namespace cdmm;

namespace {

ModelConfig tiny_model(std::size_t d) {
  ModelConfig m;
  m.obs_dim = d;
  m.latent_dim = 2;
  m.encoder_channels = 6;
  m.embed_channels = 6;
  m.emission_hidden = 5;
  return m;
}

Corpus tiny_corpus(std::size_t n, std::uint64_t seed, std::size_t dim = 4) {
  SyntheticConfig s;
  s.n_states = 3;
  s.dim = dim;
  s.min_length = 12;
  s.max_length = 24;
  s.n_utterances = n;
  s.seed = seed;
  return generate_synthetic_corpus(s);
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 2;
  t.seed = 17;
  t.lr = 3e-3;
  return t;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("KL annealing schedule") {
  const TrainConfig cfg;
  CHECK(kl_anneal_weight(0, cfg) == 0.5);
  CHECK(kl_anneal_weight(10, cfg) == 0.75);
  CHECK(kl_anneal_weight(20, cfg) == 1.0);
  CHECK(kl_anneal_weight(57, cfg) == 1.0);
  for (std::size_t e = 0; e < 20; ++e) {
    CHECK(kl_anneal_weight(e, cfg) < kl_anneal_weight(e + 1, cfg));
    CHECK(kl_anneal_weight(e + 1, cfg) - kl_anneal_weight(e, cfg) == doctest::Approx(0.025).epsilon(1e-12));
  }
}

TEST_CASE("plateau learning-rate halving") {
  const TrainConfig cfg;
  auto lr_after = [&](std::vector<double> h) { return plateau_lr(h, 0.001, cfg); };
  for (std::size_t n = 1; n <= 8; ++n) {
    std::vector<double> improving;
    for (std::size_t i = 0; i < n; ++i) improving.push_back(10.0 - static_cast<double>(i));
    CHECK(lr_after(improving) == 0.001);
  }
  CHECK(lr_after({5.0, 5.0, 5.0}) == 0.001);
  CHECK(lr_after({5.0, 5.0, 5.0, 5.0}) == 0.0005);
  // Two stagnant epochs, an improvement, then the counter starts over.
  CHECK(lr_after({5.0, 5.0, 5.0, 4.0}) == 0.001);
  CHECK(lr_after({5.0, 5.0, 5.0, 4.0, 4.0, 4.0}) == 0.001);
  CHECK(lr_after({5.0, 5.0, 5.0, 4.0, 4.0, 4.0, 4.0}) == 0.0005);
  // The counter resets after a halving.
  CHECK(lr_after({5.0, 5.0, 5.0, 5.0, 5.0}) == 0.001);
  CHECK(lr_after({5.0, 5.0, 5.0, 5.0, 5.0, 5.0}) == 0.001);
  CHECK(lr_after({5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0}) == 0.0005);
  // Gains within the threshold do not count; worse losses do not reset the best.
  CHECK(lr_after({5.0, 5.0 - 5e-7, 5.0 - 9e-7, 5.0 - 1e-6}) == 0.0005);
  CHECK(lr_after({5.0, 6.0, 4.99999, 7.0, 5.0}) == 0.001);
  CHECK(lr_after({5.0, 6.0, 4.99999, 7.0, 5.0, 5.0}) == 0.0005);
  CHECK_THROWS_AS(lr_after({}), ContractError);
}

TEST_CASE("Adam") {
  SUBCASE("zero gradient, zero state") {
    ParameterSet p;
    p.add("a", Tensor({3}, {1.0, -2.0, 0.5}));
    const ParameterSet before = p;
    AdamState s = AdamState::for_params(p);
    adam_step(p, p.zeros_like(), s, 0.001, 0.0);
    CHECK(p == before);
    CHECK(s.step == 1);
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    // The step is lr·|g|/(|g| + eps), so |g| must dwarf eps for the 1e-6 bound.
    for (double g : {3.7, -0.05, 1e4}) {
      ParameterSet p, grad;
      p.add("w", Tensor::scalar(0.25));
      grad.add("w", Tensor::scalar(g));
      AdamState s = AdamState::for_params(p);
      adam_step(p, grad, s, 0.001, 0.0);
      CHECK(std::abs((p.get("w")[0] - 0.25) + 0.001 * (g > 0 ? 1 : -1)) <= 0.001 * 1e-6);
    }
  }
  SUBCASE("three scripted steps against a hand trace") {
    ParameterSet p, grad;
    p.add("w", Tensor::scalar(1.0));
    grad.add("w", Tensor::scalar(0.0));
    AdamState s = AdamState::for_params(p);
    const double gs[3] = {0.5, -1.0, 2.0};
    const double lr = 0.01, l2 = 0.1;
    // Step-by-step arithmetic, written out independently of the implementation.
    double w = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
      grad.get("w")[0] = gs[t - 1];
      adam_step(p, grad, s, lr, l2);
      const double g = gs[t - 1] + l2 * w;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
      w = w - lr * mh / (std::sqrt(vh) + 1e-8);
      CHECK(std::abs(p.get("w")[0] - w) <= 1e-12);
      CHECK(std::abs(s.m.get("w")[0] - m) <= 1e-12);
      CHECK(std::abs(s.v.get("w")[0] - v) <= 1e-12);
    }
    CHECK(s.step == 3);
  }
  SUBCASE("L2 alone shrinks toward zero") {
    ParameterSet p;
    p.add("w", Tensor({2}, {2.0, -3.0}));
    AdamState s = AdamState::for_params(p);
    adam_step(p, p.zeros_like(), s, 0.01, 0.5);
    CHECK(p.get("w")[0] < 2.0);
    CHECK(p.get("w")[1] > -3.0);
  }
  SUBCASE("shape mismatch") {
    ParameterSet p, g;
    p.add("w", Tensor({2}));
    g.add("w", Tensor({3}));
    AdamState s = AdamState::for_params(p);
    CHECK_THROWS_AS(adam_step(p, g, s, 0.1, 0.0), DimensionError);
    ParameterSet g2;
    g2.add("other", Tensor({2}));
    CHECK_THROWS_AS(adam_step(p, g2, s, 0.1, 0.0), DimensionError);
  }
}

TEST_CASE("masked frames contribute nothing to the loss") {
  const ModelConfig m = tiny_model(4);
  Rng rng(5);
  const GenerativeParams theta = GenerativeParams::init(m, rng);
  const InferenceParams phi = InferenceParams::init(m, rng);
  Corpus c = tiny_corpus(2, 9);
  c[0].features = Tensor({14, 4}, 0.3);
  for (std::size_t i = 0; i < c[0].features.numel(); ++i) c[0].features[i] = std::sin(0.7 * static_cast<double>(i));
  c[0].frame_labels.reset();

  const double alone = corpus_loss({c[0]}, theta, phi, ModelMode::Markov, 0.8, 3);
  // Through a batch with a longer neighbour: the padded copy carries extra masked frames.
  Corpus pair{c[0], c[1]};
  pair[1].features = Tensor({40, 4}, 1.0);
  pair[1].frame_labels.reset();
  const auto batches = batchify(pair, 2, 1);
  REQUIRE(batches.size() == 1);
  const Batch& b = batches[0];
  const std::size_t k = b.indices[0] == 0 ? 0 : 1;
  CHECK(b.max_length() == 40);
  const double batched =
      utterance_loss(b.sequence(k), b.frame_mask(k), theta, phi, ModelMode::Markov, 0.8, derive_seed(3, 0), false).loss;
  CHECK(std::abs(batched - alone) <= 1e-10);

  // Garbage in the masked tail of the padded block changes nothing.
  Tensor x = b.sequence(k);
  x.at(14, 0) = 1e6;
  x.at(15, 3) = -42.0;
  const double garbage =
      utterance_loss(x, b.frame_mask(k), theta, phi, ModelMode::Markov, 0.8, derive_seed(3, 0), false).loss;
  CHECK(garbage == batched);
}

TEST_CASE("training is deterministic and logs the schedule") {
  const Corpus c = tiny_corpus(2, 1);
  const Corpus dev = tiny_corpus(1, 2);
  TrainConfig cfg = quick(2);
  cfg.kl_anneal_epochs = 4;
  TempDir d1, d2;
  const TrainResult a = train(c, dev, tiny_model(4), cfg, {d1.path(), {}, {}});
  const TrainResult b = train(c, dev, tiny_model(4), cfg, {d2.path(), {}, {}});
  CHECK(slurp(d1 / "train_log.csv") == slurp(d2 / "train_log.csv"));
  CHECK(slurp(d1 / "last.ckpt") == slurp(d2 / "last.ckpt"));
  CHECK(a.last == b.last);
  REQUIRE(a.log.size() == 2);
  for (const auto& r : a.log) {
    CHECK(r.beta == kl_anneal_weight(r.epoch, cfg));
    CHECK(std::isfinite(r.train_loss));
    CHECK(std::isfinite(r.dev_loss));
  }
  std::istringstream log(slurp(d1 / "train_log.csv"));
  std::string line;
  std::getline(log, line);
  CHECK(line == "epoch,train_loss,dev_loss,beta,lr");
  std::getline(log, line);
  CHECK(line == log_line(a.log[0]));
  CHECK(line.rfind("0,", 0) == 0);
  CHECK(std::filesystem::exists(d1 / "best.ckpt"));
}

TEST_CASE("thread fan-out does not change results") {
  const Corpus c = tiny_corpus(5, 4);
  const Corpus dev = tiny_corpus(2, 5);
  TrainConfig cfg = quick(2);
  cfg.batch_size = 3;
  const TrainResult serial = train(c, dev, tiny_model(4), cfg);
  cfg.threads = 3;
  const TrainResult threaded = train(c, dev, tiny_model(4), cfg);
  CHECK(serial.last.theta == threaded.last.theta);
  CHECK(serial.last.phi == threaded.last.phi);
  CHECK(serial.log.back().dev_loss == threaded.log.back().dev_loss);
}

TEST_CASE("zero learning rate freezes parameters") {
  const Corpus c = tiny_corpus(3, 6);
  TrainConfig cfg = quick(3);
  cfg.lr = 0.0;
  const ModelConfig m = tiny_model(4);
  Rng rt(derive_seed(cfg.seed, 1)), rp(derive_seed(cfg.seed, 2));
  const GenerativeParams theta0 = GenerativeParams::init(m, rt);
  const InferenceParams phi0 = InferenceParams::init(m, rp);
  const TrainResult r = train(c, c, m, cfg);
  CHECK(hash_parameters(r.last.theta.weights) == hash_parameters(theta0.weights));
  CHECK(hash_parameters(r.last.phi.weights) == hash_parameters(phi0.weights));
  CHECK(r.log[0].dev_loss == r.log[2].dev_loss);
}

TEST_CASE("checkpoints round-trip bit-exactly and resume continues the run") {
  const Corpus c = tiny_corpus(3, 7);
  const Corpus dev = tiny_corpus(2, 8);
  TempDir dir;
  const TrainResult two = train(c, dev, tiny_model(4), quick(2), {dir.path(), {}, {}});
  const Checkpoint loaded = load_checkpoint(dir / "last.ckpt");
  CHECK(loaded == two.last);
  CHECK(loaded.epoch == 2);
  CHECK(loaded.dev_history.size() == 2);
  CHECK(loaded.config_hash == config_hash(tiny_model(4), quick(2)));
  const Tensor x = c[0].features;
  CHECK(extract_features(x, loaded.theta, loaded.phi) == extract_features(x, two.last.theta, two.last.phi));
  CHECK(corpus_loss(dev, loaded.theta, loaded.phi, ModelMode::Markov, 1.0, 9) ==
        corpus_loss(dev, two.last.theta, two.last.phi, ModelMode::Markov, 1.0, 9));

  const TrainResult four = train(c, dev, tiny_model(4), quick(4));
  const TrainResult resumed = train(c, dev, tiny_model(4), quick(4), {dir.path(), {}, loaded});
  CHECK(resumed.last.theta == four.last.theta);
  CHECK(resumed.last.adam_phi == four.last.adam_phi);
  CHECK(resumed.last.dev_history == four.last.dev_history);
  // The log file was appended to, not restarted.
  std::istringstream log(slurp(dir / "train_log.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 5);

  std::string bytes = slurp(dir / "last.ckpt");
  std::ofstream(dir / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), FormatError);
  std::ofstream(dir / "bad.ckpt", std::ios::binary) << "CDFT" << bytes.substr(4);
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), FormatError);
}

TEST_CASE("non-finite loss aborts naming the batch") {
  Corpus c = tiny_corpus(4, 10);
  c[2].features.at(3, 1) = std::numeric_limits<double>::quiet_NaN();
  try {
    train(c, tiny_corpus(1, 11), tiny_model(4), quick(1));
    FAIL("no throw");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch") != std::string::npos);
    CHECK(msg.find(c[2].id) != std::string::npos);
  }
}

TEST_CASE("training improves the ELBO on a synthetic corpus") {
  SyntheticConfig s;
  s.n_states = 4;
  s.dim = 6;
  s.min_length = 16;
  s.max_length = 32;
  s.n_utterances = 16;
  s.seed = 21;
  const Corpus c = generate_synthetic_corpus(s);
  s.seed = 22;
  s.n_utterances = 4;
  const Corpus dev = generate_synthetic_corpus(s);
  TrainConfig cfg = quick(30);
  cfg.batch_size = 4;
  const TrainResult r = train(c, dev, tiny_model(6), cfg);
  INFO("first " << r.log.front().train_loss << " last " << r.log.back().train_loss);
  CHECK(r.log.back().train_loss < r.log.front().train_loss);
  CHECK(r.log.back().dev_loss < r.log.front().dev_loss);
}

TEST_CASE("config validation") {
  TrainConfig t;
  t.kl_start = 1.5;
  CHECK_THROWS_AS(t.validate(), ContractError);
  t = {};
  t.plateau_factor = 1.0;
  CHECK_THROWS_AS(t.validate(), ContractError);
  t = {};
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ContractError);
  CHECK_THROWS_AS(train(tiny_corpus(1, 1, 5), tiny_corpus(1, 2, 5), tiny_model(4), quick(1)), DimensionError);
}
