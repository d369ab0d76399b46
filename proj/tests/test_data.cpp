#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "cdmm/data.hpp"
#include "cdmm/error.hpp"
#include "cdmm/inference.hpp"
#include "corruption_cases.hpp"
#include "temp_dir.hpp"

using namespace cdmm;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

SyntheticConfig small_synthetic(std::uint64_t seed) {
  SyntheticConfig c;
  c.n_utterances = 6;
  c.dim = 5;
  c.n_states = 4;
  c.min_length = 8;
  c.max_length = 40;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("feature file round trip is bit-exact") {
  TempDir dir;
  Corpus c = fuzz::sample_corpus();
  // Payloads that a text or float-converting path would not preserve.
  Tensor odd({2, 3}, {-0.0, std::numeric_limits<double>::denorm_min(), std::numeric_limits<double>::infinity(),
                      std::bit_cast<double>(0x7ff8dead0000beefULL), 0x1.fffffffffffffp+1023, 1.0 / 3.0});
  c.push_back({"odd ünïcode", odd, std::vector<int>{0, 65535}, std::vector<int>{}});
  write_features(dir / "c.cdft", c);
  const Corpus back = read_features(dir / "c.cdft");
  REQUIRE(back.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(back[i].id == c[i].id);
    CHECK(bit_equal(back[i].features, c[i].features));
    CHECK(back[i].frame_labels == c[i].frame_labels);
    CHECK(back[i].phone_seq == c[i].phone_seq);
  }
  CHECK(encode_features(back) == encode_features(c));
  CHECK(decode_features(encode_features(Corpus{})).empty());
}

TEST_CASE("feature writer rejects unrepresentable labels") {
  Corpus c = fuzz::sample_corpus();
  c[0].frame_labels = std::vector<int>{0, 70000, 1};
  CHECK_THROWS_AS(encode_features(c), ContractError);
  c[0].frame_labels = std::vector<int>{0, 1};
  CHECK_THROWS_AS(encode_features(c), DimensionError);
}

TEST_CASE("every prefix of a valid file is a format error") {
  const auto good = encode_features(fuzz::sample_corpus());
  for (std::size_t n = 0; n < good.size(); ++n) {
    CAPTURE(n);
    CHECK_THROWS_AS(decode_features(std::vector<char>(good.begin(), good.begin() + static_cast<long>(n))), FormatError);
  }
}

TEST_CASE("structural corruption suite") {
  const auto cases = fuzz::corruption_cases();
  CHECK(cases.size() == 50);
  for (const auto& [name, bytes] : cases) {
    CAPTURE(name);
    CHECK_THROWS_AS(decode_features(bytes), FormatError);
  }
  try {
    auto b = encode_features(fuzz::sample_corpus());
    b[5] = 9;
    decode_features(b);
  } catch (const FormatError& e) {
    CHECK(e.offset() == 4);
    CHECK(std::string(e.what()).find("byte offset 4") != std::string::npos);
  }
}

TEST_CASE("random byte mutations never escape as anything but a format error") {
  const auto good = encode_features(fuzz::sample_corpus());
  Rng rng(99);
  int rejected = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    auto b = good;
    const int edits = 1 + static_cast<int>(rng.below(4));
    for (int e = 0; e < edits; ++e) b[rng.below(b.size())] = static_cast<char>(rng.below(256));
    if (rng.below(4) == 0) b.resize(rng.below(b.size() + 1));
    try {
      decode_features(b);
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  CHECK(rejected > 0);
}

TEST_CASE("missing file is a format error naming the path") {
  try {
    read_features("/nonexistent/dir/x.cdft");
    FAIL("no throw");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/dir/x.cdft") != std::string::npos);
  }
}

TEST_CASE("manifests") {
  TempDir dir;
  const Corpus c = fuzz::sample_corpus();
  write_features(dir / "a.cdft", c);
  write_manifest(dir / "m.tsv", {{"b", "a.cdft"}, {"utt-a", (dir / "a.cdft")}});
  const auto entries = read_manifest(dir / "m.tsv");
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].path == dir / "a.cdft");
  const Corpus loaded = load_manifest(dir / "m.tsv");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0] == c[1]);
  CHECK(loaded[1] == c[0]);

  write_manifest(dir / "missing.tsv", {{"nope", "a.cdft"}});
  CHECK_THROWS_WITH_AS(load_manifest(dir / "missing.tsv"), doctest::Contains("nope"), FormatError);
  std::ofstream(dir / "bad.tsv") << "no-tab-here\n";
  CHECK_THROWS_AS(read_manifest(dir / "bad.tsv"), FormatError);
}

TEST_CASE("synthetic corpus: determinism and shape") {
  const SyntheticConfig cfg = small_synthetic(5);
  const Corpus a = generate_synthetic_corpus(cfg), b = generate_synthetic_corpus(cfg);
  CHECK(encode_features(a) == encode_features(b));
  CHECK(encode_features(a) != encode_features(generate_synthetic_corpus(small_synthetic(6))));
  for (const auto& u : a) {
    CHECK(u.length() % 4 == 0);
    CHECK(u.length() >= 8);
    CHECK(u.length() <= 40);
    CHECK(u.dim() == 5);
    REQUIRE(u.frame_labels);
    CHECK(*u.phone_seq == collapse_runs(*u.frame_labels));
    for (int s : *u.frame_labels) CHECK((s >= 0 && s < 4));
  }
  CHECK(collapse_runs({1, 1, 2, 2, 2, 1, 3, 3}) == std::vector<int>{1, 2, 1, 3});

  SyntheticConfig def;
  CHECK(def.n_states == 12);
  CHECK(def.dim == 39);
  CHECK(def.self_transition == 0.9);
  CHECK(def.min_length == 64);
  CHECK(def.max_length == 192);
}

TEST_CASE("synthetic corpus: absorbing dynamics") {
  SyntheticConfig cfg = small_synthetic(8);
  cfg.self_transition = 1.0;
  for (const auto& u : generate_synthetic_corpus(cfg)) CHECK(u.phone_seq->size() == 1);
}

TEST_CASE("synthetic corpus: invalid stochastic matrices") {
  SyntheticConfig cfg = small_synthetic(1);
  cfg.n_states = 2;
  cfg.transition = {0.5, 0.6, 0.5, 0.5};
  CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ContractError);
  cfg.transition = {1.5, -0.5, 0.5, 0.5};
  CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ContractError);
  cfg.transition = {0.5, 0.5};
  CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ContractError);
  cfg.transition.clear();
  cfg.self_transition = 1.2;
  CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ContractError);
  cfg.self_transition = 0.5;
  cfg.min_length = 9;
  cfg.max_length = 11;
  CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ContractError);
}

TEST_CASE("synthetic corpus: empirical transition frequencies") {
  SyntheticConfig cfg;
  cfg.n_states = 3;
  cfg.dim = 1;
  cfg.transition = {0.7, 0.2, 0.1, 0.05, 0.9, 0.05, 0.3, 0.3, 0.4};
  cfg.min_length = cfg.max_length = 1000;
  cfg.n_utterances = 100;
  cfg.seed = 31;
  std::vector<double> counts(9, 0.0), from(3, 0.0);
  std::size_t frames = 0;
  for (const auto& u : generate_synthetic_corpus(cfg)) {
    const auto& s = *u.frame_labels;
    frames += s.size();
    for (std::size_t t = 1; t < s.size(); ++t) {
      counts[static_cast<std::size_t>(s[t - 1] * 3 + s[t])] += 1;
      from[static_cast<std::size_t>(s[t - 1])] += 1;
    }
  }
  CHECK(frames == 100000);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double p = cfg.transition[i * 3 + j], n = from[i];
      const double se = std::sqrt(p * (1 - p) / n);
      CAPTURE(i);
      CAPTURE(j);
      CHECK(std::abs(counts[i * 3 + j] / n - p) <= 3 * se);
    }
}

TEST_CASE("synthetic labels are linearly learnable") {
  // Nearest-class-mean with a shared isotropic covariance is a linear classifier.
  SyntheticConfig cfg;
  cfg.n_utterances = 40;
  cfg.seed = 3;
  const Corpus c = generate_synthetic_corpus(cfg);
  const std::size_t k = cfg.n_states, d = cfg.dim;
  std::vector<double> sums(k * d, 0.0), n(k, 0.0);
  for (std::size_t u = 0; u < 20; ++u)
    for (std::size_t t = 0; t < c[u].length(); ++t) {
      const auto s = static_cast<std::size_t>((*c[u].frame_labels)[t]);
      n[s] += 1;
      for (std::size_t j = 0; j < d; ++j) sums[s * d + j] += c[u].features.at(t, j);
    }
  double errors = 0, total = 0;
  for (std::size_t u = 20; u < 40; ++u)
    for (std::size_t t = 0; t < c[u].length(); ++t) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < k; ++s) {
        if (n[s] == 0) continue;
        double dist = 0;
        for (std::size_t j = 0; j < d; ++j) dist += std::pow(c[u].features.at(t, j) - sums[s * d + j] / n[s], 2);
        if (dist < best_d) best_d = dist, best = s;
      }
      errors += best != static_cast<std::size_t>((*c[u].frame_labels)[t]);
      total += 1;
    }
  const double fer = errors / total;
  INFO("oracle FER " << fer);
  CHECK(fer < 1.0 - 1.0 / static_cast<double>(k));
}

TEST_CASE("external wide features load and feed the model") {
  TempDir dir;
  SyntheticConfig cfg = small_synthetic(4);
  cfg.dim = 512;
  cfg.n_utterances = 2;
  write_features(dir / "wide.cdft", generate_synthetic_corpus(cfg));
  const Corpus c = read_features(dir / "wide.cdft");
  CHECK(corpus_dim(c) == 512);
  ModelConfig mc;
  mc.obs_dim = 512;
  mc.latent_dim = 2;
  mc.encoder_channels = 4;
  mc.embed_channels = 6;
  mc.emission_hidden = 3;
  Rng rng(1);
  const GenerativeParams theta = GenerativeParams::init(mc, rng);
  const InferenceParams phi = InferenceParams::init(mc, rng);
  const Tensor f = extract_features(c[0].features, theta, phi);
  CHECK(f.rows() == c[0].length());
  CHECK(f.cols() == 6);
  CHECK(std::isfinite(elbo(c[0].features, theta, phi, ModelMode::Markov, 1.0, rng).elbo));
}

TEST_CASE("batchify") {
  Corpus one{{"u", Tensor({100, 2}, 1.0), std::nullopt, std::nullopt}};
  auto b = batchify(one, 4, 1);
  REQUIRE(b.size() == 1);
  CHECK(b[0].max_length() == 100);
  CHECK(std::all_of(b[0].mask.begin(), b[0].mask.end(), [](auto m) { return m == 1; }));

  Corpus odd{{"v", Tensor({67, 2}, 1.0), std::nullopt, std::nullopt}};
  b = batchify(odd, 4, 1);
  CHECK(b[0].max_length() == 68);
  CHECK(b[0].mask[66] == 1);
  CHECK(b[0].mask[67] == 0);
  CHECK(b[0].sequence(0).rows() == 68);
  CHECK(b[0].frame_mask(0).back() == 0.0);

  SyntheticConfig cfg = small_synthetic(12);
  cfg.n_utterances = 11;
  Corpus c = generate_synthetic_corpus(cfg);
  c[3].features = Tensor({13, 5}, 2.0);  // not a multiple of 4
  c[3].frame_labels.reset();
  const auto batches = batchify(c, 3, 77);
  CHECK(batches.size() == 4);
  std::map<std::size_t, int> seen;
  for (const auto& bt : batches) {
    for (std::size_t i = 0; i < bt.size(); ++i) {
      ++seen[bt.indices[i]];
      const FeatureSequence& u = c[bt.indices[i]];
      CHECK(bt.lengths[i] == u.length());
      const Tensor s = bt.sequence(i);
      CHECK(s.rows() % 4 == 0);
      for (std::size_t t = 0; t < bt.max_length(); ++t) {
        const bool real = t < u.length();
        CHECK(bt.mask[i * bt.max_length() + t] == (real ? 1 : 0));
        for (std::size_t j = 0; j < 5; ++j) {
          const double v = bt.features.values()[(i * bt.max_length() + t) * 5 + j];
          if (real) {
            CHECK(v == u.features.at(t, j));
          } else {
            CHECK(v == 0.0);
          }
        }
      }
    }
    CHECK(bt.max_length() % 4 == 0);
  }
  CHECK(seen.size() == c.size());
  for (const auto& [_, k] : seen) CHECK(k == 1);
  // Same seed, same order; different seed, (almost surely) different order.
  CHECK(batchify(c, 3, 77)[0].indices == batches[0].indices);
  CHECK(batchify(c, 11, 78)[0].indices != batchify(c, 11, 77)[0].indices);
  CHECK_THROWS_AS(batchify(Corpus{}, 3, 1), ContractError);
}
