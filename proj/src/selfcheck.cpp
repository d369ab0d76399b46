#include "cdmm/selfcheck.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

#include "cdmm/data.hpp"
#include "cdmm/gaussian.hpp"
#include "cdmm/inference.hpp"
#include "cdmm/params.hpp"
#include "cdmm/probes.hpp"

namespace cdmm {

namespace {

constexpr double kGradTolerance = 1e-4;

struct FdResult {
  double worst = 0.0;
  std::size_t checked = 0;
};

// Central differences over every entry of `sets` against reverse mode.
FdResult finite_difference(const std::function<ad::Var(ad::Graph&, std::vector<Binder>&)>& loss,
                           std::vector<ParameterSet*> sets, double h = 1e-6) {
  std::vector<ParameterSet> analytic;
  {
    ad::Graph g;
    std::vector<Binder> b;
    for (ParameterSet* s : sets) b.emplace_back(g, *s, true);
    g.backward(loss(g, b));
    for (const Binder& x : b) analytic.push_back(x.gradients());
  }
  auto eval = [&] {
    ad::Graph g;
    std::vector<Binder> b;
    for (ParameterSet* s : sets) b.emplace_back(g, *s, false);
    return loss(g, b).value().item();
  };
  FdResult r;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    for (auto& [name, t] : sets[s]->entries()) {
      for (std::size_t j = 0; j < t.numel(); ++j) {
        const double orig = t[j];
        t[j] = orig + h;
        const double up = eval();
        t[j] = orig - h;
        const double down = eval();
        t[j] = orig;
        const double numeric = (up - down) / (2 * h), a = analytic[s].get(name)[j];
        r.worst = std::max(r.worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
        ++r.checked;
      }
    }
  }
  return r;
}

CheckOutcome grad_outcome(const std::string& name, const FdResult& r) {
  std::ostringstream d;
  d << r.checked << " entries, max relative error " << r.worst;
  return {name, r.worst <= kGradTolerance, d.str()};
}

void randomize(ParameterSet& ps, Rng& rng, double sd) {
  for (auto& [_, t] : ps.entries())
    for (double& v : t.values()) v = sd * rng.normal();
}

CheckOutcome check_primitives() {
  Rng rng(101);
  ParameterSet p;
  p.add("x", random_normal({8, 3}, 1.0, rng));
  p.add("k", random_normal({4, 3, 3}, 0.5, rng));
  p.add("kb", random_normal({4}, 0.5, rng));
  p.add("w", random_normal({4, 5}, 0.5, rng));
  p.add("b", random_normal({5}, 0.5, rng));
  p.add("pos", Tensor({1, 5}, {0.5, 1.2, 2.0, 0.8, 1.5}));
  const std::vector<int> picks{0, 4, 2, 1};
  return grad_outcome("gradcheck: primitives", finite_difference(
      [&](ad::Graph&, std::vector<Binder>& b) {
        Binder& q = b[0];
        const ad::Var c = ad::conv1d(q("x"), q("k"), q("kb"), 2, 1);
        const ad::Var h = ad::add_rowwise(ad::matmul(ad::tanh(c), q("w")), q("b"));
        const ad::Var up = ad::first_rows(ad::repeat_rows(ad::sigmoid(h), 2), 7);
        const ad::Var lp = ad::pick(ad::log_softmax_rows(ad::softplus(h)), picks);
        const ad::Var pos = ad::log(ad::add_scalar(ad::exp(q("pos")), 0.1));
        return ad::add(ad::add(ad::sum(ad::square(up)), ad::scale(ad::sum(lp), 0.7)),
                       ad::sum(ad::mul(pos, ad::row(ad::stack_rows(std::vector<ad::Var>{q("b")}), 0))));
      },
      {&p}));
}

CheckOutcome check_elbo(ModelMode mode) {
  ModelConfig cfg;
  cfg.obs_dim = 3;
  cfg.latent_dim = 2;
  cfg.encoder_channels = 4;
  cfg.embed_channels = 4;
  cfg.emission_hidden = 3;
  Rng rng(202);
  GenerativeParams theta = GenerativeParams::init(cfg, rng);
  InferenceParams phi = InferenceParams::init(cfg, rng);
  randomize(theta.weights, rng, 0.25);
  randomize(phi.weights, rng, 0.25);
  theta.weights.get("gen.rho")[0] = std::log(std::exp(1.0) - 1.0);
  const Tensor x = random_normal({8, 3}, 1.0, rng);
  const Tensor noise = random_normal({2, 2}, 1.0, rng);
  return grad_outcome("gradcheck: ELBO (" + to_string(mode) + ")", finite_difference(
      [&](ad::Graph& g, std::vector<Binder>& b) { return inf::elbo(b[0], b[1], g.constant(x), noise, mode, 0.8).elbo; },
      {&theta.weights, &phi.weights}));
}

CheckOutcome check_ctc_grad() {
  Rng rng(303);
  ParameterSet p;
  p.add("l", random_normal({6, 4}, 1.0, rng));
  const std::vector<int> y{1, 3, 3};
  return grad_outcome("gradcheck: CTC loss", finite_difference(
      [&](ad::Graph&, std::vector<Binder>& b) { return ctc_loss(ad::scale(b[0]("l"), 1.3), y); }, {&p}));
}

CheckOutcome check_kl_monte_carlo() {
  Rng rng(404);
  const int pairs = 10, samples = 200000;
  double worst = 0.0;
  for (int k = 0; k < pairs; ++k) {
    DiagGaussian q{random_normal({3}, 1.0, rng), Tensor({3})}, p{random_normal({3}, 1.0, rng), Tensor({3})};
    for (std::size_t d = 0; d < 3; ++d) {
      q.scale[d] = std::exp(0.5 * rng.normal());
      p.scale[d] = std::exp(0.5 * rng.normal());
    }
    double s = 0, ss = 0;
    for (int i = 0; i < samples; ++i) {
      double diff = 0;
      for (std::size_t d = 0; d < 3; ++d) {
        const double z = q.mean[d] + q.scale[d] * rng.normal();
        const double uq = (z - q.mean[d]) / q.scale[d], up = (z - p.mean[d]) / p.scale[d];
        diff += -std::log(q.scale[d]) - 0.5 * uq * uq + std::log(p.scale[d]) + 0.5 * up * up;
      }
      s += diff;
      ss += diff * diff;
    }
    const double mean = s / samples, se = std::sqrt((ss / samples - mean * mean) / samples);
    worst = std::max(worst, std::abs(mean - kl_step(q, p)) / se);
    if (kl_step(q, q) != 0.0) return {"KL: analytic vs Monte Carlo", false, "KL(q, q) is not zero"};
  }
  std::ostringstream d;
  d << pairs << " pairs x " << samples << " samples, worst deviation " << worst << " standard errors";
  return {"KL: analytic vs Monte Carlo", worst <= 4.0, d.str()};
}

CheckOutcome check_ctc_enumeration() {
  Rng rng(505);
  double worst = 0.0;
  std::size_t cases = 0;
  for (std::size_t t_len = 1; t_len <= 4; ++t_len) {
    for (int k = 1; k <= 2; ++k) {
      for (std::size_t len = 0; len <= 2; ++len) {
        for (int code = 0; code < (len == 0 ? 1 : (len == 1 ? k : k * k)); ++code) {
          std::vector<int> y;
          for (std::size_t i = 0, c = static_cast<std::size_t>(code); i < len; ++i, c /= static_cast<std::size_t>(k))
            y.push_back(static_cast<int>(c % static_cast<std::size_t>(k)) + 1);
          if (t_len < ctc_min_frames(y)) continue;
          const std::size_t kk = static_cast<std::size_t>(k) + 1;
          const Tensor l = random_normal({t_len, kk}, 1.5, rng);
          // Every path of length T over the blank-augmented alphabet.
          double total = 0.0;
          std::size_t n_paths = 1;
          for (std::size_t i = 0; i < t_len; ++i) n_paths *= kk;
          for (std::size_t path = 0; path < n_paths; ++path) {
            double prob = 1.0;
            std::vector<int> collapsed;
            int prev = -1;
            for (std::size_t t = 0, c = path; t < t_len; ++t, c /= kk) {
              const int s = static_cast<int>(c % kk);
              double z = 0.0;
              for (std::size_t j = 0; j < kk; ++j) z += std::exp(l.at(t, j));
              prob *= std::exp(l.at(t, static_cast<std::size_t>(s))) / z;
              if (s != prev && s != 0) collapsed.push_back(s);
              prev = s;
            }
            if (collapsed == y) total += prob;
          }
          worst = std::max(worst, std::abs(std::exp(-ctc_loss(l, y)) - total));
          ++cases;
        }
      }
    }
  }
  std::ostringstream d;
  d << cases << " cases, max absolute error " << worst;
  return {"CTC: forward recursion vs alignment enumeration", worst <= 1e-8, d.str()};
}

CheckOutcome check_cdft_round_trip() {
  SyntheticConfig s;
  s.n_states = 3;
  s.dim = 4;
  s.min_length = 8;
  s.max_length = 16;
  s.n_utterances = 5;
  Corpus c = generate_synthetic_corpus(s);
  c[0].features[0] = -0.0;
  c[0].features[1] = std::numeric_limits<double>::denorm_min();
  c[0].features[2] = std::numeric_limits<double>::infinity();
  const Corpus back = decode_features(encode_features(c));
  bool same = back.size() == c.size();
  for (std::size_t i = 0; same && i < c.size(); ++i) {
    same = back[i].id == c[i].id && back[i].frame_labels == c[i].frame_labels && back[i].phone_seq == c[i].phone_seq &&
           back[i].features.shape() == c[i].features.shape() &&
           std::equal(back[i].features.values().begin(), back[i].features.values().end(),
                      c[i].features.values().begin(), [](double a, double b) {
                        return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
                      });
  }
  return {"CDFT: bit-exact round trip", same, std::to_string(c.size()) + " utterances"};
}

}  // namespace

std::vector<CheckOutcome> run_selfcheck() {
  std::vector<CheckOutcome> out;
  auto guarded = [&](const std::string& name, const std::function<CheckOutcome()>& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({name, false, std::string("threw: ") + e.what()});
    }
  };
  guarded("gradcheck: primitives", check_primitives);
  guarded("gradcheck: ELBO (markov)", [] { return check_elbo(ModelMode::Markov); });
  guarded("gradcheck: ELBO (isotropic)", [] { return check_elbo(ModelMode::IsotropicPrior); });
  guarded("gradcheck: CTC loss", check_ctc_grad);
  guarded("KL: analytic vs Monte Carlo", check_kl_monte_carlo);
  guarded("CTC: forward recursion vs alignment enumeration", check_ctc_enumeration);
  guarded("CDFT: bit-exact round trip", check_cdft_round_trip);
  return out;
}

}  // namespace cdmm
