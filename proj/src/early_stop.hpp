#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cdmm/error.hpp"
#include "cdmm/params.hpp"
#include "cdmm/probes.hpp"
#include "cdmm/rng.hpp"
#include "cdmm/trainer.hpp"

namespace cdmm::detail {

struct HoldoutSplit {
  std::vector<std::size_t> train, holdout;
};

// round(fraction·n) utterances held out, clamped to [1, n−1] when n ≥ 2; none otherwise.
inline HoldoutSplit holdout_split(std::size_t n, double fraction, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(idx));
  std::size_t h = 0;
  if (n >= 2 && fraction > 0.0) {
    h = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5)), 1, n - 1);
  }
  HoldoutSplit s;
  s.holdout.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(h));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(h), idx.end());
  std::sort(s.holdout.begin(), s.holdout.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

struct EarlyStopConfig {
  double lr = 1e-3;
  double l2_weight = 0.0;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
};

// Adam over `params`. `epoch_batches(rng, step)` calls step(loss_fn) once per
// minibatch; `holdout_loss(params)` scores the current weights. Returns the
// weights with the best held-out loss (the last ones when there is no holdout).
template <typename EpochFn, typename HoldoutFn>
ParameterSet optimize(ParameterSet params, const EarlyStopConfig& cfg, bool has_holdout, Rng& rng,
                      EpochFn epoch_batches, HoldoutFn holdout_loss, ProbeTrace* trace) {
  AdamState adam = AdamState::for_params(params);
  ParameterSet best = params;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  ProbeTrace local;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    double total = 0.0;
    std::size_t steps = 0;
    epoch_batches(rng, [&](const std::function<ad::Var(Binder&)>& loss_fn) {
      ad::Graph g;
      Binder b(g, params, true);
      const ad::Var loss = loss_fn(b);
      g.backward(loss);
      adam_step(params, b.gradients(), adam, cfg.lr, cfg.l2_weight);
      total += loss.value().item();
      ++steps;
    });
    if (!params.all_finite()) throw NumericalError("weights became non-finite in epoch " + std::to_string(epoch));
    local.train_loss.push_back(total / static_cast<double>(std::max<std::size_t>(steps, 1)));
    local.epochs_run = epoch + 1;
    if (!has_holdout) {
      best = params;
      local.best_epoch = epoch;
      continue;
    }
    const double h = holdout_loss(params);
    local.holdout_loss.push_back(h);
    if (h < best_loss) {
      best_loss = h;
      best = params;
      local.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  if (trace) {
    local.holdout_utterances = trace->holdout_utterances;
    *trace = std::move(local);
  }
  return best;
}

}  // namespace cdmm::detail
