#include "cdmm/probes.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "cdmm/error.hpp"
#include "cdmm/params.hpp"
#include "cdmm/rng.hpp"
#include "cdmm/trainer.hpp"
#include "early_stop.hpp"

namespace cdmm {

double frame_error_rate(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) {
    throw ContractError("frame_error_rate: " + std::to_string(predicted.size()) + " predictions for " +
                        std::to_string(truth.size()) + " labels");
  }
  if (truth.empty()) throw ContractError("frame_error_rate: no frames");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) wrong += predicted[i] != truth[i];
  return static_cast<double>(wrong) / static_cast<double>(truth.size());
}

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double phone_error_rate(std::span<const int> hyp, std::span<const int> ref) {
  if (ref.empty()) throw ContractError("phone_error_rate: empty reference");
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

void feature_statistics(const std::vector<Tensor>& features, Tensor& mean, Tensor& inv_std) {
  if (features.empty()) throw ContractError("feature_statistics: no features");
  const std::size_t f = features.front().cols();
  std::vector<double> s(f, 0.0), s2(f, 0.0);
  double n = 0;
  for (const Tensor& x : features) {
    if (x.cols() != f) throw DimensionError("feature_statistics: inconsistent widths");
    for (std::size_t t = 0; t < x.rows(); ++t) {
      for (std::size_t j = 0; j < f; ++j) s[j] += x.at(t, j);
      n += 1;
    }
  }
  mean = Tensor({f});
  inv_std = Tensor({f});
  for (std::size_t j = 0; j < f; ++j) mean[j] = s[j] / n;
  for (const Tensor& x : features)
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t j = 0; j < f; ++j) s2[j] += (x.at(t, j) - mean[j]) * (x.at(t, j) - mean[j]);
  for (std::size_t j = 0; j < f; ++j) {
    const double sd = std::sqrt(s2[j] / n);
    inv_std[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
}

namespace {

Tensor standardize(const Tensor& x, const Tensor& mean, const Tensor& inv_std) {
  if (x.cols() != mean.numel()) {
    throw DimensionError("probe expects " + std::to_string(mean.numel()) + " features, got " + std::to_string(x.cols()));
  }
  Tensor out(x.shape());
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(t, j) = (x.at(t, j) - mean[j]) * inv_std[j];
  return out;
}

ad::Var affine(Binder& p, ad::Var x) { return ad::add_rowwise(ad::matmul(x, p("w")), p("b")); }

void check_inputs(const std::vector<Tensor>& features, std::size_t n_targets) {
  if (features.empty()) throw ContractError("probe training needs at least one utterance");
  if (features.size() != n_targets) throw ContractError("probe training: one target sequence per utterance required");
  for (const Tensor& x : features) {
    if (x.rank() != 2 || x.cols() != features.front().cols()) throw DimensionError("probe features must share a width");
  }
}

LinearProbe run_optimizer(LinearProbe probe, const ProbeConfig& cfg, bool has_holdout, Rng& rng,
                          const auto& epoch_batches, const auto& holdout_loss, ProbeTrace* trace) {
  ParameterSet params;
  params.add("w", probe.w);
  params.add("b", probe.b);
  const detail::EarlyStopConfig es{cfg.lr, 0.0, cfg.max_epochs, cfg.patience};
  const ParameterSet best = detail::optimize(std::move(params), es, has_holdout, rng, epoch_batches, holdout_loss, trace);
  probe.w = best.get("w");
  probe.b = best.get("b");
  return probe;
}

}  // namespace

void ProbeConfig::validate() const {
  if (!(lr > 0.0)) throw ContractError("probe lr must be positive");
  if (max_epochs == 0 || frame_batch == 0 || ctc_batch == 0) throw ContractError("probe epochs and batch sizes must be positive");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ContractError("holdout_fraction must lie in [0, 1)");
  if (patience == 0) throw ContractError("probe patience must be positive");
}

Tensor LinearProbe::logits(const Tensor& features) const {
  const Tensor x = standardize(features, mean, inv_std);
  Tensor out({x.rows(), n_outputs()});
  gemm_nn(x.values(), w.values(), out.values(), x.rows(), x.cols(), n_outputs(), false);
  for (std::size_t t = 0; t < out.rows(); ++t)
    for (std::size_t k = 0; k < out.cols(); ++k) out.at(t, k) += b[k];
  return out;
}

std::vector<int> LinearProbe::predict_frames(const Tensor& features) const {
  const Tensor l = logits(features);
  std::vector<int> out(l.rows());
  for (std::size_t t = 0; t < l.rows(); ++t) {
    const auto r = l.row_span(t);
    out[t] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

LinearProbe train_frame_classifier(const std::vector<Tensor>& features, const std::vector<std::vector<int>>& labels,
                                   std::size_t n_classes, const ProbeConfig& cfg, ProbeTrace* trace) {
  cfg.validate();
  check_inputs(features, labels.size());
  if (n_classes < 1) throw ContractError("need at least one class");
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (labels[i].size() != features[i].rows()) throw ContractError("one frame label per feature row required");
    for (int l : labels[i]) {
      if (l < 0 || static_cast<std::size_t>(l) >= n_classes) {
        throw ContractError("frame label " + std::to_string(l) + " outside [0, " + std::to_string(n_classes) + ")");
      }
    }
  }
  Rng rng(cfg.seed);
  const detail::HoldoutSplit split = detail::holdout_split(features.size(), cfg.holdout_fraction, rng);
  const std::size_t f = features.front().cols();

  LinearProbe probe;
  std::vector<Tensor> train_feats;
  for (std::size_t i : split.train) train_feats.push_back(features[i]);
  feature_statistics(train_feats, probe.mean, probe.inv_std);
  probe.w = Tensor({f, n_classes});
  probe.b = Tensor({n_classes});

  auto gather = [&](const std::vector<std::size_t>& utts, Tensor& x, std::vector<int>& y) {
    std::size_t n = 0;
    for (std::size_t i : utts) n += features[i].rows();
    x = Tensor({std::max<std::size_t>(n, 1), f});
    y.clear();
    std::size_t row = 0;
    for (std::size_t i : utts) {
      const Tensor s = standardize(features[i], probe.mean, probe.inv_std);
      std::copy(s.values().begin(), s.values().end(), x.values().begin() + static_cast<std::ptrdiff_t>(row * f));
      row += s.rows();
      y.insert(y.end(), labels[i].begin(), labels[i].end());
    }
  };
  Tensor xtr, xho;
  std::vector<int> ytr, yho;
  gather(split.train, xtr, ytr);
  gather(split.holdout, xho, yho);

  auto mean_ce = [](Binder& p, const Tensor& x, std::span<const int> y) {
    ad::Graph& g = p.graph();
    const ad::Var lp = ad::pick(ad::log_softmax_rows(affine(p, g.constant(x))), y);
    return ad::scale(ad::sum(lp), -1.0 / static_cast<double>(y.size()));
  };
  auto epoch = [&](Rng& r, const auto& step) {
    std::vector<std::size_t> order(ytr.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    r.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.frame_batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.frame_batch);
      Tensor xb({stop - start, f});
      std::vector<int> yb;
      for (std::size_t i = start; i < stop; ++i) {
        const auto src = xtr.row_span(order[i]);
        std::copy(src.begin(), src.end(), xb.row_span(i - start).begin());
        yb.push_back(ytr[order[i]]);
      }
      step([&](Binder& p) { return mean_ce(p, xb, yb); });
    }
  };
  auto holdout = [&](const ParameterSet& params) {
    ad::Graph g;
    Binder p(g, params, false);
    return mean_ce(p, xho, yho).value().item();
  };
  if (trace) trace->holdout_utterances = split.holdout.size();
  return run_optimizer(std::move(probe), cfg, !split.holdout.empty(), rng, epoch, holdout, trace);
}

LinearProbe train_ctc_recognizer(const std::vector<Tensor>& features, const std::vector<std::vector<int>>& phones,
                                 std::size_t n_phones, const ProbeConfig& cfg, ProbeTrace* trace) {
  cfg.validate();
  check_inputs(features, phones.size());
  const LabelAlphabet alphabet{n_phones};
  std::vector<std::vector<int>> targets(phones.size());
  for (std::size_t i = 0; i < phones.size(); ++i)
    for (int p : phones[i]) targets[i].push_back(alphabet.to_ctc(p));

  Rng rng(cfg.seed);
  const detail::HoldoutSplit split = detail::holdout_split(features.size(), cfg.holdout_fraction, rng);
  const std::size_t f = features.front().cols(), k = alphabet.size();

  LinearProbe probe;
  std::vector<Tensor> train_feats;
  for (std::size_t i : split.train) train_feats.push_back(features[i]);
  feature_statistics(train_feats, probe.mean, probe.inv_std);
  probe.w = Tensor({f, k});
  probe.b = Tensor({k});
  std::vector<Tensor> xs(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) xs[i] = standardize(features[i], probe.mean, probe.inv_std);

  auto utt_loss = [&](Binder& p, std::size_t i) {
    return ctc_loss(affine(p, p.graph().constant(xs[i])), targets[i]);
  };
  auto epoch = [&](Rng& r, const auto& step) {
    std::vector<std::size_t> order = split.train;
    r.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.ctc_batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.ctc_batch);
      step([&](Binder& p) {
        ad::Var total = utt_loss(p, order[start]);
        for (std::size_t i = start + 1; i < stop; ++i) total = ad::add(total, utt_loss(p, order[i]));
        return ad::scale(total, 1.0 / static_cast<double>(stop - start));
      });
    }
  };
  auto holdout = [&](const ParameterSet& params) {
    ad::Graph g;
    Binder p(g, params, false);
    double s = 0.0;
    for (std::size_t i : split.holdout) s += utt_loss(p, i).value().item();
    return s / static_cast<double>(split.holdout.size());
  };
  if (trace) trace->holdout_utterances = split.holdout.size();
  return run_optimizer(std::move(probe), cfg, !split.holdout.empty(), rng, epoch, holdout, trace);
}

double evaluate_fer(const LinearProbe& probe, const std::vector<Tensor>& features,
                    const std::vector<std::vector<int>>& labels) {
  if (features.size() != labels.size()) throw ContractError("evaluate_fer: one label sequence per utterance required");
  std::vector<int> pred, truth;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto p = probe.predict_frames(features[i]);
    if (p.size() != labels[i].size()) throw ContractError("evaluate_fer: label count differs from frame count");
    pred.insert(pred.end(), p.begin(), p.end());
    truth.insert(truth.end(), labels[i].begin(), labels[i].end());
  }
  return frame_error_rate(pred, truth);
}

std::vector<int> decode_phones(const LinearProbe& probe, const Tensor& features) {
  std::vector<int> out;
  for (int c : ctc_greedy_decode(probe.logits(features))) out.push_back(c - 1);
  return out;
}

double evaluate_per(const LinearProbe& probe, const std::vector<Tensor>& features,
                    const std::vector<std::vector<int>>& phones) {
  if (features.size() != phones.size()) throw ContractError("evaluate_per: one phone sequence per utterance required");
  std::size_t edits = 0, ref = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    edits += edit_distance(decode_phones(probe, features[i]), phones[i]);
    ref += phones[i].size();
  }
  if (ref == 0) throw ContractError("evaluate_per: empty references");
  return static_cast<double>(edits) / static_cast<double>(ref);
}

}  // namespace cdmm
