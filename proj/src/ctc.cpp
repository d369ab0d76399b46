#include <algorithm>
#include <cmath>
#include <limits>

#include "cdmm/error.hpp"
#include "cdmm/probes.hpp"

namespace cdmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

struct CtcResult {
  double nll;
  Tensor grad;  // d nll / d logits
};

Tensor log_softmax(const Tensor& logits) {
  Tensor out(logits.shape());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const auto r = logits.row_span(t);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double z = mx + std::log(s);
    for (std::size_t k = 0; k < r.size(); ++k) out.at(t, k) = r[k] - z;
  }
  return out;
}

CtcResult ctc_forward_backward(const Tensor& logits, std::span<const int> labels, bool want_grad) {
  if (logits.rank() != 2) throw DimensionError("ctc_loss expects logits[T×K]");
  const std::size_t t_len = logits.rows(), k = logits.cols();
  for (int l : labels) {
    if (l <= LabelAlphabet::kBlank || static_cast<std::size_t>(l) >= k) {
      throw ContractError("ctc label " + std::to_string(l) + " outside [1, " + std::to_string(k) + ")");
    }
  }
  if (t_len < ctc_min_frames(labels)) {
    throw ContractError("ctc: " + std::to_string(t_len) + " frames cannot emit " + std::to_string(labels.size()) +
                        " labels");
  }
  // Extended sequence: blank, l1, blank, l2, ..., blank.
  const std::size_t s_len = 2 * labels.size() + 1;
  std::vector<int> ext(s_len, LabelAlphabet::kBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != LabelAlphabet::kBlank && ext[s] != ext[s - 2]; };

  const Tensor lp = log_softmax(logits);
  std::vector<double> alpha(t_len * s_len, kNegInf);
  alpha[0] = lp.at(0, static_cast<std::size_t>(ext[0]));
  if (s_len > 1) alpha[1] = lp.at(0, static_cast<std::size_t>(ext[1]));
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double a = alpha[(t - 1) * s_len + s];
      if (s >= 1) a = lse(a, alpha[(t - 1) * s_len + s - 1]);
      if (can_skip(s)) a = lse(a, alpha[(t - 1) * s_len + s - 2]);
      alpha[t * s_len + s] = a == kNegInf ? kNegInf : a + lp.at(t, static_cast<std::size_t>(ext[s]));
    }
  }
  double log_z = alpha[(t_len - 1) * s_len + s_len - 1];
  if (s_len > 1) log_z = lse(log_z, alpha[(t_len - 1) * s_len + s_len - 2]);
  if (!std::isfinite(log_z)) throw ContractError("ctc: no alignment has non-zero probability");

  CtcResult out{-log_z, Tensor()};
  if (!want_grad) return out;

  // beta[t][s]: log probability of frames t+1.. given state s at frame t (frame t itself excluded).
  std::vector<double> beta(t_len * s_len, kNegInf);
  beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
  if (s_len > 1) beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
  for (std::size_t t = t_len - 1; t-- > 0;) {
    for (std::size_t s = 0; s < s_len; ++s) {
      auto next = [&](std::size_t s2) {
        return beta[(t + 1) * s_len + s2] + lp.at(t + 1, static_cast<std::size_t>(ext[s2]));
      };
      double b = next(s);
      if (s + 1 < s_len) b = lse(b, next(s + 1));
      if (s + 2 < s_len && can_skip(s + 2)) b = lse(b, next(s + 2));
      beta[t * s_len + s] = b;
    }
  }
  out.grad = Tensor(logits.shape());
  std::vector<double> occ(k);
  for (std::size_t t = 0; t < t_len; ++t) {
    std::fill(occ.begin(), occ.end(), kNegInf);
    for (std::size_t s = 0; s < s_len; ++s) {
      const auto c = static_cast<std::size_t>(ext[s]);
      occ[c] = lse(occ[c], alpha[t * s_len + s] + beta[t * s_len + s]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      out.grad.at(t, c) = std::exp(lp.at(t, c)) - std::exp(occ[c] - log_z);
    }
  }
  return out;
}

}  // namespace

int LabelAlphabet::to_ctc(int phone) const {
  if (phone < 0 || static_cast<std::size_t>(phone) >= n_phones) {
    throw ContractError("phone id " + std::to_string(phone) + " outside [0, " + std::to_string(n_phones) + ")");
  }
  return phone + 1;
}

int LabelAlphabet::to_phone(int ctc) const {
  if (ctc <= kBlank || static_cast<std::size_t>(ctc) > n_phones) throw ContractError("not a phone index");
  return ctc - 1;
}

std::size_t ctc_min_frames(std::span<const int> labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i) n += labels[i] == labels[i - 1];
  return std::max<std::size_t>(n, 1);
}

double ctc_loss(const Tensor& logits, std::span<const int> labels) {
  return ctc_forward_backward(logits, labels, false).nll;
}

ad::Var ctc_loss(ad::Var logits, std::span<const int> labels) {
  CtcResult r = ctc_forward_backward(logits.value(), labels, true);
  Tensor grad = std::move(r.grad);
  return logits.graph().record(Tensor::scalar(r.nll), {logits}, [logits, grad](ad::Graph& g, const Tensor& go) {
    Tensor d = grad;
    const double s = go.item();
    for (double& v : d.values()) v *= s;
    g.accumulate(logits, d);
  });
}

std::vector<int> ctc_greedy_decode(const Tensor& logits) {
  std::vector<int> out;
  int prev = -1;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const auto r = logits.row_span(t);
    const int best = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    if (best != prev && best != LabelAlphabet::kBlank) out.push_back(best);
    prev = best;
  }
  return out;
}

}  // namespace cdmm
