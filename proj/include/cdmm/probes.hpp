#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cdmm/autodiff.hpp"
#include "cdmm/tensor.hpp"

namespace cdmm {

// CTC label space: index 0 is the blank, phone p maps to p + 1.
struct LabelAlphabet {
  std::size_t n_phones = 0;
  static constexpr int kBlank = 0;

  std::size_t size() const { return n_phones + 1; }
  int to_ctc(int phone) const;
  int to_phone(int ctc) const;
};

// Negative log-likelihood of `labels` (CTC indices, no blanks) under per-frame
// logits[T×K], summed over blank-augmented monotonic alignments. Throws
// ContractError when no alignment of length T exists.
double ctc_loss(const Tensor& logits, std::span<const int> labels);
// Differentiable version; the backward pass is softmax minus state occupancy.
ad::Var ctc_loss(ad::Var logits, std::span<const int> labels);
// Shortest T that can emit `labels`: |y| plus one blank between each equal pair.
std::size_t ctc_min_frames(std::span<const int> labels);

// Framewise argmax, collapse adjacent repeats, drop blanks.
std::vector<int> ctc_greedy_decode(const Tensor& logits);

double frame_error_rate(std::span<const int> predicted, std::span<const int> truth);
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);
double phone_error_rate(std::span<const int> hyp, std::span<const int> ref);

// Single affine map applied to standardized features.
struct LinearProbe {
  Tensor mean;     // [F]
  Tensor inv_std;  // [F]
  Tensor w;        // [F×K]
  Tensor b;        // [K]

  std::size_t feature_dim() const { return w.rows(); }
  std::size_t n_outputs() const { return w.cols(); }
  Tensor logits(const Tensor& features) const;
  std::vector<int> predict_frames(const Tensor& features) const;
};

struct ProbeConfig {
  double lr = 1e-3;
  std::size_t max_epochs = 50;
  std::size_t frame_batch = 64;  // frames per step for the frame classifier
  std::size_t ctc_batch = 1;     // utterances per step for the CTC recognizer
  double holdout_fraction = 0.1;
  std::size_t patience = 5;      // epochs without held-out improvement before stopping
  std::uint64_t seed = 0;

  void validate() const;
};

struct ProbeTrace {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  std::size_t holdout_utterances = 0;
  std::vector<double> train_loss;
  std::vector<double> holdout_loss;
};

// Cross-entropy softmax classifier over frames. labels[i] has one entry per row of features[i].
LinearProbe train_frame_classifier(const std::vector<Tensor>& features, const std::vector<std::vector<int>>& labels,
                                   std::size_t n_classes, const ProbeConfig& cfg, ProbeTrace* trace = nullptr);
// Linear CTC recognizer; phone ids are mapped through LabelAlphabet.
LinearProbe train_ctc_recognizer(const std::vector<Tensor>& features, const std::vector<std::vector<int>>& phones,
                                 std::size_t n_phones, const ProbeConfig& cfg, ProbeTrace* trace = nullptr);

// Pooled over all frames.
double evaluate_fer(const LinearProbe& probe, const std::vector<Tensor>& features,
                    const std::vector<std::vector<int>>& labels);
// Total edits over total reference length, greedy decoding.
double evaluate_per(const LinearProbe& probe, const std::vector<Tensor>& features,
                    const std::vector<std::vector<int>>& phones);
std::vector<int> decode_phones(const LinearProbe& probe, const Tensor& features);

// Mean and 1/sd per column over every row of every tensor; constant columns get 1/sd = 1.
void feature_statistics(const std::vector<Tensor>& features, Tensor& mean, Tensor& inv_std);

}  // namespace cdmm
