#pragma once

#include <vector>

#include "diffseg/autodiff.hpp"
#include "diffseg/common.hpp"
#include "diffseg/nn_ops.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

// Unsupervised-loss weight, ramped linearly from 0 to lambda_max over the
// training epochs.
inline double lambda_at(int current_epoch, int max_epochs, double lambda_max) {
  require(max_epochs >= 1, "lambda_at: max_epochs must be positive");
  require(current_epoch >= 0 && current_epoch <= max_epochs,
          "lambda_at: epoch outside [0, max_epochs]");
  return lambda_max * static_cast<double>(current_epoch) / max_epochs;
}

struct LossWeights {
  double lambda_max = 5.0;
  double lambda = 0.0;   // current ramped value
  int rounds = 5;        // R, diffusion rounds

  void validate() const {
    require(lambda_max >= 0.0, "loss weights: lambda_max must be >= 0");
    require(lambda >= 0.0 && lambda <= lambda_max,
            "loss weights: lambda must be in [0, lambda_max]");
    require(rounds >= 1, "loss weights: rounds must be >= 1");
  }
};

struct BatchLossBreakdown {
  double sup = 0.0;
  double semi = 0.0;
  std::vector<double> align;     // length R
  std::vector<double> reconstr;  // length R
  double total = 0.0;
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double acc = 0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

// Combined objective: sup + lambda*(semi + mean(align) + mean(reconstr)) when
// labeled, the lambda-weighted part alone otherwise. A single lambda weights
// all unsupervised terms.
inline double total_loss(bool labeled, const BatchLossBreakdown& parts,
                         const LossWeights& w) {
  w.validate();
  if (!parts.align.empty() || !parts.reconstr.empty())
    require(parts.align.size() == parts.reconstr.size() &&
                static_cast<int>(parts.align.size()) == w.rounds,
            "total_loss: align/reconstr arrays must have length R");
  double unsup = w.lambda * (parts.semi + mean_of(parts.align) + mean_of(parts.reconstr));
  return labeled ? parts.sup + unsup : unsup;
}

// ---------------------------------------------------------------------------
// Graph-level losses
// ---------------------------------------------------------------------------

// Cross pseudo-supervision: each network is supervised by the hard argmax of
// the other; the argmax targets carry no gradient. Per-sample values.
template <typename T>
Value<T> cps_loss_per_sample(const Value<T>& student_logits,
                             const Value<T>& teacher_logits) {
  require(student_logits.val().same_shape(teacher_logits.val()),
          "cps_loss: logit shapes differ");
  auto teacher_targets = argmax_channels(teacher_logits.val());
  auto student_targets = argmax_channels(student_logits.val());
  return add(ce_per_sample(student_logits, teacher_targets),
             ce_per_sample(teacher_logits, student_targets));
}

template <typename T>
Value<T> cps_loss_graph(const Value<T>& student_logits, const Value<T>& teacher_logits) {
  return diffseg::mean_of(cps_loss_per_sample(student_logits, teacher_logits));
}

// Mean-reduced scalar convenience.
template <typename T>
double cps_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits) {
  return cps_loss_graph(Value<T>::constant(student_logits),
                        Value<T>::constant(teacher_logits))
      .scalar();
}

// Supervised loss: cross-entropy of both models against the ground truth.
template <typename T>
Value<T> supervised_loss_per_sample(const Value<T>& teacher_logits,
                                    const Value<T>& student_logits,
                                    const Tensor<int32_t>& label) {
  require(teacher_logits.val().same_shape(student_logits.val()),
          "supervised_loss: logit shapes differ");
  return add(ce_per_sample(teacher_logits, label), ce_per_sample(student_logits, label));
}

template <typename T>
Value<T> supervised_loss_graph(const Value<T>& teacher_logits,
                               const Value<T>& student_logits,
                               const Tensor<int32_t>& label) {
  return diffseg::mean_of(supervised_loss_per_sample(teacher_logits, student_logits, label));
}

template <typename T>
double supervised_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                       const Tensor<int32_t>& label) {
  return supervised_loss_graph(Value<T>::constant(teacher_logits),
                               Value<T>::constant(student_logits), label)
      .scalar();
}

}  // namespace diffseg
