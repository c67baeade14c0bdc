#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xcls/matrix.hpp"

namespace xcls {

/// A mini-batch of features with integer class labels.
struct LabeledBatch {
  DenseMatrix features;             // m x D
  std::vector<std::uint32_t> labels;  // length m, values in [0, N)
};

/// Loss plus whichever gradients the producing operation fills in.
struct LossAndGrad {
  double loss = 0.0;          // mean over the batch
  DenseMatrix grad_logits;    // same shape as logits
  DenseMatrix grad_features;  // same shape as x
  DenseMatrix grad_weights;   // same shape as w
};

/// Numerically stable softmax cross-entropy, mean-reduced over the batch.
/// grad_logits_i = (softmax(logits_i) - onehot(label_i)) / m.
/// Row max is subtracted before exponentiation; the exp-sum and the loss
/// mean are accumulated in double so distributed regroupings stay within
/// tight tolerances of this reference.
LossAndGrad softmax_xent(const DenseMatrix& logits, std::span<const std::uint32_t> labels);

struct FcResult {
  DenseMatrix logits;  // x * w^T
  DenseMatrix grad_x;  // upstream * w
  DenseMatrix grad_w;  // upstream^T * x
};

/// Final fully connected layer: forward and both gradients in one call.
FcResult fc_forward_backward(const DenseMatrix& x, const DenseMatrix& w,
                             const DenseMatrix& upstream);

}  // namespace xcls
