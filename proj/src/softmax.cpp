#include "xcls/softmax.hpp"

#include <cmath>
#include <string>

namespace xcls {

LossAndGrad softmax_xent(const DenseMatrix& logits, std::span<const std::uint32_t> labels) {
  const std::size_t m = logits.rows;
  const std::size_t c = logits.cols;
  if (labels.size() != m) throw ShapeMismatch("softmax_xent: one label per row required");
  for (std::size_t i = 0; i < m; ++i)
    if (labels[i] >= c)
      throw LabelOutOfRange("softmax_xent: label " + std::to_string(labels[i]) +
                            " out of range [0, " + std::to_string(c) + ")");

  LossAndGrad out;
  out.grad_logits = DenseMatrix(m, c);
  const float inv_m = 1.0f / static_cast<float>(m);
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = logits.data.data() + i * c;
    float* grow = out.grad_logits.data.data() + i * c;
    float maxv = row[0];
    for (std::size_t j = 1; j < c; ++j) maxv = std::max(maxv, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const float e = std::exp(row[j] - maxv);
      grow[j] = e;  // stash exp, scaled below
      denom += e;
    }
    const float inv_denom = static_cast<float>(1.0 / denom);
    for (std::size_t j = 0; j < c; ++j) grow[j] = grow[j] * inv_denom * inv_m;
    grow[labels[i]] -= inv_m;
    loss_sum += std::log(denom) - static_cast<double>(row[labels[i]] - maxv);
  }
  out.loss = loss_sum / static_cast<double>(m);
  return out;
}

FcResult fc_forward_backward(const DenseMatrix& x, const DenseMatrix& w,
                             const DenseMatrix& upstream) {
  if (x.cols != w.cols) throw ShapeMismatch("fc_forward_backward: feature dims disagree");
  if (upstream.rows != x.rows || upstream.cols != w.rows)
    throw ShapeMismatch("fc_forward_backward: upstream shape must be m x C");
  FcResult r;
  r.logits = matmul(x, w, /*transpose_b=*/true);
  r.grad_x = matmul(upstream, w);
  r.grad_w = matmul_at(upstream, x);
  return r;
}

}  // namespace xcls
