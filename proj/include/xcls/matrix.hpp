#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "xcls/errors.hpp"

namespace xcls {

/// Row-major single-precision 2-D array. The backbone of all numerics here.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;  // length rows*cols

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
  DenseMatrix(std::size_t r, std::size_t c, std::vector<float> d)
      : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols) throw ShapeMismatch("matrix data length != rows*cols");
  }

  float& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  float at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const DenseMatrix& o) const { return rows == o.rows && cols == o.cols; }

  bool operator==(const DenseMatrix& o) const {
    return rows == o.rows && cols == o.cols && data == o.data;
  }
};

/// Copy of `m` with each row scaled to unit Euclidean norm.
/// Throws ZeroNormRow if any row norm falls below `epsilon`.
DenseMatrix l2_normalize_rows(const DenseMatrix& m, float epsilon = 1e-12f);

/// Normalization plus the per-row norms, kept for the backward pass.
struct RowNormalized {
  DenseMatrix normalized;
  std::vector<float> norms;
};
RowNormalized l2_normalize_rows_cached(const DenseMatrix& m, float epsilon = 1e-12f);

/// Gradient of row normalization: given x_hat = x/|x| and g = dL/dx_hat,
/// dL/dx = (g - (g.x_hat) x_hat) / |x|, row by row.
DenseMatrix l2_normalize_backward(const DenseMatrix& normalized,
                                  const std::vector<float>& norms,
                                  const DenseMatrix& grad_normalized);

/// a*b (or a*b^T). Fixed summation order (ascending inner index) so results
/// are reproducible across runs and across distributed-vs-local comparisons.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b, bool transpose_b = false);

/// a^T*b with the same fixed-order guarantee. Used for weight gradients.
DenseMatrix matmul_at(const DenseMatrix& a, const DenseMatrix& b);

/// v += alpha*w elementwise; shapes must agree.
void axpy(DenseMatrix& v, float alpha, const DenseMatrix& w);

DenseMatrix zeros_like(const DenseMatrix& m);

/// Frobenius norm, accumulated in double.
double frobenius_norm(const DenseMatrix& m);

bool all_finite(const DenseMatrix& m);

}  // namespace xcls
