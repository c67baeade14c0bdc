#include "xcls/matrix.hpp"

#include <cmath>
#include <string>

namespace xcls {

DenseMatrix l2_normalize_rows(const DenseMatrix& m, float epsilon) {
  return l2_normalize_rows_cached(m, epsilon).normalized;
}

RowNormalized l2_normalize_rows_cached(const DenseMatrix& m, float epsilon) {
  if (m.rows == 0 || m.cols == 0) throw ShapeMismatch("l2_normalize_rows: empty matrix");
  RowNormalized out;
  out.normalized = DenseMatrix(m.rows, m.cols);
  out.norms.resize(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const float* src = m.data.data() + i * m.cols;
    double sq = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) sq += static_cast<double>(src[j]) * src[j];
    const float norm = static_cast<float>(std::sqrt(sq));
    if (norm < epsilon) throw ZeroNormRow(i);
    out.norms[i] = norm;
    float* dst = out.normalized.data.data() + i * m.cols;
    const float inv = 1.0f / norm;
    for (std::size_t j = 0; j < m.cols; ++j) dst[j] = src[j] * inv;
  }
  return out;
}

DenseMatrix l2_normalize_backward(const DenseMatrix& normalized,
                                  const std::vector<float>& norms,
                                  const DenseMatrix& grad_normalized) {
  if (!normalized.same_shape(grad_normalized) || norms.size() != normalized.rows)
    throw ShapeMismatch("l2_normalize_backward: shape mismatch");
  DenseMatrix grad(normalized.rows, normalized.cols);
  for (std::size_t i = 0; i < normalized.rows; ++i) {
    const float* nh = normalized.data.data() + i * normalized.cols;
    const float* g = grad_normalized.data.data() + i * normalized.cols;
    double dot = 0.0;
    for (std::size_t j = 0; j < normalized.cols; ++j) dot += static_cast<double>(g[j]) * nh[j];
    const float d = static_cast<float>(dot);
    const float inv = 1.0f / norms[i];
    float* out = grad.data.data() + i * normalized.cols;
    for (std::size_t j = 0; j < normalized.cols; ++j) out[j] = (g[j] - d * nh[j]) * inv;
  }
  return grad;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b, bool transpose_b) {
  const std::size_t inner = transpose_b ? b.cols : b.rows;
  const std::size_t out_cols = transpose_b ? b.rows : b.cols;
  if (a.cols != inner)
    throw ShapeMismatch("matmul: inner dimensions disagree (" + std::to_string(a.cols) +
                        " vs " + std::to_string(inner) + ")");
  DenseMatrix c(a.rows, out_cols);
  if (transpose_b) {
    // c[i][j] = dot(a.row(i), b.row(j)), k ascending.
    for (std::size_t i = 0; i < a.rows; ++i) {
      const float* ai = a.data.data() + i * a.cols;
      float* ci = c.data.data() + i * out_cols;
      for (std::size_t j = 0; j < out_cols; ++j) {
        const float* bj = b.data.data() + j * b.cols;
        float acc = 0.0f;
        for (std::size_t k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
        ci[j] = acc;
      }
    }
  } else {
    // ikj: each c[i][j] accumulates a[i][k]*b[k][j] in ascending k.
    for (std::size_t i = 0; i < a.rows; ++i) {
      const float* ai = a.data.data() + i * a.cols;
      float* ci = c.data.data() + i * out_cols;
      for (std::size_t k = 0; k < a.cols; ++k) {
        const float aik = ai[k];
        const float* bk = b.data.data() + k * b.cols;
        for (std::size_t j = 0; j < out_cols; ++j) ci[j] += aik * bk[j];
      }
    }
  }
  return c;
}

DenseMatrix matmul_at(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows != b.rows) throw ShapeMismatch("matmul_at: row counts disagree");
  DenseMatrix c(a.cols, b.cols);
  // c[j][l] = sum_i a[i][j]*b[i][l], i ascending for every output element.
  for (std::size_t i = 0; i < a.rows; ++i) {
    const float* ai = a.data.data() + i * a.cols;
    const float* bi = b.data.data() + i * b.cols;
    for (std::size_t j = 0; j < a.cols; ++j) {
      const float aij = ai[j];
      float* cj = c.data.data() + j * b.cols;
      for (std::size_t l = 0; l < b.cols; ++l) cj[l] += aij * bi[l];
    }
  }
  return c;
}

void axpy(DenseMatrix& v, float alpha, const DenseMatrix& w) {
  if (!v.same_shape(w)) throw ShapeMismatch("axpy: shape mismatch");
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] += alpha * w.data[i];
}

DenseMatrix zeros_like(const DenseMatrix& m) { return DenseMatrix(m.rows, m.cols); }

double frobenius_norm(const DenseMatrix& m) {
  double sq = 0.0;
  for (float v : m.data) sq += static_cast<double>(v) * v;
  return std::sqrt(sq);
}

bool all_finite(const DenseMatrix& m) {
  for (float v : m.data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace xcls
