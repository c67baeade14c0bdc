#pragma once

#include <cstdint>
#include <vector>

#include "xcls/matrix.hpp"

namespace xcls {

/// Small multi-layer perceptron used as the feature extractor: linear layers
/// with tanh between them (none after the last). An empty hidden list makes
/// it a single linear map.
struct MlpConfig {
  std::size_t input_dim = 64;
  std::vector<std::size_t> hidden = {256};
  std::size_t output_dim = 64;

  std::vector<std::size_t> layer_sizes() const;
};

struct MlpParams {
  std::vector<DenseMatrix> weights;  // layer l: out_l x in_l
  std::vector<DenseMatrix> biases;   // layer l: 1 x out_l

  std::size_t num_layers() const { return weights.size(); }
  /// Flat list of parameter tensors, weights then biases per layer; the
  /// layer_id order used by the optimizer and the sparsifier.
  std::vector<DenseMatrix*> tensors();
  std::vector<const DenseMatrix*> tensors() const;
};

/// Seeded uniform init scaled by fan-in.
MlpParams mlp_init(const MlpConfig& cfg, std::uint64_t seed);

struct MlpCache {
  const DenseMatrix* input = nullptr;
  std::vector<DenseMatrix> activations;  // post-nonlinearity per hidden layer
};

/// Deterministic forward pass; fills `cache` for the backward pass when given.
DenseMatrix mlp_forward(const MlpParams& params, const DenseMatrix& x, MlpCache* cache = nullptr);

struct MlpGrads {
  std::vector<DenseMatrix> weights;
  std::vector<DenseMatrix> biases;

  std::vector<DenseMatrix*> tensors();
  void add_scaled(const MlpGrads& other, float alpha);
};

MlpGrads mlp_zero_grads(const MlpParams& params);

/// Backpropagates grad_features through the cached forward pass.
MlpGrads mlp_backward(const MlpParams& params, const MlpCache& cache,
                      const DenseMatrix& grad_features);

}  // namespace xcls
