#include "xcls/mlp.hpp"

#include <cmath>
#include <random>

namespace xcls {

std::vector<std::size_t> MlpConfig::layer_sizes() const {
  std::vector<std::size_t> sizes;
  sizes.push_back(input_dim);
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(output_dim);
  return sizes;
}

std::vector<DenseMatrix*> MlpParams::tensors() {
  std::vector<DenseMatrix*> t;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    t.push_back(&weights[l]);
    t.push_back(&biases[l]);
  }
  return t;
}

std::vector<const DenseMatrix*> MlpParams::tensors() const {
  std::vector<const DenseMatrix*> t;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    t.push_back(&weights[l]);
    t.push_back(&biases[l]);
  }
  return t;
}

MlpParams mlp_init(const MlpConfig& cfg, std::uint64_t seed) {
  const auto sizes = cfg.layer_sizes();
  if (sizes.size() < 2) throw InvalidArgument("mlp_init: need at least input and output dims");
  std::mt19937_64 rng(seed);
  MlpParams p;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::size_t in = sizes[l];
    const std::size_t out = sizes[l + 1];
    if (in == 0 || out == 0) throw InvalidArgument("mlp_init: zero layer size");
    const float bound = std::sqrt(6.0f / static_cast<float>(in + out));
    std::uniform_real_distribution<float> dist(-bound, bound);
    DenseMatrix w(out, in);
    for (float& v : w.data) v = dist(rng);
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(1, out);  // zeros
  }
  return p;
}

DenseMatrix mlp_forward(const MlpParams& params, const DenseMatrix& x, MlpCache* cache) {
  if (params.weights.empty()) throw InvalidArgument("mlp_forward: uninitialized params");
  if (x.cols != params.weights[0].cols)
    throw ShapeMismatch("mlp_forward: input dim disagrees with first layer");
  if (cache) {
    cache->input = &x;
    cache->activations.clear();
  }
  const DenseMatrix* cur = &x;
  DenseMatrix tmp;
  const std::size_t n_layers = params.weights.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    DenseMatrix z = matmul(*cur, params.weights[l], /*transpose_b=*/true);
    const std::span<const float> b = params.biases[l].row(0);
    for (std::size_t i = 0; i < z.rows; ++i) {
      float* zrow = z.data.data() + i * z.cols;
      for (std::size_t j = 0; j < z.cols; ++j) zrow[j] += b[j];
    }
    if (l + 1 < n_layers) {
      for (float& v : z.data) v = std::tanh(v);
      if (cache) {
        cache->activations.push_back(std::move(z));
        cur = &cache->activations.back();
      } else {
        tmp = std::move(z);
        cur = &tmp;
      }
    } else {
      return z;
    }
  }
  throw Error("mlp_forward: unreachable");
}

MlpGrads mlp_zero_grads(const MlpParams& params) {
  MlpGrads g;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    g.weights.push_back(zeros_like(params.weights[l]));
    g.biases.push_back(zeros_like(params.biases[l]));
  }
  return g;
}

std::vector<DenseMatrix*> MlpGrads::tensors() {
  std::vector<DenseMatrix*> t;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    t.push_back(&weights[l]);
    t.push_back(&biases[l]);
  }
  return t;
}

void MlpGrads::add_scaled(const MlpGrads& other, float alpha) {
  if (weights.size() != other.weights.size())
    throw ShapeMismatch("MlpGrads::add_scaled: layer count mismatch");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    axpy(weights[l], alpha, other.weights[l]);
    axpy(biases[l], alpha, other.biases[l]);
  }
}

MlpGrads mlp_backward(const MlpParams& params, const MlpCache& cache,
                      const DenseMatrix& grad_features) {
  const std::size_t n_layers = params.weights.size();
  if (!cache.input) throw InvalidArgument("mlp_backward: cache missing (run forward first)");
  if (cache.activations.size() + 1 != n_layers)
    throw ShapeMismatch("mlp_backward: cache does not match layer count");

  MlpGrads grads = mlp_zero_grads(params);
  DenseMatrix upstream = grad_features;  // dL/dz for the current layer output
  for (std::size_t l = n_layers; l-- > 0;) {
    const DenseMatrix& layer_in = (l == 0) ? *cache.input : cache.activations[l - 1];
    if (upstream.rows != layer_in.rows || upstream.cols != params.weights[l].rows)
      throw ShapeMismatch("mlp_backward: upstream shape mismatch");
    grads.weights[l] = matmul_at(upstream, layer_in);
    // bias grad: column sums of upstream, row-ascending order
    float* bg = grads.biases[l].data.data();
    for (std::size_t i = 0; i < upstream.rows; ++i) {
      const float* u = upstream.data.data() + i * upstream.cols;
      for (std::size_t j = 0; j < upstream.cols; ++j) bg[j] += u[j];
    }
    if (l > 0) {
      DenseMatrix grad_in = matmul(upstream, params.weights[l]);
      // through tanh: dz = da * (1 - a^2)
      const DenseMatrix& act = cache.activations[l - 1];
      for (std::size_t i = 0; i < grad_in.data.size(); ++i) {
        const float a = act.data[i];
        grad_in.data[i] *= (1.0f - a * a);
      }
      upstream = std::move(grad_in);
    }
  }
  return grads;
}

}  // namespace xcls
