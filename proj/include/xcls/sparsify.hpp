#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "xcls/errors.hpp"

namespace xcls {

/// A layer gradient reduced to its selected entries. Indices are strictly
/// increasing flat positions into the dense tensor.
struct SparseGradient {
  std::uint32_t layer_id = 0;
  std::vector<std::uint64_t> indices;
  std::vector<float> values;
  std::uint64_t dense_len = 0;
};

/// Exact top-k by absolute value (ties to the lower index), selected by
/// splitting the tensor into chunks, taking each chunk's top-k, then a
/// second top-k over the candidates. Identical to full-sort selection for
/// every chunk count. Results are in selection order (largest magnitude
/// first).
struct TopkResult {
  std::vector<std::uint64_t> indices;
  std::vector<float> values;
};
TopkResult topk_divide_conquer(std::span<const float> t, std::size_t k, std::size_t m_chunks);

/// Default chunk count for a tensor of length `len`.
std::size_t default_chunks(std::size_t len);

/// Partition of layers into batches of similar length for grouped selection.
struct TensorGroup {
  std::vector<std::uint32_t> layer_ids;
};

/// Groups layers whose lengths are within `max_ratio` of the group minimum.
/// Grouping only changes batching, never selection results.
std::vector<TensorGroup> group_tensors(
    std::span<const std::pair<std::uint32_t, std::size_t>> layers, double max_ratio = 2.0);

/// Per-layer momentum-corrected top-k compression with residual accumulation
/// and momentum factor masking.
class CompressionState {
 public:
  CompressionState(double sparsity_ratio, float momentum);

  double sparsity_ratio() const { return sparsity_ratio_; }
  void set_sparsity_ratio(double r);
  float momentum() const { return momentum_; }

  /// velocity <- momentum*velocity + grad; residual <- residual + velocity;
  /// emit top-k of the residual with k = ceil((1 - sparsity)*len), then zero
  /// the residual and the velocity at the emitted positions.
  SparseGradient compress_step(std::uint32_t layer_id, std::span<const float> grad,
                               std::size_t m_chunks = 0);

  /// Residual buffer of a layer (zeros until first compressed).
  std::span<const float> residual(std::uint32_t layer_id) const;
  std::span<const float> velocity(std::uint32_t layer_id) const;

 private:
  struct LayerState {
    std::vector<float> velocity;
    std::vector<float> residual;
  };
  LayerState& layer(std::uint32_t layer_id, std::size_t len);

  double sparsity_ratio_;
  float momentum_;
  std::unordered_map<std::uint32_t, LayerState> layers_;
};

/// Number of entries emitted per step for a layer of length `len`.
std::size_t selected_count(double sparsity_ratio, std::size_t len);

/// Dense tensor with zeros everywhere but the listed entries.
std::vector<float> densify(const SparseGradient& s);

/// Wire format used by the simulator: layer_id u32, dense_len u64, count
/// u64, then count x (u64 index, f32 value), little-endian.
std::vector<std::uint8_t> encode_sparse(const SparseGradient& s);
SparseGradient decode_sparse(std::span<const std::uint8_t> bytes);
std::size_t wire_size(const SparseGradient& s);

}  // namespace xcls
