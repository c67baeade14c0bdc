#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "xcls/knn_graph.hpp"
#include "xcls/matrix.hpp"
#include "xcls/softmax.hpp"

namespace xcls {

/// The classes participating in one mini-batch's softmax.
struct ActiveSet {
  std::vector<std::uint32_t> class_indices;  // sorted, unique
  bool contains_all_labels = false;

  std::size_t size() const { return class_indices.size(); }
  /// Position of `cls` within the active subspace, if present.
  std::optional<std::size_t> position_of(std::uint32_t cls) const;
};

ActiveSet full_active_set(std::size_t n_total);

struct SelectionConfig {
  std::size_t m_active = 0;     // M: total active classes per mini-batch
  std::uint64_t rng_seed = 0;   // seeds the padding draw, recorded in run metadata
};

/// Graph-based active-class selection. Pools every batch label's neighbor
/// list, deduplicates, then pads with seeded uniform draws from the
/// complement when the pool is short of M, or keeps the M best-ranked
/// candidates when it is over-full. Batch labels are always retained.
/// Rank of a candidate = its best position across the consulted lists,
/// ties broken by higher occurrence count, then lower class index.
ActiveSet select_active_classes(const KnnGraph& g, std::span<const std::uint32_t> labels,
                                const SelectionConfig& cfg, std::size_t n_total);

/// Same selection driven by per-shard compressed graphs: the pool is the
/// union of every shard's pruned slices (lossless), with ranks taken within
/// each slice. Degenerates to the full-graph selection when there is one
/// shard.
ActiveSet select_active_classes(std::span<const CompressedKnnGraph> shards,
                                std::span<const std::uint32_t> labels,
                                const SelectionConfig& cfg, std::size_t n_total);

/// Softmax cross-entropy restricted to the active classes.
/// logits = scale * x_norm * w_norm[active]^T; labels are remapped into the
/// active subspace. grad_features is w.r.t. x_norm, grad_weights is a full
/// N x D matrix that is exactly zero outside the active rows.
LossAndGrad knn_softmax_forward_backward(const DenseMatrix& x_norm, const DenseMatrix& w_norm,
                                         std::span<const std::uint32_t> labels,
                                         const ActiveSet& active, float scale);

/// The full-softmax baseline: the same code path with every class active.
LossAndGrad full_softmax_forward_backward(const DenseMatrix& x_norm, const DenseMatrix& w_norm,
                                          std::span<const std::uint32_t> labels, float scale);

}  // namespace xcls
