#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xcls/matrix.hpp"

namespace xcls {

/// Exact k-nearest-neighbor graph over normalized class weights, ordered by
/// descending inner product. Each class's own index is always ranked first;
/// remaining ties break toward the lower class index.
struct KnnGraph {
  std::size_t num_classes = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> flat;  // num_classes * k, row-major

  std::span<const std::uint32_t> neighbors(std::size_t cls) const {
    return {flat.data() + cls * k, k};
  }
  bool operator==(const KnnGraph& o) const {
    return num_classes == o.num_classes && k == o.k && flat == o.flat;
  }
};

/// Contiguous-block partition of the class space across shards; block sizes
/// differ by at most one (first `num_classes % num_shards` blocks are larger).
struct ShardLayout {
  std::size_t num_classes = 0;
  std::size_t num_shards = 1;

  std::size_t shard_of(std::size_t cls) const;
  /// Owned classes of `shard` as [begin, end).
  std::pair<std::size_t, std::size_t> class_range(std::size_t shard) const;
  std::size_t shard_size(std::size_t shard) const {
    auto [b, e] = class_range(shard);
    return e - b;
  }
};

/// Per-shard pruned view of a KnnGraph: for every class (all N of them) only
/// the neighbors owned by this shard are retained, concatenated flat, with
/// exclusive prefix offsets for constant-time access by label.
struct CompressedKnnGraph {
  std::size_t num_classes = 0;
  std::size_t shard = 0;
  std::vector<std::uint32_t> shard_classes;   // classes owned by this shard, sorted
  std::vector<std::uint32_t> k_per_class;     // length num_classes
  std::vector<std::uint64_t> offsets;         // length num_classes, offsets[0] == 0
  std::vector<std::uint32_t> flat_neighbors;  // length sum(k_per_class)

  std::span<const std::uint32_t> slice(std::uint32_t label) const;
};

/// Exact top-k per class by linear search over inner products.
/// Rows of w_norm must be unit norm for the self-first invariant to be the
/// true ordering; the builder enforces self-first regardless.
KnnGraph build_graph_bruteforce(const DenseMatrix& w_norm, std::size_t k);

/// Counters recorded while building on the simulated ring.
struct RingBuildStats {
  /// Peak of (candidate entries held across owned classes) + (floats of the
  /// weight block currently held), maximized over all ring steps.
  std::size_t peak_candidate_entries = 0;
  std::size_t transfer_steps = 0;
};

/// Ring-distributed exact build: each shard holds one weight block at a time,
/// passes it around the ring (P-1 transfers), keeps a running k'-candidate
/// list per owned class, then refines the k' candidates down to the final k.
/// Identical output to build_graph_bruteforce on the concatenated blocks.
KnnGraph build_graph_ring(const std::vector<DenseMatrix>& w_shards, std::size_t k,
                          std::size_t kprime, RingBuildStats* stats = nullptr,
                          bool threaded = true);

/// Prunes `g` to the neighbors owned by `shard` under `layout`.
CompressedKnnGraph compress_graph(const KnnGraph& g, const ShardLayout& layout,
                                  std::size_t shard);

/// O(1) offset lookup per label; returns one pruned-neighbor slice per label.
std::vector<std::span<const std::uint32_t>> quick_access(
    const CompressedKnnGraph& cg, std::span<const std::uint32_t> labels);

/// Binary graph cache: magic "XKNN", version u32, N u64, then per class a
/// u32 k value followed by that many u32 neighbor indices. Little-endian.
void save_graph(const KnnGraph& g, const std::string& path);
KnnGraph load_graph(const std::string& path);

/// Splits the rows of `w` into contiguous per-shard blocks under `layout`.
std::vector<DenseMatrix> split_rows(const DenseMatrix& w, const ShardLayout& layout);

}  // namespace xcls
