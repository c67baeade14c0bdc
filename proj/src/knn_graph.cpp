#include "xcls/knn_graph.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <thread>

namespace xcls {

namespace {

struct Candidate {
  float score;
  std::uint32_t idx;
};

// Ordering for neighbor lists: self first, then descending score, ties to
// the lower class index.
inline bool better(const Candidate& a, const Candidate& b, std::uint32_t self) {
  const bool a_self = a.idx == self;
  const bool b_self = b.idx == self;
  if (a_self != b_self) return a_self;
  if (a.score != b.score) return a.score > b.score;
  return a.idx < b.idx;
}

// Keeps the k' best candidates of one class, insertion-sorted.
class CandidateList {
 public:
  CandidateList(std::uint32_t self, std::size_t cap) : self_(self), cap_(cap) {
    items_.reserve(cap);
  }

  void offer(Candidate c) {
    if (items_.size() == cap_ && !better(c, items_.back(), self_)) return;
    auto pos = std::lower_bound(items_.begin(), items_.end(), c,
                                [&](const Candidate& a, const Candidate& b) {
                                  return better(a, b, self_);
                                });
    items_.insert(pos, c);
    if (items_.size() > cap_) items_.pop_back();
  }

  std::size_t size() const { return items_.size(); }

  // Refine phase: re-rank the retained candidates and keep the best k.
  std::vector<std::uint32_t> top(std::size_t k) const {
    std::vector<Candidate> sorted(items_);
    std::sort(sorted.begin(), sorted.end(),
              [&](const Candidate& a, const Candidate& b) { return better(a, b, self_); });
    std::vector<std::uint32_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k && i < sorted.size(); ++i) out.push_back(sorted[i].idx);
    return out;
  }

 private:
  std::uint32_t self_;
  std::size_t cap_;
  std::vector<Candidate> items_;
};

void put_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ofstream& f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  f.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::ifstream& f) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) throw IoError("graph file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::ifstream& f) {
  unsigned char b[8];
  if (!f.read(reinterpret_cast<char*>(b), 8)) throw IoError("graph file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

std::size_t ShardLayout::shard_of(std::size_t cls) const {
  const std::size_t base = num_classes / num_shards;
  const std::size_t rem = num_classes % num_shards;
  const std::size_t big = rem * (base + 1);
  if (cls < big) return cls / (base + 1);
  return rem + (cls - big) / base;
}

std::pair<std::size_t, std::size_t> ShardLayout::class_range(std::size_t shard) const {
  if (shard >= num_shards) throw InvalidArgument("ShardLayout: shard index out of range");
  const std::size_t base = num_classes / num_shards;
  const std::size_t rem = num_classes % num_shards;
  std::size_t begin, end;
  if (shard < rem) {
    begin = shard * (base + 1);
    end = begin + base + 1;
  } else {
    begin = rem * (base + 1) + (shard - rem) * base;
    end = begin + base;
  }
  return {begin, end};
}

std::span<const std::uint32_t> CompressedKnnGraph::slice(std::uint32_t label) const {
  if (label >= num_classes)
    throw LabelOutOfRange("compressed graph: label " + std::to_string(label) +
                          " out of range");
  return {flat_neighbors.data() + offsets[label], k_per_class[label]};
}

KnnGraph build_graph_bruteforce(const DenseMatrix& w_norm, std::size_t k) {
  const std::size_t n = w_norm.rows;
  if (k > n) throw KTooLarge("build_graph_bruteforce: k exceeds class count");
  if (k == 0) throw InvalidArgument("build_graph_bruteforce: k must be positive");
  KnnGraph g;
  g.num_classes = n;
  g.k = k;
  g.flat.resize(n * k);
  for (std::size_t j = 0; j < n; ++j) {
    CandidateList list(static_cast<std::uint32_t>(j), k);
    const float* wj = w_norm.data.data() + j * w_norm.cols;
    for (std::size_t i = 0; i < n; ++i) {
      const float* wi = w_norm.data.data() + i * w_norm.cols;
      float dot = 0.0f;
      for (std::size_t d = 0; d < w_norm.cols; ++d) dot += wj[d] * wi[d];
      list.offer({dot, static_cast<std::uint32_t>(i)});
    }
    const auto top = list.top(k);
    std::copy(top.begin(), top.end(), g.flat.begin() + j * k);
  }
  return g;
}

KnnGraph build_graph_ring(const std::vector<DenseMatrix>& w_shards, std::size_t k,
                          std::size_t kprime, RingBuildStats* stats, bool threaded) {
  const std::size_t p = w_shards.size();
  if (p == 0) throw EmptyShard("build_graph_ring: no shards");
  if (kprime < k) throw InvalidArgument("build_graph_ring: k' must be >= k");

  std::size_t n = 0;
  std::vector<std::size_t> block_offset(p);
  for (std::size_t s = 0; s < p; ++s) {
    if (w_shards[s].rows == 0) throw EmptyShard("build_graph_ring: shard " + std::to_string(s) + " is empty");
    block_offset[s] = n;
    n += w_shards[s].rows;
    if (w_shards[s].cols != w_shards[0].cols)
      throw ShapeMismatch("build_graph_ring: shard dims disagree");
  }
  if (k > n) throw KTooLarge("build_graph_ring: k exceeds class count");

  // Per-shard running candidate lists for its owned classes.
  std::vector<std::vector<CandidateList>> candidates(p);
  for (std::size_t s = 0; s < p; ++s) {
    candidates[s].reserve(w_shards[s].rows);
    for (std::size_t r = 0; r < w_shards[s].rows; ++r)
      candidates[s].emplace_back(static_cast<std::uint32_t>(block_offset[s] + r), kprime);
  }

  // held[s] is the origin shard of the block currently at shard s. Each
  // logical step every shard scores its held block, then the blocks rotate.
  std::vector<std::size_t> held(p);
  for (std::size_t s = 0; s < p; ++s) held[s] = s;

  RingBuildStats local_stats;
  auto score_step = [&](std::size_t s) {
    const DenseMatrix& own = w_shards[s];
    const DenseMatrix& block = w_shards[held[s]];
    const std::size_t boff = block_offset[held[s]];
    // The paper's per-step mm: own block against the held block.
    DenseMatrix scores = matmul(own, block, /*transpose_b=*/true);
    for (std::size_t r = 0; r < own.rows; ++r) {
      const float* srow = scores.data.data() + r * scores.cols;
      for (std::size_t i = 0; i < block.rows; ++i)
        candidates[s][r].offer({srow[i], static_cast<std::uint32_t>(boff + i)});
    }
  };

  for (std::size_t step = 0; step < p; ++step) {
    if (threaded && p > 1) {
      std::vector<std::thread> workers;
      workers.reserve(p);
      for (std::size_t s = 0; s < p; ++s) workers.emplace_back(score_step, s);
      for (auto& w : workers) w.join();  // lockstep barrier
    } else {
      for (std::size_t s = 0; s < p; ++s) score_step(s);
    }

    std::size_t candidate_entries = 0;
    for (std::size_t s = 0; s < p; ++s)
      for (const auto& cl : candidates[s]) candidate_entries += cl.size();
    std::size_t largest_block = 0;
    for (std::size_t s = 0; s < p; ++s)
      largest_block = std::max(largest_block, w_shards[held[s]].size());
    local_stats.peak_candidate_entries =
        std::max(local_stats.peak_candidate_entries, candidate_entries + largest_block);

    if (step + 1 < p) {
      // Pass the held block to the next shard around the ring.
      std::vector<std::size_t> next(p);
      for (std::size_t s = 0; s < p; ++s) next[(s + 1) % p] = held[s];
      held = std::move(next);
      ++local_stats.transfer_steps;
    }
  }

  KnnGraph g;
  g.num_classes = n;
  g.k = k;
  g.flat.resize(n * k);
  for (std::size_t s = 0; s < p; ++s) {
    for (std::size_t r = 0; r < w_shards[s].rows; ++r) {
      const auto top = candidates[s][r].top(k);
      if (top.size() < k)
        throw Error("build_graph_ring: candidate list shorter than k");
      std::copy(top.begin(), top.end(), g.flat.begin() + (block_offset[s] + r) * k);
    }
  }
  if (stats) *stats = local_stats;
  return g;
}

CompressedKnnGraph compress_graph(const KnnGraph& g, const ShardLayout& layout,
                                  std::size_t shard) {
  if (shard >= layout.num_shards)
    throw InvalidArgument("compress_graph: shard index out of range");
  if (layout.num_classes != g.num_classes)
    throw ShapeMismatch("compress_graph: layout class count disagrees with graph");

  CompressedKnnGraph cg;
  cg.num_classes = g.num_classes;
  cg.shard = shard;
  const auto [begin, end] = layout.class_range(shard);
  cg.shard_classes.reserve(end - begin);
  for (std::size_t c = begin; c < end; ++c)
    cg.shard_classes.push_back(static_cast<std::uint32_t>(c));

  cg.k_per_class.resize(g.num_classes);
  cg.offsets.resize(g.num_classes);
  std::uint64_t off = 0;
  for (std::size_t c = 0; c < g.num_classes; ++c) {
    cg.offsets[c] = off;
    std::uint32_t kept = 0;
    for (std::uint32_t nb : g.neighbors(c)) {
      if (nb >= begin && nb < end) {
        cg.flat_neighbors.push_back(nb);
        ++kept;
      }
    }
    cg.k_per_class[c] = kept;
    off += kept;
  }
  return cg;
}

std::vector<std::span<const std::uint32_t>> quick_access(
    const CompressedKnnGraph& cg, std::span<const std::uint32_t> labels) {
  std::vector<std::span<const std::uint32_t>> out;
  out.reserve(labels.size());
  for (std::uint32_t y : labels) out.push_back(cg.slice(y));
  return out;
}

void save_graph(const KnnGraph& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write("XKNN", 4);
  put_u32(f, 1u);  // version
  put_u64(f, g.num_classes);
  for (std::size_t c = 0; c < g.num_classes; ++c) {
    put_u32(f, static_cast<std::uint32_t>(g.k));
    for (std::uint32_t nb : g.neighbors(c)) put_u32(f, nb);
  }
  if (!f) throw IoError("write failed: " + path);
}

KnnGraph load_graph(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "XKNN", 4) != 0)
    throw IoError(path + ": not a graph file (bad magic)");
  const std::uint32_t version = get_u32(f);
  if (version != 1u) throw IoError(path + ": unsupported graph version");
  const std::uint64_t n = get_u64(f);
  KnnGraph g;
  g.num_classes = n;
  for (std::uint64_t c = 0; c < n; ++c) {
    const std::uint32_t kc = get_u32(f);
    if (c == 0) {
      g.k = kc;
      g.flat.reserve(n * kc);
    } else if (kc != g.k) {
      throw IoError(path + ": per-class k varies; not a full graph");
    }
    for (std::uint32_t i = 0; i < kc; ++i) g.flat.push_back(get_u32(f));
  }
  return g;
}

std::vector<DenseMatrix> split_rows(const DenseMatrix& w, const ShardLayout& layout) {
  if (layout.num_classes != w.rows) throw ShapeMismatch("split_rows: row count disagrees");
  std::vector<DenseMatrix> shards;
  shards.reserve(layout.num_shards);
  for (std::size_t s = 0; s < layout.num_shards; ++s) {
    const auto [begin, end] = layout.class_range(s);
    DenseMatrix block(end - begin, w.cols);
    std::copy(w.data.begin() + begin * w.cols, w.data.begin() + end * w.cols,
              block.data.begin());
    shards.push_back(std::move(block));
  }
  return shards;
}

}  // namespace xcls
