#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xcls/fccs.hpp"
#include "xcls/knn_graph.hpp"
#include "xcls/knn_softmax.hpp"
#include "xcls/mlp.hpp"
#include "xcls/softmax.hpp"
#include "xcls/sparsify.hpp"

namespace xcls {

/// Hybrid-parallel layout: every worker carries one feature-extractor
/// replica (data parallel) and owns one contiguous fc shard (model parallel).
struct WorkerTopology {
  std::size_t num_workers = 1;
  ShardLayout shard_layout;  // over the N classes

  static WorkerTopology make(std::size_t num_workers, std::size_t num_classes) {
    return {num_workers, ShardLayout{num_classes, num_workers}};
  }
};

/// Per-worker communication counters. sync_rounds counts parameter-gradient
/// synchronization rounds (one per reduce phase); the softmax scalar
/// reductions and feature exchanges contribute bytes only. Tick counters
/// come from the pipeline timing model.
struct CommStats {
  std::vector<std::uint64_t> bytes_allgather;
  std::vector<std::uint64_t> bytes_allreduce;
  std::vector<std::uint64_t> sync_rounds;
  std::vector<std::uint64_t> overlap_ticks;
  std::vector<std::uint64_t> total_ticks;

  explicit CommStats(std::size_t num_workers = 0) { resize(num_workers); }
  void resize(std::size_t p) {
    bytes_allgather.assign(p, 0);
    bytes_allreduce.assign(p, 0);
    sync_rounds.assign(p, 0);
    overlap_ticks.assign(p, 0);
    total_ticks.assign(p, 0);
  }
  std::size_t num_workers() const { return bytes_allgather.size(); }
  std::string to_csv() const;
};

/// Every worker ends with the row-wise concatenation, in rank order.
std::vector<DenseMatrix> all_gather(std::span<const DenseMatrix> per_worker,
                                    CommStats* stats = nullptr);

/// Every worker ends with the elementwise sum, accumulated in rank order so
/// all workers and all runs agree bit-for-bit.
std::vector<DenseMatrix> all_reduce_sum(std::span<const DenseMatrix> per_worker,
                                        CommStats* stats = nullptr);

enum class ReduceOp { kSum, kMax };

/// Rank-ordered reduction of per-worker scalar vectors (sum in double).
std::vector<double> scalar_reduce(std::span<const std::vector<double>> per_worker,
                                  ReduceOp op, CommStats* stats = nullptr);

struct DistributedSoftmaxResult {
  double loss = 0.0;                      // identical on every worker
  std::vector<DenseMatrix> grad_slices;   // per worker, matching its logits
};

/// Softmax cross-entropy over class-sharded logits: one max reduction and
/// one exp-sum reduction per row, then local gradient slices. Matches
/// softmax_xent on the concatenated logits (bit-for-bit at P=1).
DistributedSoftmaxResult distributed_softmax_xent(std::span<const DenseMatrix> shard_logits,
                                                  std::span<const std::uint32_t> labels,
                                                  const ShardLayout& layout,
                                                  CommStats* stats = nullptr);

/// General form: worker p's columns are the global class ids
/// `worker_cols[p]` (sorted). Each label must appear in exactly one worker's
/// column list.
DistributedSoftmaxResult distributed_softmax_xent_cols(
    std::span<const DenseMatrix> shard_logits,
    std::span<const std::vector<std::uint32_t>> worker_cols,
    std::span<const std::uint32_t> labels, CommStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Micro-batch pipeline timing model
// ---------------------------------------------------------------------------

enum class Stage { kFeFwd, kGather, kFcFwd, kSoftmax, kFcBwd, kFeBwd, kReduce };
const char* stage_name(Stage s);
bool stage_is_comm(Stage s);

/// Integer tick cost per stage for one micro-batch.
struct StageCosts {
  std::uint64_t fe_fwd = 4;
  std::uint64_t gather = 2;
  std::uint64_t fc_fwd = 2;
  std::uint64_t softmax = 1;
  std::uint64_t fc_bwd = 2;
  std::uint64_t fe_bwd = 4;
  std::uint64_t reduce = 3;
  std::uint64_t cost(Stage s) const;
};

struct PipelineEvent {
  std::size_t worker;
  Stage stage;
  std::size_t micro_batch;
  std::uint64_t start_tick;
  std::uint64_t end_tick;
};

struct PipelineSchedule {
  std::size_t micro_batches = 1;
  bool overlapped = false;
  std::vector<PipelineEvent> events;
  std::uint64_t total_ticks = 0;
  std::uint64_t overlap_ticks = 0;  // ticks with compute and comm both busy

  std::string to_csv() const;
};

/// Event log for one training step under the tick-cost model. Baseline
/// serializes everything; the overlapped variant runs communication stages
/// on their own resource so they hide behind compute of other micro-batches.
/// Purely a timing model: numerical results never depend on it.
PipelineSchedule pipeline_schedule(const WorkerTopology& topo, std::size_t micro_batches,
                                   const StageCosts& costs, bool overlapped);

// ---------------------------------------------------------------------------
// The simulated hybrid trainer
// ---------------------------------------------------------------------------

enum class SoftmaxMode { kFull, kKnn };

struct SimOptions {
  float scale = 30.0f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;
  bool lars = false;                 // feature-extractor tensors only
  LarsConfig lars_cfg;
  bool sparsify = false;             // feature-extractor gradients only
  double sparsity_ratio = 0.99;
  float sparsify_momentum = 0.9f;
  bool worker_threads = false;       // per-phase threads; results identical
};

struct StepOptions {
  SoftmaxMode mode = SoftmaxMode::kFull;
  float lr = 0.1f;
  std::size_t micro_batches = 1;
  bool pipelined = false;            // timing model flag only
  StageCosts costs;
  SelectionConfig selection;         // knn mode
};

struct StepResult {
  double loss = 0.0;
  std::size_t active_classes = 0;    // knn mode: |ActiveSet|
  double achieved_sparsity = 0.0;    // fraction of fe gradient entries withheld
};

/// Deterministic multi-worker simulation of the hybrid framework. Every
/// worker holds a feature-extractor replica and one fc shard; all
/// cross-worker traffic goes through the collectives above. A sequential
/// mode and a threads-per-phase mode produce identical results.
class HybridSim {
 public:
  HybridSim(const WorkerTopology& topo, const MlpConfig& mlp_cfg, std::uint64_t mlp_seed,
            std::uint64_t fc_seed, const SimOptions& opts);

  /// One synchronous training step over a global batch whose row count is
  /// divisible by the worker count.
  StepResult train_step(const LabeledBatch& batch, const StepOptions& step);

  /// Replaces the per-shard compressed graphs used by knn-mode selection.
  void set_shard_graphs(std::vector<CompressedKnnGraph> graphs);

  std::size_t num_workers() const { return topo_.num_workers; }
  const WorkerTopology& topology() const { return topo_; }

  /// Current fc weights, reassembled from the shards (N x D).
  DenseMatrix fc_weights() const;
  /// Feature-extractor replica of one worker.
  const MlpParams& mlp_replica(std::size_t worker) const { return workers_[worker].mlp; }
  /// True when all replicas are bit-identical (they always should be).
  bool replicas_identical() const;

  const CommStats& comm_stats() const { return stats_; }
  void reset_comm_stats() { stats_.resize(topo_.num_workers); }

  /// Serializable full model view.
  struct ModelView {
    MlpParams mlp;
    DenseMatrix fc_weight;
  };
  ModelView model() const;
  void load_model(const ModelView& view);

 private:
  struct Worker {
    MlpParams mlp;
    DenseMatrix fc_block;
    std::vector<SgdMomentum> mlp_opt;  // one per tensor
    SgdMomentum fc_opt;
    CompressionState compressor;
    CompressedKnnGraph shard_graph;
    bool has_graph = false;

    Worker(float momentum, float weight_decay, double sparsity, float sp_momentum)
        : fc_opt(momentum, weight_decay), compressor(sparsity, sp_momentum) {}
  };

  void for_each_worker(const std::function<void(std::size_t)>& fn);

  WorkerTopology topo_;
  MlpConfig mlp_cfg_;
  SimOptions opts_;
  std::vector<Worker> workers_;
  CommStats stats_;
};

}  // namespace xcls
