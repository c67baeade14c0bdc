#include "xcls/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <thread>

namespace xcls {

namespace {

constexpr std::size_t kFloatBytes = sizeof(float);

void check_same_shapes(std::span<const DenseMatrix> per_worker, const char* op) {
  for (const auto& t : per_worker)
    if (!t.same_shape(per_worker[0]))
      throw ShapeMismatch(std::string(op) + ": per-worker shapes disagree");
}

}  // namespace

std::string CommStats::to_csv() const {
  std::ostringstream out;
  out << "worker,bytes_allgather,bytes_allreduce,sync_rounds,overlap_ticks,total_ticks\n";
  for (std::size_t p = 0; p < num_workers(); ++p)
    out << p << ',' << bytes_allgather[p] << ',' << bytes_allreduce[p] << ','
        << sync_rounds[p] << ',' << overlap_ticks[p] << ',' << total_ticks[p] << '\n';
  return out.str();
}

std::vector<DenseMatrix> all_gather(std::span<const DenseMatrix> per_worker,
                                    CommStats* stats) {
  const std::size_t p = per_worker.size();
  if (p == 0) throw InvalidArgument("all_gather: no workers");
  check_same_shapes(per_worker, "all_gather");

  DenseMatrix gathered(per_worker[0].rows * p, per_worker[0].cols);
  float* dst = gathered.data.data();
  for (const auto& t : per_worker) {
    std::copy(t.data.begin(), t.data.end(), dst);
    dst += t.data.size();
  }
  if (stats && stats->num_workers() == p) {
    for (std::size_t r = 0; r < p; ++r)
      stats->bytes_allgather[r] += per_worker[r].size() * kFloatBytes * (p - 1);
  }
  return std::vector<DenseMatrix>(p, gathered);
}

std::vector<DenseMatrix> all_reduce_sum(std::span<const DenseMatrix> per_worker,
                                        CommStats* stats) {
  const std::size_t p = per_worker.size();
  if (p == 0) throw InvalidArgument("all_reduce_sum: no workers");
  check_same_shapes(per_worker, "all_reduce_sum");

  DenseMatrix sum = per_worker[0];
  for (std::size_t r = 1; r < p; ++r) axpy(sum, 1.0f, per_worker[r]);  // rank order
  if (stats && stats->num_workers() == p) {
    for (std::size_t r = 0; r < p; ++r)
      stats->bytes_allreduce[r] += per_worker[r].size() * kFloatBytes * (p - 1);
  }
  return std::vector<DenseMatrix>(p, sum);
}

std::vector<double> scalar_reduce(std::span<const std::vector<double>> per_worker,
                                  ReduceOp op, CommStats* stats) {
  const std::size_t p = per_worker.size();
  if (p == 0) throw InvalidArgument("scalar_reduce: no workers");
  for (const auto& v : per_worker)
    if (v.size() != per_worker[0].size())
      throw ShapeMismatch("scalar_reduce: per-worker lengths disagree");

  std::vector<double> out = per_worker[0];
  for (std::size_t r = 1; r < p; ++r) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (op == ReduceOp::kSum)
        out[i] += per_worker[r][i];
      else
        out[i] = std::max(out[i], per_worker[r][i]);
    }
  }
  if (stats && stats->num_workers() == p) {
    for (std::size_t r = 0; r < p; ++r)
      stats->bytes_allreduce[r] += per_worker[r].size() * sizeof(double) * (p - 1);
  }
  return out;
}

DistributedSoftmaxResult distributed_softmax_xent(std::span<const DenseMatrix> shard_logits,
                                                  std::span<const std::uint32_t> labels,
                                                  const ShardLayout& layout,
                                                  CommStats* stats) {
  std::vector<std::vector<std::uint32_t>> cols(shard_logits.size());
  for (std::size_t s = 0; s < shard_logits.size(); ++s) {
    const auto [begin, end] = layout.class_range(s);
    if (shard_logits[s].cols != end - begin)
      throw ShapeMismatch("distributed_softmax_xent: shard width disagrees with layout");
    cols[s].resize(end - begin);
    for (std::size_t c = begin; c < end; ++c)
      cols[s][c - begin] = static_cast<std::uint32_t>(c);
  }
  return distributed_softmax_xent_cols(shard_logits, cols, labels, stats);
}

DistributedSoftmaxResult distributed_softmax_xent_cols(
    std::span<const DenseMatrix> shard_logits,
    std::span<const std::vector<std::uint32_t>> worker_cols,
    std::span<const std::uint32_t> labels, CommStats* stats) {
  const std::size_t p = shard_logits.size();
  if (p == 0 || worker_cols.size() != p)
    throw InvalidArgument("distributed_softmax: worker lists disagree");
  const std::size_t m = shard_logits[0].rows;
  if (labels.size() != m)
    throw ShapeMismatch("distributed_softmax: one label per row required");
  for (std::size_t s = 0; s < p; ++s) {
    if (shard_logits[s].rows != m)
      throw ShapeMismatch("distributed_softmax: shard row counts disagree");
    if (shard_logits[s].cols != worker_cols[s].size())
      throw ShapeMismatch("distributed_softmax: column list disagrees with logits");
  }

  // Round 1: per-row local max, reduced with max.
  std::vector<std::vector<double>> local_max(p, std::vector<double>(m));
  for (std::size_t s = 0; s < p; ++s) {
    const DenseMatrix& l = shard_logits[s];
    for (std::size_t i = 0; i < m; ++i) {
      const float* row = l.data.data() + i * l.cols;
      float mx = l.cols ? row[0] : -std::numeric_limits<float>::infinity();
      for (std::size_t j = 1; j < l.cols; ++j) mx = std::max(mx, row[j]);
      local_max[s][i] = mx;
    }
  }
  const std::vector<double> global_max = scalar_reduce(local_max, ReduceOp::kMax, stats);

  // Round 2: per-row exp-sum after max subtraction, plus the label logit
  // term and a label-ownership count, reduced with sum.
  std::vector<std::vector<double>> local_sums(p, std::vector<double>(3 * m, 0.0));
  for (std::size_t s = 0; s < p; ++s) {
    const DenseMatrix& l = shard_logits[s];
    const auto& cls = worker_cols[s];
    for (std::size_t i = 0; i < m; ++i) {
      const float* row = l.data.data() + i * l.cols;
      const float mx = static_cast<float>(global_max[i]);
      double denom = 0.0;
      for (std::size_t j = 0; j < l.cols; ++j) denom += std::exp(row[j] - mx);
      local_sums[s][i] = denom;
      auto it = std::lower_bound(cls.begin(), cls.end(), labels[i]);
      if (it != cls.end() && *it == labels[i]) {
        const std::size_t j = static_cast<std::size_t>(it - cls.begin());
        local_sums[s][m + i] = static_cast<double>(row[j] - mx);
        local_sums[s][2 * m + i] = 1.0;
      }
    }
  }
  const std::vector<double> sums = scalar_reduce(local_sums, ReduceOp::kSum, stats);
  for (std::size_t i = 0; i < m; ++i) {
    if (sums[2 * m + i] != 1.0)
      throw LabelOutOfRange("distributed_softmax: label " + std::to_string(labels[i]) +
                            " owned by " + std::to_string(sums[2 * m + i]) + " shards");
  }

  DistributedSoftmaxResult r;
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) loss_sum += std::log(sums[i]) - sums[m + i];
  r.loss = loss_sum / static_cast<double>(m);

  const float inv_m = 1.0f / static_cast<float>(m);
  r.grad_slices.reserve(p);
  for (std::size_t s = 0; s < p; ++s) {
    const DenseMatrix& l = shard_logits[s];
    const auto& cls = worker_cols[s];
    DenseMatrix g(l.rows, l.cols);
    for (std::size_t i = 0; i < m; ++i) {
      const float* row = l.data.data() + i * l.cols;
      float* grow = g.data.data() + i * l.cols;
      const float mx = static_cast<float>(global_max[i]);
      const float inv_denom = static_cast<float>(1.0 / sums[i]);
      for (std::size_t j = 0; j < l.cols; ++j)
        grow[j] = std::exp(row[j] - mx) * inv_denom * inv_m;
      auto it = std::lower_bound(cls.begin(), cls.end(), labels[i]);
      if (it != cls.end() && *it == labels[i])
        grow[static_cast<std::size_t>(it - cls.begin())] -= inv_m;
    }
    r.grad_slices.push_back(std::move(g));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pipeline timing model
// ---------------------------------------------------------------------------

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kFeFwd: return "fe_fwd";
    case Stage::kGather: return "gather";
    case Stage::kFcFwd: return "fc_fwd";
    case Stage::kSoftmax: return "softmax";
    case Stage::kFcBwd: return "fc_bwd";
    case Stage::kFeBwd: return "fe_bwd";
    case Stage::kReduce: return "reduce";
  }
  return "?";
}

bool stage_is_comm(Stage s) { return s == Stage::kGather || s == Stage::kReduce; }

std::uint64_t StageCosts::cost(Stage s) const {
  switch (s) {
    case Stage::kFeFwd: return fe_fwd;
    case Stage::kGather: return gather;
    case Stage::kFcFwd: return fc_fwd;
    case Stage::kSoftmax: return softmax;
    case Stage::kFcBwd: return fc_bwd;
    case Stage::kFeBwd: return fe_bwd;
    case Stage::kReduce: return reduce;
  }
  return 0;
}

std::string PipelineSchedule::to_csv() const {
  std::ostringstream out;
  out << "worker,stage,micro_batch,start_tick,end_tick\n";
  for (const auto& e : events)
    out << e.worker << ',' << stage_name(e.stage) << ',' << e.micro_batch << ','
        << e.start_tick << ',' << e.end_tick << '\n';
  return out.str();
}

namespace {

constexpr Stage kStageChain[] = {Stage::kFeFwd, Stage::kGather, Stage::kFcFwd,
                                 Stage::kSoftmax, Stage::kFcBwd, Stage::kFeBwd,
                                 Stage::kReduce};
constexpr std::size_t kNumStages = std::size(kStageChain);

std::uint64_t compute_overlap(const std::vector<PipelineEvent>& events, std::uint64_t total) {
  // Tick-resolution busy masks for the two resources.
  std::vector<std::uint8_t> compute_busy(total, 0), comm_busy(total, 0);
  for (const auto& e : events) {
    if (e.worker != 0) continue;  // symmetric timelines
    auto& mask = stage_is_comm(e.stage) ? comm_busy : compute_busy;
    for (std::uint64_t t = e.start_tick; t < e.end_tick; ++t) mask[t] = 1;
  }
  std::uint64_t overlap = 0;
  for (std::uint64_t t = 0; t < total; ++t)
    if (compute_busy[t] && comm_busy[t]) ++overlap;
  return overlap;
}

}  // namespace

PipelineSchedule pipeline_schedule(const WorkerTopology& topo, std::size_t micro_batches,
                                   const StageCosts& costs, bool overlapped) {
  if (micro_batches == 0) throw InvalidArgument("pipeline_schedule: need >= 1 micro-batch");
  PipelineSchedule sched;
  sched.micro_batches = micro_batches;
  sched.overlapped = overlapped;

  // One symmetric timeline: every worker runs the same SPMD schedule.
  std::vector<PipelineEvent> timeline;
  if (!overlapped) {
    // Everything serialized; communication blocks computation.
    std::uint64_t t = 0;
    for (std::size_t mb = 0; mb < micro_batches; ++mb) {
      for (Stage s : kStageChain) {
        const std::uint64_t c = costs.cost(s);
        timeline.push_back({0, s, mb, t, t + c});
        t += c;
      }
    }
    sched.total_ticks = t;
  } else {
    // List scheduling over two resources (compute, comm) with the per-micro
    // chain dependency plus FIFO order within a stage.
    struct Node {
      std::size_t micro;
      std::size_t stage_idx;
      bool done = false;
      std::uint64_t end = 0;
    };
    std::vector<Node> nodes;
    for (std::size_t mb = 0; mb < micro_batches; ++mb)
      for (std::size_t si = 0; si < kNumStages; ++si) nodes.push_back({mb, si});
    auto node_at = [&](std::size_t mb, std::size_t si) -> Node& {
      return nodes[mb * kNumStages + si];
    };

    std::uint64_t compute_free = 0, comm_free = 0;
    std::size_t remaining = nodes.size();
    while (remaining > 0) {
      std::size_t best = nodes.size();
      std::uint64_t best_start = 0;
      for (std::size_t idx = 0; idx < nodes.size(); ++idx) {
        Node& nd = nodes[idx];
        if (nd.done) continue;
        std::uint64_t ready = 0;
        if (nd.stage_idx > 0) {
          const Node& dep = node_at(nd.micro, nd.stage_idx - 1);
          if (!dep.done) continue;
          ready = dep.end;
        }
        if (nd.micro > 0) {
          const Node& prev = node_at(nd.micro - 1, nd.stage_idx);
          if (!prev.done) continue;  // FIFO within a stage
          ready = std::max(ready, prev.end);
        }
        const Stage s = kStageChain[nd.stage_idx];
        const std::uint64_t start =
            std::max(ready, stage_is_comm(s) ? comm_free : compute_free);
        if (best == nodes.size() || start < best_start ||
            (start == best_start &&
             std::pair(nd.micro, nd.stage_idx) <
                 std::pair(nodes[best].micro, nodes[best].stage_idx))) {
          best = idx;
          best_start = start;
        }
      }
      Node& nd = nodes[best];
      const Stage s = kStageChain[nd.stage_idx];
      const std::uint64_t c = costs.cost(s);
      nd.end = best_start + c;
      nd.done = true;
      (stage_is_comm(s) ? comm_free : compute_free) = nd.end;
      timeline.push_back({0, s, nd.micro, best_start, nd.end});
      --remaining;
      sched.total_ticks = std::max(sched.total_ticks, nd.end);
    }
    std::sort(timeline.begin(), timeline.end(), [](const auto& a, const auto& b) {
      return std::tuple(a.start_tick, a.micro_batch, static_cast<int>(a.stage)) <
             std::tuple(b.start_tick, b.micro_batch, static_cast<int>(b.stage));
    });
  }

  sched.overlap_ticks = compute_overlap(timeline, sched.total_ticks);
  // Replicate the symmetric timeline for every worker.
  sched.events.reserve(timeline.size() * topo.num_workers);
  for (std::size_t w = 0; w < topo.num_workers; ++w)
    for (PipelineEvent e : timeline) {
      e.worker = w;
      sched.events.push_back(e);
    }
  return sched;
}

// ---------------------------------------------------------------------------
// HybridSim
// ---------------------------------------------------------------------------

HybridSim::HybridSim(const WorkerTopology& topo, const MlpConfig& mlp_cfg,
                     std::uint64_t mlp_seed, std::uint64_t fc_seed, const SimOptions& opts)
    : topo_(topo), mlp_cfg_(mlp_cfg), opts_(opts), stats_(topo.num_workers) {
  if (topo_.num_workers == 0) throw InvalidArgument("HybridSim: need >= 1 worker");
  if (topo_.shard_layout.num_shards != topo_.num_workers)
    throw InvalidArgument("HybridSim: one fc shard per worker required");

  // One logical init, replicated/sharded onto the workers.
  MlpParams mlp0 = mlp_init(mlp_cfg, mlp_seed);
  DenseMatrix w(topo_.shard_layout.num_classes, mlp_cfg.output_dim);
  std::mt19937_64 rng(fc_seed);
  std::normal_distribution<float> dist(0.0f, 0.05f);
  for (float& v : w.data) v = dist(rng);

  const auto blocks = split_rows(w, topo_.shard_layout);
  // With sparsification the momentum lives inside the compressor (momentum
  // correction), so the fe optimizer runs plain SGD then.
  const float fe_mom = opts_.sparsify ? 0.0f : opts_.momentum;
  workers_.reserve(topo_.num_workers);
  for (std::size_t p = 0; p < topo_.num_workers; ++p) {
    Worker wk(opts_.momentum, opts_.weight_decay, opts_.sparsify ? opts_.sparsity_ratio : 0.0,
              opts_.sparsify_momentum);
    wk.mlp = mlp0;
    wk.fc_block = blocks[p];
    for (std::size_t t = 0; t < wk.mlp.tensors().size(); ++t)
      wk.mlp_opt.emplace_back(fe_mom, opts_.weight_decay);
    workers_.push_back(std::move(wk));
  }
}

void HybridSim::set_shard_graphs(std::vector<CompressedKnnGraph> graphs) {
  if (graphs.size() != topo_.num_workers)
    throw InvalidArgument("set_shard_graphs: one graph per worker required");
  for (std::size_t p = 0; p < topo_.num_workers; ++p) {
    workers_[p].shard_graph = std::move(graphs[p]);
    workers_[p].has_graph = true;
  }
}

void HybridSim::for_each_worker(const std::function<void(std::size_t)>& fn) {
  if (opts_.worker_threads && topo_.num_workers > 1) {
    std::vector<std::thread> threads;
    threads.reserve(topo_.num_workers);
    for (std::size_t p = 0; p < topo_.num_workers; ++p) threads.emplace_back(fn, p);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t p = 0; p < topo_.num_workers; ++p) fn(p);
  }
}

DenseMatrix HybridSim::fc_weights() const {
  DenseMatrix w(topo_.shard_layout.num_classes, mlp_cfg_.output_dim);
  for (std::size_t p = 0; p < topo_.num_workers; ++p) {
    const auto [begin, end] = topo_.shard_layout.class_range(p);
    std::copy(workers_[p].fc_block.data.begin(), workers_[p].fc_block.data.end(),
              w.data.begin() + begin * w.cols);
  }
  return w;
}

bool HybridSim::replicas_identical() const {
  for (std::size_t p = 1; p < workers_.size(); ++p) {
    const auto a = workers_[0].mlp.tensors();
    const auto b = workers_[p].mlp.tensors();
    for (std::size_t t = 0; t < a.size(); ++t)
      if (!(*a[t] == *b[t])) return false;
  }
  return true;
}

HybridSim::ModelView HybridSim::model() const {
  return {workers_[0].mlp, fc_weights()};
}

void HybridSim::load_model(const ModelView& view) {
  const auto blocks = split_rows(view.fc_weight, topo_.shard_layout);
  for (std::size_t p = 0; p < topo_.num_workers; ++p) {
    workers_[p].mlp = view.mlp;
    workers_[p].fc_block = blocks[p];
  }
}

StepResult HybridSim::train_step(const LabeledBatch& batch, const StepOptions& step) {
  const std::size_t p = topo_.num_workers;
  const std::size_t m = batch.features.rows;
  if (m == 0 || m % p != 0)
    throw InvalidArgument("train_step: batch size must be a positive multiple of P");
  if (batch.labels.size() != m) throw ShapeMismatch("train_step: one label per sample");
  const std::size_t n_classes = topo_.shard_layout.num_classes;
  for (std::uint32_t y : batch.labels)
    if (y >= n_classes) throw LabelOutOfRange("train_step: label out of range");

  const std::size_t slice_rows = m / p;
  const std::size_t micros = std::min(step.micro_batches ? step.micro_batches : 1, slice_rows);

  // Per-worker contiguous sample slices, in rank order.
  std::vector<DenseMatrix> x_slices(p);
  for (std::size_t w = 0; w < p; ++w) {
    DenseMatrix xs(slice_rows, batch.features.cols);
    std::copy_n(batch.features.data.begin() + w * slice_rows * batch.features.cols,
                slice_rows * batch.features.cols, xs.data.begin());
    x_slices[w] = std::move(xs);
  }

  // KNN mode: select once per step from the per-shard compressed graphs
  // (quick access on every worker, slices gathered to rank 0, active set
  // broadcast back).
  ActiveSet active;
  std::vector<std::vector<std::uint32_t>> worker_cols(p);
  if (step.mode == SoftmaxMode::kKnn) {
    std::vector<CompressedKnnGraph> graphs;
    graphs.reserve(p);
    for (auto& wk : workers_) {
      if (!wk.has_graph) throw InvalidArgument("train_step: knn mode without shard graphs");
      graphs.push_back(wk.shard_graph);
    }
    active = select_active_classes(graphs, batch.labels, step.selection, n_classes);
    // Account the slice gather to rank 0 and the active-set broadcast.
    for (std::size_t w = 0; w < p; ++w) {
      std::uint64_t payload = 0;
      for (std::uint32_t y : batch.labels)
        payload += 4 + 4ull * workers_[w].shard_graph.k_per_class[y];
      if (w != 0) stats_.bytes_allgather[w] += payload;
    }
    if (p > 1) stats_.bytes_allgather[0] += 4ull * active.size() * (p - 1);
  } else {
    active = full_active_set(n_classes);
  }
  for (std::size_t w = 0; w < p; ++w) {
    const auto [begin, end] = topo_.shard_layout.class_range(w);
    auto lo = std::lower_bound(active.class_indices.begin(), active.class_indices.end(),
                               static_cast<std::uint32_t>(begin));
    auto hi = std::lower_bound(active.class_indices.begin(), active.class_indices.end(),
                               static_cast<std::uint32_t>(end));
    worker_cols[w].assign(lo, hi);
  }

  // Normalized fc shards, norms cached for the weight-side backward.
  std::vector<RowNormalized> w_norm(p);
  for_each_worker([&](std::size_t w) {
    w_norm[w] = l2_normalize_rows_cached(workers_[w].fc_block);
  });
  // Active rows gathered out of each worker's normalized shard.
  std::vector<DenseMatrix> w_sub(p);
  for (std::size_t w = 0; w < p; ++w) {
    const auto [begin, end] = topo_.shard_layout.class_range(w);
    DenseMatrix sub(worker_cols[w].size(), mlp_cfg_.output_dim);
    for (std::size_t i = 0; i < worker_cols[w].size(); ++i)
      std::copy_n(w_norm[w].normalized.data.data() +
                      (worker_cols[w][i] - begin) * sub.cols,
                  sub.cols, sub.data.data() + i * sub.cols);
    w_sub[w] = std::move(sub);
  }

  // Accumulators across micro-batches.
  std::vector<MlpGrads> fe_acc(p);
  for (std::size_t w = 0; w < p; ++w) fe_acc[w] = mlp_zero_grads(workers_[w].mlp);
  std::vector<DenseMatrix> fc_acc(p);  // gradient w.r.t. the active rows of each shard
  for (std::size_t w = 0; w < p; ++w)
    fc_acc[w] = DenseMatrix(worker_cols[w].size(), mlp_cfg_.output_dim);

  double loss_sum = 0.0;

  // Balanced micro split of each worker slice; chunk c has the same length
  // on every worker, so each micro-batch is a valid global batch.
  const std::size_t micro_base = slice_rows / micros;
  const std::size_t micro_rem = slice_rows % micros;
  std::size_t slice_off = 0;
  for (std::size_t c = 0; c < micros; ++c) {
    const std::size_t rows_c = micro_base + (c < micro_rem ? 1 : 0);
    const std::size_t m_micro = rows_c * p;
    const float weight = static_cast<float>(m_micro) / static_cast<float>(m);

    // Labels of this micro-batch in gathered (rank-concatenated) order.
    std::vector<std::uint32_t> labels_micro(m_micro);
    for (std::size_t w = 0; w < p; ++w)
      for (std::size_t i = 0; i < rows_c; ++i)
        labels_micro[w * rows_c + i] = batch.labels[w * slice_rows + slice_off + i];

    // (1) data-parallel feature extraction
    std::vector<MlpCache> caches(p);
    std::vector<DenseMatrix> micro_x(p), features(p);
    for (std::size_t w = 0; w < p; ++w) {
      DenseMatrix mx(rows_c, x_slices[w].cols);
      std::copy_n(x_slices[w].data.begin() + slice_off * x_slices[w].cols,
                  rows_c * x_slices[w].cols, mx.data.begin());
      micro_x[w] = std::move(mx);
    }
    for_each_worker([&](std::size_t w) {
      features[w] = mlp_forward(workers_[w].mlp, micro_x[w], &caches[w]);
    });

    // (2) feature all-gather, then every worker normalizes the batch
    std::vector<DenseMatrix> gathered = all_gather(features, &stats_);
    std::vector<RowNormalized> f_norm(p);
    std::vector<DenseMatrix> logits(p);
    for_each_worker([&](std::size_t w) {
      f_norm[w] = l2_normalize_rows_cached(gathered[w]);
      // (3) shard fc forward on the worker's active columns
      DenseMatrix lg = matmul(f_norm[w].normalized, w_sub[w], /*transpose_b=*/true);
      for (float& v : lg.data) v *= opts_.scale;
      logits[w] = std::move(lg);
    });

    // (4) distributed softmax with cross-entropy
    DistributedSoftmaxResult sm =
        distributed_softmax_xent_cols(logits, worker_cols, labels_micro, &stats_);
    loss_sum += static_cast<double>(weight) * sm.loss;

    // (5) fc backward + partial feature gradients; merge via gather-then-slice
    std::vector<DenseMatrix> feat_grad_partial(p);
    for_each_worker([&](std::size_t w) {
      // weight side: d/d w_sub = scale * grad^T * F_hat
      DenseMatrix gw = matmul_at(sm.grad_slices[w], f_norm[w].normalized);
      for (float& v : gw.data) v *= opts_.scale * weight;
      axpy(fc_acc[w], 1.0f, gw);
      // feature side: this shard's column contribution
      DenseMatrix gf = matmul(sm.grad_slices[w], w_sub[w]);
      for (float& v : gf.data) v *= opts_.scale;
      feat_grad_partial[w] = std::move(gf);
    });
    std::vector<DenseMatrix> feat_grad = all_reduce_sum(feat_grad_partial, &stats_);

    // (6) feature-extractor backward on each worker's own rows
    for_each_worker([&](std::size_t w) {
      DenseMatrix gf_rows(rows_c, mlp_cfg_.output_dim);
      std::copy_n(feat_grad[w].data.begin() + (w * rows_c) * mlp_cfg_.output_dim,
                  rows_c * mlp_cfg_.output_dim, gf_rows.data.begin());
      // back through the row normalization of this worker's feature rows
      DenseMatrix fhat_rows(rows_c, mlp_cfg_.output_dim);
      std::copy_n(f_norm[w].normalized.data.begin() + (w * rows_c) * mlp_cfg_.output_dim,
                  rows_c * mlp_cfg_.output_dim, fhat_rows.data.begin());
      std::vector<float> norms_rows(f_norm[w].norms.begin() + w * rows_c,
                                    f_norm[w].norms.begin() + (w + 1) * rows_c);
      DenseMatrix gfeat = l2_normalize_backward(fhat_rows, norms_rows, gf_rows);
      MlpGrads g = mlp_backward(workers_[w].mlp, caches[w], gfeat);
      fe_acc[w].add_scaled(g, weight);
    });

    slice_off += rows_c;
  }

  // (7) feature-extractor gradient exchange: dense or sparsified all-reduce.
  StepResult result;
  result.loss = loss_sum;
  result.active_classes = active.size();

  const std::size_t n_tensors = fe_acc[0].tensors().size();
  std::vector<DenseMatrix> reduced(n_tensors);
  std::uint64_t sent_entries = 0, dense_entries = 0;
  if (opts_.sparsify) {
    for (std::size_t t = 0; t < n_tensors; ++t) {
      std::vector<SparseGradient> messages(p);
      for (std::size_t w = 0; w < p; ++w) {
        DenseMatrix* tensor = fe_acc[w].tensors()[t];
        messages[w] = workers_[w].compressor.compress_step(static_cast<std::uint32_t>(t),
                                                           tensor->data);
      }
      // Exchange wire messages; every worker applies them in rank order.
      DenseMatrix sum(fe_acc[0].tensors()[t]->rows, fe_acc[0].tensors()[t]->cols);
      for (std::size_t w = 0; w < p; ++w) {
        const auto bytes = encode_sparse(messages[w]);
        const SparseGradient decoded = decode_sparse(bytes);
        const auto dense = densify(decoded);
        for (std::size_t i = 0; i < dense.size(); ++i) sum.data[i] += dense[i];
        stats_.bytes_allreduce[w] += bytes.size() * (p - 1);
        sent_entries += decoded.indices.size();
        dense_entries += decoded.dense_len;
      }
      reduced[t] = std::move(sum);
    }
  } else {
    for (std::size_t t = 0; t < n_tensors; ++t) {
      std::vector<DenseMatrix> per_worker;
      per_worker.reserve(p);
      for (std::size_t w = 0; w < p; ++w) per_worker.push_back(*fe_acc[w].tensors()[t]);
      reduced[t] = all_reduce_sum(per_worker, &stats_)[0];
      dense_entries += reduced[t].size() * p;
      sent_entries += reduced[t].size() * p;
    }
  }
  for (std::size_t w = 0; w < p; ++w) stats_.sync_rounds[w] += 1;
  result.achieved_sparsity =
      dense_entries ? 1.0 - static_cast<double>(sent_entries) / dense_entries : 0.0;

  // (8) optimizer: identical fe update on every replica, sparse row update
  // on each fc shard.
  for_each_worker([&](std::size_t w) {
    auto tensors = workers_[w].mlp.tensors();
    for (std::size_t t = 0; t < n_tensors; ++t) {
      float lr_t = step.lr;
      if (opts_.lars) {
        const double wn = frobenius_norm(*tensors[t]);
        const double gn = frobenius_norm(reduced[t]);
        lr_t = static_cast<float>(step.lr * lars_local_lr(opts_.lars_cfg, wn, gn));
      }
      workers_[w].mlp_opt[t].step(*tensors[t], reduced[t], lr_t);
    }
    const auto [begin, end] = topo_.shard_layout.class_range(w);
    // fc gradient w.r.t. the raw rows, through the row normalization.
    DenseMatrix grad_block(workers_[w].fc_block.rows, workers_[w].fc_block.cols);
    std::vector<std::uint32_t> local_rows(worker_cols[w].size());
    for (std::size_t i = 0; i < worker_cols[w].size(); ++i) {
      const std::uint32_t local = worker_cols[w][i] - static_cast<std::uint32_t>(begin);
      local_rows[i] = local;
      // one-row normalize backward
      const float* nh = w_norm[w].normalized.data.data() + local * grad_block.cols;
      const float* g = fc_acc[w].data.data() + i * grad_block.cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < grad_block.cols; ++j)
        dot += static_cast<double>(g[j]) * nh[j];
      const float d = static_cast<float>(dot);
      const float inv = 1.0f / w_norm[w].norms[local];
      float* dst = grad_block.data.data() + local * grad_block.cols;
      for (std::size_t j = 0; j < grad_block.cols; ++j) dst[j] = (g[j] - d * nh[j]) * inv;
    }
    workers_[w].fc_opt.step_rows(workers_[w].fc_block, grad_block, step.lr, local_rows);
  });

  // Timing model for this step.
  PipelineSchedule sched = pipeline_schedule(topo_, micros, step.costs, step.pipelined);
  for (std::size_t w = 0; w < p; ++w) {
    stats_.total_ticks[w] += sched.total_ticks;
    stats_.overlap_ticks[w] += sched.overlap_ticks;
  }
  return result;
}

}  // namespace xcls
