#include "xcls/knn_softmax.hpp"

#include <algorithm>
#include <random>
#include <unordered_map>

namespace xcls {

namespace {

struct CandidateRank {
  std::uint32_t best_rank = UINT32_MAX;
  std::uint32_t occurrences = 0;
};

// Shared tail of Algorithm 1 once the per-label lists have been pooled.
ActiveSet finish_selection(std::unordered_map<std::uint32_t, CandidateRank>&& pool,
                           std::span<const std::uint32_t> labels,
                           const SelectionConfig& cfg, std::size_t n_total) {
  std::vector<std::uint32_t> distinct_labels(labels.begin(), labels.end());
  std::sort(distinct_labels.begin(), distinct_labels.end());
  distinct_labels.erase(std::unique(distinct_labels.begin(), distinct_labels.end()),
                        distinct_labels.end());
  if (cfg.m_active < distinct_labels.size())
    throw MTooSmall("select_active_classes: M=" + std::to_string(cfg.m_active) +
                    " is below the " + std::to_string(distinct_labels.size()) +
                    " distinct batch labels");
  if (cfg.m_active > n_total)
    throw InvalidArgument("select_active_classes: M exceeds the class count");

  std::vector<std::uint32_t> selected;
  if (pool.size() <= cfg.m_active) {
    selected.reserve(cfg.m_active);
    for (const auto& [cls, _] : pool) selected.push_back(cls);
    std::sort(selected.begin(), selected.end());
    if (pool.size() < cfg.m_active) {
      // Pad with uniform draws from the complement (partial Fisher-Yates so
      // the draw stays uniform even when it must exhaust the complement).
      std::vector<std::uint32_t> complement;
      complement.reserve(n_total - pool.size());
      for (std::uint32_t c = 0; c < n_total; ++c)
        if (!pool.contains(c)) complement.push_back(c);
      std::mt19937_64 rng(cfg.rng_seed);
      std::size_t need = cfg.m_active - pool.size();
      for (std::size_t i = 0; i < need; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, complement.size() - 1);
        std::swap(complement[i], complement[pick(rng)]);
        selected.push_back(complement[i]);
      }
      std::sort(selected.begin(), selected.end());
    }
  } else {
    // Over-full pool: labels first, then the best-ranked candidates.
    selected = distinct_labels;
    std::vector<std::pair<std::uint32_t, CandidateRank>> rest;
    rest.reserve(pool.size());
    for (const auto& [cls, rank] : pool) {
      if (!std::binary_search(distinct_labels.begin(), distinct_labels.end(), cls))
        rest.emplace_back(cls, rank);
    }
    std::sort(rest.begin(), rest.end(), [](const auto& a, const auto& b) {
      if (a.second.best_rank != b.second.best_rank)
        return a.second.best_rank < b.second.best_rank;
      if (a.second.occurrences != b.second.occurrences)
        return a.second.occurrences > b.second.occurrences;
      return a.first < b.first;
    });
    const std::size_t take = cfg.m_active - selected.size();
    for (std::size_t i = 0; i < take && i < rest.size(); ++i)
      selected.push_back(rest[i].first);
    std::sort(selected.begin(), selected.end());
  }

  ActiveSet active;
  active.class_indices = std::move(selected);
  active.contains_all_labels =
      std::all_of(distinct_labels.begin(), distinct_labels.end(), [&](std::uint32_t y) {
        return std::binary_search(active.class_indices.begin(), active.class_indices.end(), y);
      });
  return active;
}

}  // namespace

std::optional<std::size_t> ActiveSet::position_of(std::uint32_t cls) const {
  auto it = std::lower_bound(class_indices.begin(), class_indices.end(), cls);
  if (it == class_indices.end() || *it != cls) return std::nullopt;
  return static_cast<std::size_t>(it - class_indices.begin());
}

ActiveSet full_active_set(std::size_t n_total) {
  ActiveSet a;
  a.class_indices.resize(n_total);
  for (std::size_t i = 0; i < n_total; ++i)
    a.class_indices[i] = static_cast<std::uint32_t>(i);
  a.contains_all_labels = true;
  return a;
}

ActiveSet select_active_classes(const KnnGraph& g, std::span<const std::uint32_t> labels,
                                const SelectionConfig& cfg, std::size_t n_total) {
  if (g.num_classes != n_total)
    throw ShapeMismatch("select_active_classes: graph size disagrees with class count");
  std::unordered_map<std::uint32_t, CandidateRank> pool;
  for (std::uint32_t y : labels) {
    if (y >= n_total) throw LabelOutOfRange("select_active_classes: label out of range");
    const auto list = g.neighbors(y);
    for (std::size_t r = 0; r < list.size(); ++r) {
      auto& cand = pool[list[r]];
      cand.best_rank = std::min(cand.best_rank, static_cast<std::uint32_t>(r));
      ++cand.occurrences;
    }
  }
  return finish_selection(std::move(pool), labels, cfg, n_total);
}

ActiveSet select_active_classes(std::span<const CompressedKnnGraph> shards,
                                std::span<const std::uint32_t> labels,
                                const SelectionConfig& cfg, std::size_t n_total) {
  if (shards.empty()) throw InvalidArgument("select_active_classes: no shards");
  std::unordered_map<std::uint32_t, CandidateRank> pool;
  for (std::uint32_t y : labels) {
    if (y >= n_total) throw LabelOutOfRange("select_active_classes: label out of range");
    for (const auto& cg : shards) {
      const auto slice = cg.slice(y);
      for (std::size_t r = 0; r < slice.size(); ++r) {
        auto& cand = pool[slice[r]];
        cand.best_rank = std::min(cand.best_rank, static_cast<std::uint32_t>(r));
        ++cand.occurrences;
      }
    }
  }
  return finish_selection(std::move(pool), labels, cfg, n_total);
}

LossAndGrad knn_softmax_forward_backward(const DenseMatrix& x_norm, const DenseMatrix& w_norm,
                                         std::span<const std::uint32_t> labels,
                                         const ActiveSet& active, float scale) {
  const std::size_t m = x_norm.rows;
  const std::size_t n = w_norm.rows;
  const std::size_t m_act = active.size();
  if (x_norm.cols != w_norm.cols) throw ShapeMismatch("knn_softmax: feature dims disagree");
  if (labels.size() != m) throw ShapeMismatch("knn_softmax: one label per row required");
  if (m_act == 0) throw InvalidArgument("knn_softmax: empty active set");

  // Gather the active weight rows (active indices are sorted).
  DenseMatrix w_active(m_act, w_norm.cols);
  for (std::size_t i = 0; i < m_act; ++i) {
    const std::uint32_t cls = active.class_indices[i];
    if (cls >= n) throw LabelOutOfRange("knn_softmax: active class out of range");
    std::copy_n(w_norm.data.data() + cls * w_norm.cols, w_norm.cols,
                w_active.data.data() + i * w_norm.cols);
  }

  std::vector<std::uint32_t> remapped(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto pos = active.position_of(labels[i]);
    if (!pos)
      throw LabelNotActive("knn_softmax: label " + std::to_string(labels[i]) +
                           " missing from the active set");
    remapped[i] = static_cast<std::uint32_t>(*pos);
  }

  DenseMatrix logits = matmul(x_norm, w_active, /*transpose_b=*/true);
  for (float& v : logits.data) v *= scale;

  LossAndGrad sm = softmax_xent(logits, remapped);

  LossAndGrad out;
  out.loss = sm.loss;
  out.grad_logits = std::move(sm.grad_logits);

  // d logits / d x_norm carries the scale; same for the weight side.
  out.grad_features = matmul(out.grad_logits, w_active);
  for (float& v : out.grad_features.data) v *= scale;

  DenseMatrix grad_w_active = matmul_at(out.grad_logits, x_norm);
  out.grad_weights = DenseMatrix(n, w_norm.cols);
  for (std::size_t i = 0; i < m_act; ++i) {
    const std::uint32_t cls = active.class_indices[i];
    float* dst = out.grad_weights.data.data() + cls * w_norm.cols;
    const float* src = grad_w_active.data.data() + i * w_norm.cols;
    for (std::size_t j = 0; j < w_norm.cols; ++j) dst[j] = src[j] * scale;
  }
  return out;
}

LossAndGrad full_softmax_forward_backward(const DenseMatrix& x_norm, const DenseMatrix& w_norm,
                                          std::span<const std::uint32_t> labels, float scale) {
  return knn_softmax_forward_backward(x_norm, w_norm, labels, full_active_set(w_norm.rows),
                                      scale);
}

}  // namespace xcls
