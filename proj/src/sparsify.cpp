#include "xcls/sparsify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace xcls {

namespace {

struct Entry {
  float value;
  std::uint64_t index;
};

// Total order for magnitude selection: |value| descending, index ascending.
inline bool precedes(const Entry& a, const Entry& b) {
  const float ma = std::fabs(a.value);
  const float mb = std::fabs(b.value);
  if (ma != mb) return ma > mb;
  return a.index < b.index;
}

void top_into(std::span<const float> t, std::uint64_t base, std::size_t k,
              std::vector<Entry>& out) {
  std::vector<Entry> entries(t.size());
  for (std::size_t i = 0; i < t.size(); ++i)
    entries[i] = {t[i], base + static_cast<std::uint64_t>(i)};
  k = std::min(k, entries.size());
  std::nth_element(entries.begin(), entries.begin() + (k - 1), entries.end(), precedes);
  out.insert(out.end(), entries.begin(), entries.begin() + k);
}

}  // namespace

std::size_t default_chunks(std::size_t len) {
  return std::max<std::size_t>(1, (len + 4095) / 4096);
}

TopkResult topk_divide_conquer(std::span<const float> t, std::size_t k, std::size_t m_chunks) {
  if (k > t.size()) throw KTooLarge("topk: k exceeds tensor length");
  if (k == 0) throw InvalidArgument("topk: k must be positive");
  if (m_chunks == 0) m_chunks = default_chunks(t.size());
  m_chunks = std::min(m_chunks, t.size());

  // Per-chunk top-k, then a second selection over the candidates. Chunk
  // sizes are balanced within one element.
  std::vector<Entry> candidates;
  candidates.reserve(m_chunks * std::min(k, (t.size() + m_chunks - 1) / m_chunks));
  const std::size_t base_len = t.size() / m_chunks;
  const std::size_t rem = t.size() % m_chunks;
  std::size_t begin = 0;
  for (std::size_t c = 0; c < m_chunks; ++c) {
    const std::size_t len = base_len + (c < rem ? 1 : 0);
    top_into(t.subspan(begin, len), begin, k, candidates);
    begin += len;
  }

  if (candidates.size() > k)
    std::nth_element(candidates.begin(), candidates.begin() + (k - 1), candidates.end(),
                     precedes);
  candidates.resize(std::min(candidates.size(), k));
  std::sort(candidates.begin(), candidates.end(), precedes);

  TopkResult r;
  r.indices.reserve(k);
  r.values.reserve(k);
  for (const Entry& e : candidates) {
    r.indices.push_back(e.index);
    r.values.push_back(e.value);
  }
  return r;
}

std::vector<TensorGroup> group_tensors(
    std::span<const std::pair<std::uint32_t, std::size_t>> layers, double max_ratio) {
  if (max_ratio < 1.0) throw InvalidArgument("group_tensors: ratio must be >= 1");
  std::vector<std::pair<std::uint32_t, std::size_t>> sorted(layers.begin(), layers.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });

  std::vector<TensorGroup> groups;
  std::size_t group_min = 0;
  for (const auto& [id, len] : sorted) {
    if (groups.empty() ||
        static_cast<double>(len) > max_ratio * static_cast<double>(group_min)) {
      groups.push_back({});
      group_min = len;
    }
    groups.back().layer_ids.push_back(id);
  }
  return groups;
}

std::size_t selected_count(double sparsity_ratio, std::size_t len) {
  if (len == 0) return 0;
  const double keep = (1.0 - sparsity_ratio) * static_cast<double>(len);
  const std::size_t k = static_cast<std::size_t>(std::ceil(keep));
  return std::clamp<std::size_t>(k, 1, len);
}

CompressionState::CompressionState(double sparsity_ratio, float momentum)
    : sparsity_ratio_(sparsity_ratio), momentum_(momentum) {
  set_sparsity_ratio(sparsity_ratio);
}

void CompressionState::set_sparsity_ratio(double r) {
  if (r < 0.0 || r >= 1.0)
    throw InvalidArgument("CompressionState: sparsity ratio must be in [0, 1)");
  sparsity_ratio_ = r;
}

CompressionState::LayerState& CompressionState::layer(std::uint32_t layer_id,
                                                      std::size_t len) {
  auto [it, inserted] = layers_.try_emplace(layer_id);
  if (inserted) {
    it->second.velocity.assign(len, 0.0f);
    it->second.residual.assign(len, 0.0f);
  } else if (it->second.velocity.size() != len) {
    throw ShapeMismatch("compress_step: layer " + std::to_string(layer_id) +
                        " length changed");
  }
  return it->second;
}

SparseGradient CompressionState::compress_step(std::uint32_t layer_id,
                                               std::span<const float> grad,
                                               std::size_t m_chunks) {
  if (grad.empty()) throw InvalidArgument("compress_step: empty gradient");
  LayerState& st = layer(layer_id, grad.size());

  // Momentum correction: accumulate velocity, fold it into the residual.
  for (std::size_t i = 0; i < grad.size(); ++i) {
    st.velocity[i] = momentum_ * st.velocity[i] + grad[i];
    st.residual[i] += st.velocity[i];
  }

  const std::size_t k = selected_count(sparsity_ratio_, grad.size());
  TopkResult top = topk_divide_conquer(st.residual, k, m_chunks);

  SparseGradient s;
  s.layer_id = layer_id;
  s.dense_len = grad.size();
  std::vector<std::size_t> order(top.indices.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return top.indices[a] < top.indices[b]; });
  s.indices.reserve(order.size());
  s.values.reserve(order.size());
  for (std::size_t i : order) {
    s.indices.push_back(top.indices[i]);
    s.values.push_back(top.values[i]);
  }

  // Factor masking: emitted positions restart both accumulators.
  for (std::uint64_t idx : s.indices) {
    st.residual[idx] = 0.0f;
    st.velocity[idx] = 0.0f;
  }
  return s;
}

std::span<const float> CompressionState::residual(std::uint32_t layer_id) const {
  auto it = layers_.find(layer_id);
  if (it == layers_.end()) return {};
  return it->second.residual;
}

std::span<const float> CompressionState::velocity(std::uint32_t layer_id) const {
  auto it = layers_.find(layer_id);
  if (it == layers_.end()) return {};
  return it->second.velocity;
}

std::vector<float> densify(const SparseGradient& s) {
  std::vector<float> dense(s.dense_len, 0.0f);
  if (s.indices.size() != s.values.size())
    throw ShapeMismatch("densify: index/value length mismatch");
  for (std::size_t i = 0; i < s.indices.size(); ++i) {
    if (s.indices[i] >= s.dense_len) throw ShapeMismatch("densify: index out of range");
    dense[s.indices[i]] = s.values[i];
  }
  return dense;
}

namespace {

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
T read_le(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw IoError("sparse message truncated");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(bytes[pos + i]) << (8 * i);
  pos += sizeof(T);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_sparse(const SparseGradient& s) {
  std::vector<std::uint8_t> out;
  out.reserve(wire_size(s));
  append_le<std::uint32_t>(out, s.layer_id);
  append_le<std::uint64_t>(out, s.dense_len);
  append_le<std::uint64_t>(out, s.indices.size());
  for (std::size_t i = 0; i < s.indices.size(); ++i) {
    append_le<std::uint64_t>(out, s.indices[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &s.values[i], 4);
    append_le<std::uint32_t>(out, bits);
  }
  return out;
}

SparseGradient decode_sparse(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  SparseGradient s;
  s.layer_id = read_le<std::uint32_t>(bytes, pos);
  s.dense_len = read_le<std::uint64_t>(bytes, pos);
  const std::uint64_t count = read_le<std::uint64_t>(bytes, pos);
  s.indices.reserve(count);
  s.values.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    s.indices.push_back(read_le<std::uint64_t>(bytes, pos));
    const std::uint32_t bits = read_le<std::uint32_t>(bytes, pos);
    float v;
    std::memcpy(&v, &bits, 4);
    s.values.push_back(v);
  }
  return s;
}

std::size_t wire_size(const SparseGradient& s) {
  return 4 + 8 + 8 + s.indices.size() * (8 + 4);
}

}  // namespace xcls
