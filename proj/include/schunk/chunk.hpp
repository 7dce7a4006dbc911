#pragma once

// Chunk partitioning geometry: padding, regular and shifted chunk indices,
// cyclic-shift batching and the two attention masks.
//
// Time is measured in encoder frames. A sequence of true length L is padded
// to L' (a multiple of the chunk size N). Regular chunk c covers
// [cN, cN + N). Shifted chunk j covers [jN - s, jN - s + N) clipped to
// [0, L'), with s = floor(N / 2); the first and last shifted chunks are
// therefore short. Rolling the padded sequence head-to-tail by s frames
// lines the shifted chunks up with N-frame blocks, except that the last
// block holds the tail chunk followed by the head chunk (the "wrap" block).

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <vector>

#include "schunk/ops.hpp"

namespace schunk {

struct ChunkConfig {
  std::size_t chunk_size = 16;
  std::size_t shift = 8;
  std::size_t padded_len = 16;
  std::size_t true_len = 16;

  /// Geometry for `true_len` frames split into `chunk_size`-frame chunks.
  static ChunkConfig make(std::size_t true_len, std::size_t chunk_size) {
    if (chunk_size < 2) {
      throw std::invalid_argument("chunk size must be >= 2, got " +
                                  std::to_string(chunk_size));
    }
    if (true_len < 1) throw std::invalid_argument("sequence length must be >= 1");
    ChunkConfig cfg;
    cfg.chunk_size = chunk_size;
    cfg.shift = chunk_size / 2;
    cfg.true_len = true_len;
    cfg.padded_len = (true_len + chunk_size - 1) / chunk_size * chunk_size;
    return cfg;
  }

  std::size_t num_chunks() const { return padded_len / chunk_size; }
  std::size_t pad_len() const { return padded_len - true_len; }

  /// Head-to-tail roll that aligns shifted chunks to N-blocks. Shifted
  /// chunks start at N - s + jN, so this is N - s; equal to s for even N.
  std::size_t roll() const { return chunk_size - shift; }
};

struct PaddedLength {
  std::size_t padded_len;
  std::size_t pad_len;
  bool operator==(const PaddedLength&) const = default;
};

inline PaddedLength pad_to_chunk_multiple(std::size_t len, std::size_t chunk_size) {
  const ChunkConfig cfg = ChunkConfig::make(len, chunk_size);
  return {cfg.padded_len, cfg.pad_len()};
}

inline std::size_t orig_chunk_index(std::size_t t, std::size_t chunk_size) {
  return t / chunk_size;
}

inline std::size_t shifted_chunk_index(std::size_t t, std::size_t chunk_size) {
  return (t + chunk_size / 2) / chunk_size;
}

/// Streaming rule for shifted-chunk attention on original time indices:
/// same shifted chunk, key's regular chunk not after the query's. Padded
/// frames (>= true_len) only see themselves; unpadded frames never see them.
inline bool shifted_allows(long query, long key, std::size_t chunk_size,
                           std::size_t true_len) {
  if (query < 0 || key < 0) return query == key;
  const auto q = static_cast<std::size_t>(query);
  const auto k = static_cast<std::size_t>(key);
  if (q >= true_len || k >= true_len) return q == k;
  return shifted_chunk_index(q, chunk_size) == shifted_chunk_index(k, chunk_size) &&
         orig_chunk_index(k, chunk_size) <= orig_chunk_index(q, chunk_size);
}

/// Regular chunk rule: same regular chunk, bidirectional, with the pad rule.
inline bool regular_allows(std::size_t q, std::size_t k, std::size_t chunk_size,
                           std::size_t true_len) {
  if (q >= true_len || k >= true_len) return q == k;
  return orig_chunk_index(q, chunk_size) == orig_chunk_index(k, chunk_size);
}

enum class MaskKind { regular, shifted };

inline const char* to_string(MaskKind kind) {
  return kind == MaskKind::regular ? "regular" : "shifted";
}

/// Block-factored allowance: one N x N block per batched chunk. For
/// MaskKind::shifted the blocks are in rolled coordinates, where rolled
/// position p holds original frame (p + r) mod L', r = roll().
class AttentionMask {
 public:
  AttentionMask(MaskKind kind, ChunkConfig cfg)
      : kind_(kind),
        cfg_(cfg),
        blocks_(cfg.num_chunks() * cfg.chunk_size * cfg.chunk_size, 0) {
    const std::size_t n = cfg.chunk_size;
    for (std::size_t c = 0; c < cfg.num_chunks(); ++c)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t p = c * n + i, r = c * n + j;
          const bool ok = kind == MaskKind::regular
                              ? regular_allows(p, r, n, cfg.true_len)
                              : shifted_allows(static_cast<long>(original_time(p)),
                                               static_cast<long>(original_time(r)), n,
                                               cfg.true_len);
          blocks_[(c * n + i) * n + j] = ok ? 1 : 0;
        }
  }

  MaskKind kind() const { return kind_; }
  const ChunkConfig& config() const { return cfg_; }

  /// Original frame held at batched position p.
  std::size_t original_time(std::size_t p) const {
    if (kind_ == MaskKind::regular) return p;
    return (p + cfg_.roll()) % cfg_.padded_len;
  }

  /// Batched position holding original frame t.
  std::size_t batched_position(std::size_t t) const {
    if (kind_ == MaskKind::regular) return t;
    return (t + cfg_.padded_len - cfg_.roll()) % cfg_.padded_len;
  }

  /// Allowance in batched coordinates; false across batched chunks.
  bool allow(std::size_t q, std::size_t k) const {
    const std::size_t n = cfg_.chunk_size;
    if (q / n != k / n) return false;
    return blocks_[(q / n * n + q % n) * n + k % n] != 0;
  }

  /// Allowance between original frames.
  bool allow_original(std::size_t tq, std::size_t tk) const {
    return allow(batched_position(tq), batched_position(tk));
  }

  std::size_t allowed_keys(std::size_t q) const {
    std::size_t count = 0;
    const std::size_t n = cfg_.chunk_size, base = q / n * n;
    for (std::size_t k = base; k < base + n; ++k) count += allow(q, k);
    return count;
  }

  MaskRef ref() const {
    return {blocks_, cfg_.num_chunks(), cfg_.chunk_size, cfg_.chunk_size};
  }

  /// Rows are queries, '#' allowed, '.' masked, in original time.
  std::string ascii() const {
    std::string out;
    for (std::size_t q = 0; q < cfg_.padded_len; ++q) {
      for (std::size_t k = 0; k < cfg_.padded_len; ++k) out += allow_original(q, k) ? '#' : '.';
      out += '\n';
    }
    return out;
  }

 private:
  MaskKind kind_;
  ChunkConfig cfg_;
  std::vector<std::uint8_t> blocks_;
};

inline AttentionMask build_regular_mask(const ChunkConfig& cfg) {
  return AttentionMask(MaskKind::regular, cfg);
}

inline AttentionMask build_shifted_mask(const ChunkConfig& cfg) {
  return AttentionMask(MaskKind::shifted, cfg);
}

/// Process-wide cache of masks keyed by (kind, N, L', L). Lookups take a
/// shared lock; insertion is exclusive.
class MaskCache {
 public:
  static MaskCache& instance() {
    static MaskCache cache;
    return cache;
  }

  std::shared_ptr<const AttentionMask> get(MaskKind kind, const ChunkConfig& cfg) {
    const Key key{kind, cfg.chunk_size, cfg.padded_len, cfg.true_len};
    {
      std::shared_lock lock(mutex_);
      if (auto it = masks_.find(key); it != masks_.end()) return it->second;
    }
    auto mask = std::make_shared<const AttentionMask>(kind, cfg);
    std::unique_lock lock(mutex_);
    return masks_.emplace(key, std::move(mask)).first->second;
  }

  void clear() {
    std::unique_lock lock(mutex_);
    masks_.clear();
  }

 private:
  using Key = std::tuple<MaskKind, std::size_t, std::size_t, std::size_t>;
  std::shared_mutex mutex_;
  std::map<Key, std::shared_ptr<const AttentionMask>> masks_;
};

enum class ShiftDirection { forward, reverse };

/// Forward rolls the head N - s frames (s for even N) to the tail so shifted
/// chunks become N-aligned blocks; reverse undoes it exactly.
template <class T>
Tensor<T> cyclic_shift(const Tensor<T>& x, ShiftDirection direction, const ChunkConfig& cfg) {
  if (x.rank() < 1 || x.dim(0) % cfg.chunk_size != 0) {
    throw DimensionError("cyclic_shift: time length of " + shape_str(x.shape()) +
                         " is not a multiple of chunk size " + std::to_string(cfg.chunk_size));
  }
  const long r = static_cast<long>(cfg.roll());
  return roll_time(x, direction == ShiftDirection::forward ? -r : r);
}

}  // namespace schunk
