#pragma once

// Multi-head self-attention evaluated block-wise under a mask, plus the
// cost model for global and chunked attention.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "schunk/chunk.hpp"
#include "schunk/ops.hpp"

namespace schunk {

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <class T>
struct MhsaParams {
  Linear<T> query, key, value, output;
  std::size_t num_heads = 4;

  std::size_t model_dim() const { return query.weight.dim(0); }
  std::size_t head_dim() const { return model_dim() / num_heads; }
};

/// Attention cost split the same way as the complexity formulas:
/// 4LC^2 for the four projections and the L-dependent score/context term.
/// Values are multiply-accumulate counts; softmax is not counted.
struct FlopReport {
  std::uint64_t projection = 0;
  std::uint64_t score_context = 0;
  std::uint64_t total = 0;

  bool operator==(const FlopReport&) const = default;
};

inline FlopReport flops_global(std::uint64_t len, std::uint64_t dim) {
  FlopReport r{4 * len * dim * dim, 2 * len * len * dim, 0};
  r.total = r.projection + r.score_context;
  return r;
}

inline FlopReport flops_chunked(std::uint64_t len, std::uint64_t dim, std::uint64_t chunk) {
  FlopReport r{4 * len * dim * dim, 2 * chunk * len * dim, 0};
  r.total = r.projection + r.score_context;
  return r;
}

/// Multiply-accumulates measured while an attention call ran.
struct MacCount {
  std::uint64_t projection = 0;
  std::uint64_t score_context = 0;
  std::uint64_t total() const { return projection + score_context; }
};

/// Attention over `groups` independent blocks of `block` consecutive rows of
/// x[groups * block, C]. `mask`, when given, carries one block x block grid
/// per group. Each head's scores are scaled by 1/sqrt(head_dim).
template <class T>
Tensor<T> blocked_attention(const Tensor<T>& x, const MhsaParams<T>& params,
                            std::size_t block, const MaskRef* mask,
                            MacCount* macs = nullptr) {
  const std::size_t rows = x.dim(0), dim = x.dim(1), heads = params.num_heads;
  if (x.rank() != 2 || dim != params.model_dim() || heads == 0 || dim % heads != 0 ||
      block == 0 || rows % block != 0) {
    throw DimensionError("attention: input " + shape_str(x.shape()) + " with model dim " +
                         std::to_string(params.model_dim()) + ", " +
                         std::to_string(heads) + " heads, block " + std::to_string(block));
  }
  const std::size_t groups = rows / block, hd = dim / heads;
  std::uint64_t& counter = mac_counter();
  const std::uint64_t start = counter;

  auto split_heads = [&](const Tensor<T>& t) {
    return permute(reshape(t, {groups, block, heads, hd}), {0, 2, 1, 3});
  };
  Tensor<T> q = split_heads(params.query(x));
  Tensor<T> k = split_heads(params.key(x));
  Tensor<T> v = split_heads(params.value(x));
  const std::uint64_t after_proj = counter;

  Tensor<T> scores = scale(matmul(q, transpose_last2(k)), T(1) / std::sqrt(T(hd)));
  Tensor<T> probs = softmax_lastdim(scores, mask);
  Tensor<T> context = matmul(probs, v);
  const std::uint64_t after_ctx = counter;

  Tensor<T> merged = reshape(permute(context, {0, 2, 1, 3}), {rows, dim});
  Tensor<T> out = params.output(merged);
  if (macs) {
    macs->score_context += after_ctx - after_proj;
    macs->projection += (after_proj - start) + (counter - after_ctx);
  }
  return out;
}

/// Full self-attention over every frame; the quadratic reference.
template <class T>
Tensor<T> global_mhsa(const Tensor<T>& x, const MhsaParams<T>& params,
                      MacCount* macs = nullptr) {
  return blocked_attention(x, params, x.dim(0), nullptr, macs);
}

/// Attention restricted to regular chunks (C-MSA).
template <class T>
Tensor<T> chunk_mhsa(const Tensor<T>& x, const MhsaParams<T>& params,
                     const AttentionMask& mask, const ChunkConfig& cfg,
                     MacCount* macs = nullptr) {
  if (mask.kind() != MaskKind::regular) {
    throw std::invalid_argument("chunk_mhsa needs a regular mask");
  }
  if (x.dim(0) != cfg.padded_len || mask.config().padded_len != cfg.padded_len ||
      mask.config().chunk_size != cfg.chunk_size) {
    throw DimensionError("chunk_mhsa: input " + shape_str(x.shape()) +
                         " does not match padded length " + std::to_string(cfg.padded_len));
  }
  const MaskRef ref = mask.ref();
  return blocked_attention(x, params, cfg.chunk_size, &ref, macs);
}

template <class T>
Tensor<T> chunk_mhsa(const Tensor<T>& x, const MhsaParams<T>& params,
                     const ChunkConfig& cfg, MacCount* macs = nullptr) {
  auto mask = MaskCache::instance().get(MaskKind::regular, cfg);
  return chunk_mhsa(x, params, *mask, cfg, macs);
}

/// Attention over shifted chunks (SC-MSA), batched by cyclic shift: roll the
/// head to the tail, attend inside N-frame blocks under the shifted mask,
/// roll back.
template <class T>
Tensor<T> shifted_chunk_mhsa(const Tensor<T>& x, const MhsaParams<T>& params,
                             const ChunkConfig& cfg, MacCount* macs = nullptr) {
  if (x.dim(0) != cfg.padded_len) {
    throw DimensionError("shifted_chunk_mhsa: input " + shape_str(x.shape()) +
                         " does not match padded length " + std::to_string(cfg.padded_len));
  }
  auto mask = MaskCache::instance().get(MaskKind::shifted, cfg);
  const MaskRef ref = mask->ref();
  Tensor<T> rolled = cyclic_shift(x, ShiftDirection::forward, cfg);
  Tensor<T> attended = blocked_attention(rolled, params, cfg.chunk_size, &ref, macs);
  return cyclic_shift(attended, ShiftDirection::reverse, cfg);
}

}  // namespace schunk
