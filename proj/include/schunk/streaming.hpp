#pragma once

// Chunk-by-chunk inference. Raw frames are buffered until a whole encoder
// chunk of N frames can be subsampled; the chunk then runs through every
// block using only cached state from earlier chunks:
//
//  - regular blocks need nothing but the chunk itself;
//  - shifted blocks need the last N - s normalized attention inputs of the
//    previous chunk (its part of the shifted chunk that straddles the
//    boundary, s = floor(N/2));
//  - conformer convolutions need the last K - 1 GLU outputs.
//
// Every emitted row equals the matching row of the offline encoder_forward.

#include <memory>
#include <vector>

#include "schunk/model.hpp"

namespace schunk {

struct ChunkEmission {
  std::size_t index = 0;        // encoder chunk number
  std::size_t first_frame = 0;  // encoder frame of the first row
  std::size_t frames = 0;       // real (unpadded) rows
  std::vector<int> symbols;     // symbols first decided in this chunk
};

template <class T>
struct StreamOutput {
  Tensor<T> encoder_out;  // [frames, C]; concatenation of this call's chunks
  std::vector<ChunkEmission> chunks;
  std::vector<int> hypothesis;  // everything decoded so far
};

template <class T>
class StreamState {
 public:
  explicit StreamState(std::shared_ptr<const Model<T>> model) : model_(std::move(model)) {
    const EncoderConfig& cfg = model_->config;
    cfg.validate();
    const std::size_t c = cfg.model_dim, tail = cfg.chunk_size - cfg.chunk_size / 2;
    tail_cache_.resize(cfg.num_layers);
    conv_cache_.resize(cfg.num_layers);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      if (cfg.block_is_shifted(l)) tail_cache_[l] = Tensor<T>::zeros({tail, c});
      if (cfg.variant == BlockVariant::conformer)
        conv_cache_[l] = Tensor<T>::zeros({cfg.conv_kernel - 1, c});
    }
  }

  StreamOutput<T> push(const Tensor<T>& frames) {
    if (closed_) throw UsageError("push on a closed stream");
    const std::size_t feat = model_->config.input_feat_dim;
    if (frames.rank() != 2 || frames.dim(1) != feat) {
      throw DimensionError("stream push: expected [t, " + std::to_string(feat) + "], got " +
                           shape_str(frames.shape()));
    }
    raw_.insert(raw_.end(), frames.data().begin(), frames.data().end());
    raw_received_ += frames.dim(0);
    StreamOutput<T> out;
    const std::size_t n = model_->config.chunk_size;
    // Chunk k is complete once raw frame 4((k+1)N - 1) has arrived.
    while (kSubsampleFactor * ((chunks_done_ + 1) * n - 1) < raw_received_) run_chunk(n, out);
    finish(out);
    return out;
  }

  /// Flushes the partial last chunk (zero-padded, pad-masked).
  StreamOutput<T> close() {
    if (closed_) throw UsageError("stream already closed");
    closed_ = true;
    StreamOutput<T> out;
    const std::size_t total = subsampled_length(raw_received_);
    const std::size_t done = chunks_done_ * model_->config.chunk_size;
    if (total > done) run_chunk(total - done, out);
    finish(out);
    return out;
  }

  bool closed() const { return closed_; }
  std::size_t frames_emitted() const { return frames_emitted_; }
  std::size_t position_offset() const { return chunks_done_ * model_->config.chunk_size; }
  const std::vector<int>& hypothesis() const { return decoder_.hypothesis(); }
  int last_symbol() const { return decoder_.last_symbol(); }
  const Tensor<T>& tail_cache(std::size_t layer) const { return tail_cache_.at(layer); }
  const Tensor<T>& conv_cache(std::size_t layer) const { return conv_cache_.at(layer); }

  /// Scalars held in buffers and caches; bounded independently of length.
  std::size_t state_size() const {
    std::size_t n = raw_.size();
    for (const auto& t : tail_cache_) n += t.defined() ? t.size() : 0;
    for (const auto& t : conv_cache_) n += t.defined() ? t.size() : 0;
    return n;
  }

 private:
  // Encoder frames [a, a + count) from the raw buffer. Conv windows carry
  // their own left context, so the convolutions run unpadded; context before
  // the stream start is zero, as in the offline causal padding.
  Tensor<T> subsample_rows(std::size_t a, std::size_t count) const {
    const EncoderConfig& cfg = model_->config;
    const SubsampleParams<T>& p = model_->encoder.subsample;
    const std::size_t feat = cfg.input_feat_dim;
    const long lo = 4 * static_cast<long>(a) - 6;
    const std::size_t rows = 4 * count + 3;
    std::vector<T> window(rows * feat, T(0));
    for (std::size_t i = 0; i < rows; ++i) {
      const long r = lo + static_cast<long>(i);
      if (r < 0) continue;
      const std::size_t local = static_cast<std::size_t>(r) - raw_start_;
      std::copy_n(raw_.begin() + static_cast<long>(local * feat), feat,
                  window.begin() + static_cast<long>(i * feat));
    }
    Tensor<T> x = Tensor<T>::from({rows, feat, 1}, std::move(window));
    x = relu(conv2d(x, p.conv1_kernel, p.conv1_bias, kSubsampleStride, kSubsampleStride, 0));
    // First-layer outputs at negative time are the second conv's zero padding.
    const long first_j = 2 * static_cast<long>(a) - 2;
    if (first_j < 0) {
      std::vector<T> fixed(x.data().begin(), x.data().end());
      const std::size_t row = x.dim(1) * x.dim(2);
      std::fill_n(fixed.begin(), static_cast<std::size_t>(-first_j) * row, T(0));
      x = Tensor<T>::from(x.shape(), std::move(fixed));
    }
    x = relu(conv2d(x, p.conv2_kernel, p.conv2_bias, kSubsampleStride, kSubsampleStride, 0));
    x = reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
    return p.proj(x);
  }

  void run_chunk(std::size_t real, StreamOutput<T>& out) {
    NoGradGuard no_grad;
    const EncoderConfig& cfg = model_->config;
    const EncoderWeights<T>& w = model_->encoder;
    const std::size_t n = cfg.chunk_size, tail = n - n / 2, c = cfg.model_dim;
    const std::size_t a = chunks_done_ * n;

    Tensor<T> x = add_positional_encoding(subsample_rows(a, real), a);
    if (real < n) x = concat_time<T>({x, Tensor<T>::zeros({n - real, c})});
    const ChunkConfig local = ChunkConfig::make(real, n);
    const std::size_t true_len = a + real;

    for (std::size_t l = 0; l < w.blocks.size(); ++l) {
      const BlockParams<T>& b = w.blocks[l];
      const bool shifted = cfg.block_is_shifted(l);
      auto attend = [&](const Tensor<T>& y) -> Tensor<T> {
        if (!shifted) return chunk_mhsa(y, b.attn, local);
        // Window [previous tail | chunk] in original time a - tail .. a + n.
        Tensor<T> window = concat_time<T>({tail_cache_[l], y});
        const std::size_t m = tail + n;
        std::vector<std::uint8_t> allow(m * m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < m; ++j)
            allow[i * m + j] = shifted_allows(static_cast<long>(a + i) - static_cast<long>(tail),
                                              static_cast<long>(a + j) - static_cast<long>(tail), n,
                                              true_len);
        const MaskRef ref{allow, 1, m, m};
        tail_cache_[l] = slice_time(y, n - tail, n);
        return slice_time(blocked_attention(window, b.attn, m, &ref), tail, m);
      };
      auto depthwise = [&](const Tensor<T>& u) -> Tensor<T> {
        Tensor<T> joined = concat_time<T>({conv_cache_[l], u});
        conv_cache_[l] = slice_time(joined, joined.dim(0) - (cfg.conv_kernel - 1), joined.dim(0));
        return conv1d_depthwise(joined, b.conv.depthwise_kernel, b.conv.depthwise_bias, 0);
      };
      x = run_block(x, b, cfg.variant, attend, depthwise);
    }
    Tensor<T> encoded = slice_time(w.final_norm(x), 0, real);

    ChunkEmission emission;
    emission.index = chunks_done_;
    emission.first_frame = a;
    emission.frames = real;
    emission.symbols = decoder_.consume(ctc_logprobs(encoded, model_->ctc));
    out.chunks.push_back(std::move(emission));
    pieces_.push_back(encoded);

    ++chunks_done_;
    frames_emitted_ += real;
    // Keep raw frames from 4 * next_a - 6 on; that is all later windows read.
    const long keep_from = 4 * static_cast<long>(chunks_done_ * n) - 6;
    if (keep_from > static_cast<long>(raw_start_)) {
      const std::size_t drop = std::min(static_cast<std::size_t>(keep_from) - raw_start_,
                                        raw_.size() / cfg.input_feat_dim);
      raw_.erase(raw_.begin(), raw_.begin() + static_cast<long>(drop * cfg.input_feat_dim));
      raw_start_ += drop;
    }
  }

  void finish(StreamOutput<T>& out) {
    out.encoder_out = pieces_.empty() ? Tensor<T>::zeros({0, model_->config.model_dim})
                                      : concat_time(pieces_);
    pieces_.clear();
    out.hypothesis = decoder_.hypothesis();
  }

  std::shared_ptr<const Model<T>> model_;
  std::vector<T> raw_;           // pending raw frames, row-major [*, F]
  std::size_t raw_start_ = 0;    // global index of raw_ row 0
  std::size_t raw_received_ = 0;
  std::size_t chunks_done_ = 0;
  std::size_t frames_emitted_ = 0;
  std::vector<Tensor<T>> tail_cache_;  // per shifted layer, [N - s, C]
  std::vector<Tensor<T>> conv_cache_;  // per conformer layer, [K-1, C]
  std::vector<Tensor<T>> pieces_;
  GreedyDecoder decoder_;
  bool closed_ = false;
};

template <class T>
StreamState<T> stream_open(std::shared_ptr<const Model<T>> model) {
  return StreamState<T>(std::move(model));
}

template <class T>
StreamOutput<T> stream_push(StreamState<T>& state, const Tensor<T>& frames) {
  return state.push(frames);
}

template <class T>
StreamOutput<T> stream_close(StreamState<T>& state) {
  return state.close();
}

struct LatencyReport {
  std::size_t encoder_frames = 0;
  std::size_t input_frames = 0;
  double milliseconds = 0;
};

/// Structural latency: one chunk of encoder frames, independent of depth.
inline LatencyReport measure_latency(const EncoderConfig& cfg, double frame_shift_ms = 10.0,
                                     std::size_t subsample_factor = kSubsampleFactor) {
  LatencyReport r;
  r.encoder_frames = cfg.chunk_size;
  r.input_frames = cfg.chunk_size * subsample_factor;
  r.milliseconds = static_cast<double>(r.input_frames) * frame_shift_ms;
  return r;
}

}  // namespace schunk
