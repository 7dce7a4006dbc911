#pragma once

// Shifted-chunk encoder: causal convolutional subsampling, sinusoidal
// positions, then pairs of blocks where the first attends within regular
// chunks and the second within shifted chunks.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "schunk/attention.hpp"
#include "schunk/chunk.hpp"
#include "schunk/ops.hpp"
#include "schunk/rng.hpp"

namespace schunk {

enum class BlockVariant { transformer, conformer };

inline const char* to_string(BlockVariant v) {
  return v == BlockVariant::transformer ? "transformer" : "conformer";
}

inline BlockVariant parse_variant(const std::string& s) {
  if (s == "transformer") return BlockVariant::transformer;
  if (s == "conformer") return BlockVariant::conformer;
  throw std::invalid_argument("unknown variant '" + s + "' (transformer|conformer)");
}

/// Subsampling reduces time 4x: two stride-2 convolutions.
inline constexpr std::size_t kSubsampleFactor = 4;
inline constexpr std::size_t kSubsampleKernel = 3;
inline constexpr std::size_t kSubsampleStride = 2;
inline constexpr std::size_t kSubsampleLeftPad = 2;

struct EncoderConfig {
  std::size_t num_layers = 12;
  std::size_t num_heads = 4;
  std::size_t model_dim = 256;
  std::size_t ffn_dim = 2048;
  std::size_t chunk_size = 16;
  BlockVariant variant = BlockVariant::transformer;
  std::size_t conv_kernel = 15;
  std::size_t input_feat_dim = 80;
  std::size_t subsample_channels = 256;
  // false replaces every shifted block with a regular one (chunk-only baseline).
  bool shifted = true;

  void validate() const {
    auto fail = [](const std::string& why) {
      throw std::invalid_argument("invalid encoder config: " + why);
    };
    if (num_layers == 0 || num_layers % 2 != 0)
      fail("num_layers must be a positive even number, got " + std::to_string(num_layers));
    if (num_heads == 0 || model_dim % num_heads != 0)
      fail("model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
           std::to_string(num_heads));
    if (chunk_size < 2) fail("chunk_size must be >= 2");
    if (ffn_dim == 0 || subsample_channels == 0) fail("zero-sized layer");
    if (conv_kernel == 0 || conv_kernel % 2 == 0) fail("conv_kernel must be odd");
    if (input_feat_dim < 7) fail("input_feat_dim must be >= 7 for two 3x3 stride-2 convs");
  }

  std::size_t subsampled_feat_dim() const {
    const std::size_t f1 = (input_feat_dim - kSubsampleKernel) / kSubsampleStride + 1;
    return (f1 - kSubsampleKernel) / kSubsampleStride + 1;
  }

  /// Odd-indexed blocks (the second of each pair) use shifted chunks.
  bool block_is_shifted(std::size_t layer) const { return shifted && layer % 2 == 1; }

  bool operator==(const EncoderConfig&) const = default;
};

/// Encoder frames produced from `frames` input frames: ceil(ceil(T/2)/2).
inline std::size_t subsampled_length(std::size_t frames) {
  const std::size_t once = (frames + 1) / 2;
  return (once + 1) / 2;
}

template <class T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <class T>
struct FeedForwardParams {
  Linear<T> up, down;
  Tensor<T> operator()(const Tensor<T>& x) const { return down(gelu(up(x))); }
};

template <class T>
struct ConvModuleParams {
  Linear<T> pointwise_in;  // C -> 2C, followed by GLU
  Tensor<T> depthwise_kernel;  // [K, C]
  Tensor<T> depthwise_bias;    // [C]
  LayerNormParams<T> norm;
  Linear<T> pointwise_out;
};

template <class T>
struct BlockParams {
  LayerNormParams<T> attn_norm;
  MhsaParams<T> attn;
  LayerNormParams<T> ffn_norm;
  FeedForwardParams<T> ffn;
  // Conformer only.
  LayerNormParams<T> macaron_norm;
  FeedForwardParams<T> macaron_ffn;
  LayerNormParams<T> conv_norm;
  ConvModuleParams<T> conv;
  LayerNormParams<T> out_norm;
};

template <class T>
struct SubsampleParams {
  Tensor<T> conv1_kernel, conv1_bias;  // [3,3,1,Cs], [Cs]
  Tensor<T> conv2_kernel, conv2_bias;  // [3,3,Cs,Cs], [Cs]
  Linear<T> proj;                      // [F2*Cs, C]
};

template <class T>
struct EncoderWeights {
  SubsampleParams<T> subsample;
  std::vector<BlockParams<T>> blocks;
  LayerNormParams<T> final_norm;
};

/// Visits every parameter with a stable dotted name.
template <class T, class F>
void for_each_parameter(EncoderWeights<T>& w, const EncoderConfig& cfg, F&& fn) {
  auto lin = [&](const std::string& name, Linear<T>& l) {
    fn(name + ".weight", l.weight);
    fn(name + ".bias", l.bias);
  };
  auto norm = [&](const std::string& name, LayerNormParams<T>& n) {
    fn(name + ".gamma", n.gamma);
    fn(name + ".beta", n.beta);
  };
  fn("subsample.conv1.kernel", w.subsample.conv1_kernel);
  fn("subsample.conv1.bias", w.subsample.conv1_bias);
  fn("subsample.conv2.kernel", w.subsample.conv2_kernel);
  fn("subsample.conv2.bias", w.subsample.conv2_bias);
  lin("subsample.proj", w.subsample.proj);
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    auto& b = w.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    norm(p + "attn_norm", b.attn_norm);
    lin(p + "attn.query", b.attn.query);
    lin(p + "attn.key", b.attn.key);
    lin(p + "attn.value", b.attn.value);
    lin(p + "attn.output", b.attn.output);
    norm(p + "ffn_norm", b.ffn_norm);
    lin(p + "ffn.up", b.ffn.up);
    lin(p + "ffn.down", b.ffn.down);
    if (cfg.variant == BlockVariant::conformer) {
      norm(p + "macaron_norm", b.macaron_norm);
      lin(p + "macaron_ffn.up", b.macaron_ffn.up);
      lin(p + "macaron_ffn.down", b.macaron_ffn.down);
      norm(p + "conv_norm", b.conv_norm);
      lin(p + "conv.pointwise_in", b.conv.pointwise_in);
      fn(p + "conv.depthwise_kernel", b.conv.depthwise_kernel);
      fn(p + "conv.depthwise_bias", b.conv.depthwise_bias);
      norm(p + "conv.norm", b.conv.norm);
      lin(p + "conv.pointwise_out", b.conv.pointwise_out);
      norm(p + "out_norm", b.out_norm);
    }
  }
  norm("final_norm", w.final_norm);
}

namespace detail {

template <class T>
Tensor<T> uniform_param(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(shape), std::move(data));
}

template <class T>
Linear<T> init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {uniform_param<T>({in, out}, in, rng),
          Tensor<T>::parameter({out}, std::vector<T>(out, T(0)))};
}

template <class T>
LayerNormParams<T> init_norm(std::size_t dim) {
  return {Tensor<T>::parameter({dim}, std::vector<T>(dim, T(1))),
          Tensor<T>::parameter({dim}, std::vector<T>(dim, T(0)))};
}

}  // namespace detail

/// Weights drawn U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero; norms at
/// identity.
template <class T>
EncoderWeights<T> init_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  using detail::init_linear;
  using detail::init_norm;
  using detail::uniform_param;
  const std::size_t c = cfg.model_dim, cs = cfg.subsample_channels;
  EncoderWeights<T> w;
  w.subsample.conv1_kernel = uniform_param<T>({3, 3, 1, cs}, 9, rng);
  w.subsample.conv1_bias = Tensor<T>::parameter({cs}, std::vector<T>(cs, T(0)));
  w.subsample.conv2_kernel = uniform_param<T>({3, 3, cs, cs}, 9 * cs, rng);
  w.subsample.conv2_bias = Tensor<T>::parameter({cs}, std::vector<T>(cs, T(0)));
  w.subsample.proj = init_linear<T>(cfg.subsampled_feat_dim() * cs, c, rng);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    BlockParams<T> b;
    b.attn_norm = init_norm<T>(c);
    b.attn.query = init_linear<T>(c, c, rng);
    b.attn.key = init_linear<T>(c, c, rng);
    b.attn.value = init_linear<T>(c, c, rng);
    b.attn.output = init_linear<T>(c, c, rng);
    b.attn.num_heads = cfg.num_heads;
    b.ffn_norm = init_norm<T>(c);
    b.ffn.up = init_linear<T>(c, cfg.ffn_dim, rng);
    b.ffn.down = init_linear<T>(cfg.ffn_dim, c, rng);
    if (cfg.variant == BlockVariant::conformer) {
      b.macaron_norm = init_norm<T>(c);
      b.macaron_ffn.up = init_linear<T>(c, cfg.ffn_dim, rng);
      b.macaron_ffn.down = init_linear<T>(cfg.ffn_dim, c, rng);
      b.conv_norm = init_norm<T>(c);
      b.conv.pointwise_in = init_linear<T>(c, 2 * c, rng);
      b.conv.depthwise_kernel = uniform_param<T>({cfg.conv_kernel, c}, cfg.conv_kernel, rng);
      b.conv.depthwise_bias = Tensor<T>::parameter({c}, std::vector<T>(c, T(0)));
      b.conv.norm = init_norm<T>(c);
      b.conv.pointwise_out = init_linear<T>(c, c, rng);
      b.out_norm = init_norm<T>(c);
    }
    w.blocks.push_back(std::move(b));
  }
  w.final_norm = init_norm<T>(c);
  return w;
}

// ---------------------------------------------------------------------------
// Frontend

/// Two 3x3 stride-2 convolutions with ReLU, then a projection to model_dim.
/// Time padding is left-only, so output frame t depends on inputs <= 4t.
template <class T>
Tensor<T> subsample(const Tensor<T>& features, const SubsampleParams<T>& p) {
  if (features.rank() != 2) {
    throw DimensionError("subsample: expected [T, F], got " + shape_str(features.shape()));
  }
  if (subsampled_length(features.dim(0)) == 0) {
    throw DimensionError("utterance too short: " + std::to_string(features.dim(0)) +
                         " frames subsample to zero");
  }
  Tensor<T> x = reshape(features, {features.dim(0), features.dim(1), 1});
  x = relu(conv2d(x, p.conv1_kernel, p.conv1_bias, kSubsampleStride, kSubsampleStride,
                  kSubsampleLeftPad));
  x = relu(conv2d(x, p.conv2_kernel, p.conv2_bias, kSubsampleStride, kSubsampleStride,
                  kSubsampleLeftPad));
  x = reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
  return p.proj(x);
}

/// Sinusoidal position value for absolute position `pos` and channel `i`.
inline double sinusoid(std::size_t pos, std::size_t i, std::size_t dim) {
  const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
  const double angle = static_cast<double>(pos) * rate;
  return i % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

/// Adds absolute sinusoidal positions starting at `offset`. Not idempotent:
/// call it exactly once per frame.
template <class T>
Tensor<T> add_positional_encoding(const Tensor<T>& x, std::size_t offset = 0) {
  const std::size_t steps = x.dim(0), dim = x.dim(1);
  std::vector<T> pe(steps * dim);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < dim; ++i) pe[t * dim + i] = static_cast<T>(sinusoid(offset + t, i, dim));
  return add(x, Tensor<T>::from(x.shape(), std::move(pe)));
}

// ---------------------------------------------------------------------------
// Blocks

/// Convolution module: pointwise C->2C, GLU, depthwise conv, LayerNorm,
/// SiLU, pointwise C->C. `depthwise` maps the GLU output to the depthwise
/// output so streaming callers can splice in cached left context.
template <class T, class Depthwise>
Tensor<T> conv_module(const Tensor<T>& x, const ConvModuleParams<T>& p, Depthwise&& depthwise) {
  Tensor<T> u = glu(p.pointwise_in(x));
  Tensor<T> d = depthwise(u);
  return p.pointwise_out(silu(p.norm(d)));
}

/// One block. `attend` receives the normalized attention input.
///
/// transformer:  h = x + MSA(LN(x));  out = h + FFN(LN(h))
/// conformer:    h = x + FFN/2;  h += MSA;  h += Conv;  h += FFN/2;  out = LN(h)
template <class T, class Attend, class Depthwise>
Tensor<T> run_block(const Tensor<T>& x, const BlockParams<T>& b, BlockVariant variant,
                    Attend&& attend, Depthwise&& depthwise) {
  if (variant == BlockVariant::transformer) {
    Tensor<T> h = add(x, attend(b.attn_norm(x)));
    return add(h, b.ffn(b.ffn_norm(h)));
  }
  Tensor<T> h = add(x, scale(b.macaron_ffn(b.macaron_norm(x)), T(0.5)));
  h = add(h, attend(b.attn_norm(h)));
  h = add(h, conv_module(b.conv_norm(h), b.conv, depthwise));
  h = add(h, scale(b.ffn(b.ffn_norm(h)), T(0.5)));
  return b.out_norm(h);
}

/// Offline block over a padded sequence x[L', C].
template <class T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& b, BlockVariant variant,
                        bool shifted, const ChunkConfig& cfg) {
  auto attend = [&](const Tensor<T>& y) {
    return shifted ? shifted_chunk_mhsa(y, b.attn, cfg) : chunk_mhsa(y, b.attn, cfg);
  };
  auto depthwise = [&](const Tensor<T>& u) {
    return conv1d_depthwise_causal(u, b.conv.depthwise_kernel, b.conv.depthwise_bias);
  };
  return run_block(x, b, variant, attend, depthwise);
}

/// A regular-chunk block followed by a shifted-chunk block.
template <class T>
Tensor<T> block_pair_forward(const Tensor<T>& z, const BlockParams<T>& regular,
                             const BlockParams<T>& shifted, BlockVariant variant,
                             const ChunkConfig& cfg) {
  if (z.dim(0) != cfg.padded_len || cfg.padded_len % cfg.chunk_size != 0) {
    throw DimensionError("block_pair_forward: input " + shape_str(z.shape()) +
                         " does not match padded length " + std::to_string(cfg.padded_len));
  }
  return block_forward(block_forward(z, regular, variant, false, cfg), shifted, variant, true, cfg);
}

/// All blocks and the final norm over an already embedded, padded sequence.
template <class T>
Tensor<T> encode_padded(const Tensor<T>& x, const EncoderWeights<T>& w, const EncoderConfig& cfg,
                        const ChunkConfig& chunks) {
  Tensor<T> z = x;
  for (std::size_t i = 0; i < w.blocks.size(); ++i)
    z = block_forward(z, w.blocks[i], cfg.variant, cfg.block_is_shifted(i), chunks);
  return w.final_norm(z);
}

/// features[T, F] -> encoder output [T'', C] (pad rows dropped).
template <class T>
Tensor<T> encoder_forward(const Tensor<T>& features, const EncoderWeights<T>& w,
                          const EncoderConfig& cfg) {
  if (features.rank() != 2 || features.dim(1) != cfg.input_feat_dim) {
    throw DimensionError("encoder_forward: expected [T, " + std::to_string(cfg.input_feat_dim) +
                         "] features, got " + shape_str(features.shape()));
  }
  Tensor<T> x = add_positional_encoding(subsample(features, w.subsample));
  const std::size_t len = x.dim(0);
  const ChunkConfig chunks = ChunkConfig::make(len, cfg.chunk_size);
  if (chunks.pad_len() > 0) {
    x = concat_time<T>({x, Tensor<T>::zeros({chunks.pad_len(), cfg.model_dim})});
  }
  Tensor<T> z = encode_padded(x, w, cfg, chunks);
  return chunks.pad_len() > 0 ? slice_time(z, 0, len) : z;
}

}  // namespace schunk
