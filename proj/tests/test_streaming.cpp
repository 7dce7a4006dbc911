#include <gtest/gtest.h>

#include <thread>

#include "test_util.hpp"

using namespace schunk;
using namespace schunk::testing;

namespace {

EncoderConfig stream_config(BlockVariant variant, std::size_t n, std::size_t layers) {
  EncoderConfig c;
  c.num_layers = layers;
  c.num_heads = 2;
  c.model_dim = 8;
  c.ffn_dim = 16;
  c.chunk_size = n;
  c.variant = variant;
  c.conv_kernel = 5;
  c.input_feat_dim = 9;
  c.subsample_channels = 3;
  return c;
}

template <class T>
std::shared_ptr<const Model<T>> shared_model(const EncoderConfig& cfg, std::uint64_t seed) {
  auto m = init_model<double>(cfg, 5, seed);
  Rng rng(seed + 7);
  randomize(m, rng);
  return std::make_shared<const Model<T>>(cast_model<T>(m));
}

}  // namespace

TEST(Streaming, FreshState) {
  auto model = shared_model<double>(stream_config(BlockVariant::conformer, 4, 4), 1);
  auto state = stream_open(model);
  EXPECT_EQ(state.frames_emitted(), 0u);
  EXPECT_EQ(state.position_offset(), 0u);
  EXPECT_TRUE(state.hypothesis().empty());
  for (std::size_t l = 0; l < 4; ++l) {
    if (l % 2 == 1) {
      EXPECT_EQ(state.tail_cache(l).shape(), (Shape{2, 8}));
      for (double v : state.tail_cache(l).data()) EXPECT_EQ(v, 0.0);
    } else {
      EXPECT_FALSE(state.tail_cache(l).defined());
    }
    EXPECT_EQ(state.conv_cache(l).shape(), (Shape{4, 8}));
  }
}

TEST(Streaming, MatchesOfflineAt64Bit) {
  Rng rng(2);
  for (auto variant : {BlockVariant::transformer, BlockVariant::conformer})
    for (std::size_t n : {2u, 3u, 4u, 5u, 8u})
      for (std::size_t layers : {2u, 4u}) {
        auto cfg = stream_config(variant, n, layers);
        auto model = shared_model<double>(cfg, 10 * n + layers);
        const std::size_t raw = static_cast<std::size_t>(rng.uniform_int(1, 120));
        auto x = random_tensor({raw, 9}, rng);
        NoGradGuard ng;
        auto offline = encoder_forward(x, model->encoder, cfg);
        auto run = run_stream(model, x, {static_cast<std::size_t>(rng.uniform_int(1, 17))});
        ASSERT_EQ(run.frames, offline.dim(0));
        EXPECT_LE(scaled_max_diff(run.rows, offline.data()), 1e-10)
            << to_string(variant) << " N=" << n << " layers=" << layers << " T=" << raw;
        EXPECT_EQ(run.hypothesis, greedy_decode(ctc_logprobs(offline, model->ctc)));
      }
}

TEST(Streaming, MatchesOfflineAt32Bit) {
  Rng rng(3);
  for (auto variant : {BlockVariant::transformer, BlockVariant::conformer}) {
    auto cfg = stream_config(variant, 4, 4);
    auto model = shared_model<float>(cfg, 3);
    auto x = random_tensor<float>({97, 9}, rng);
    NoGradGuard ng;
    auto offline = encoder_forward(x, model->encoder, cfg).cast<double>();
    auto run = run_stream(model, x, {5});
    EXPECT_LE(scaled_max_diff(run.rows, offline.data()), 1e-5);
  }
}

TEST(Streaming, PushGranularityDoesNotMatter) {
  auto cfg = stream_config(BlockVariant::conformer, 4, 2);
  auto model = shared_model<double>(cfg, 4);
  Rng rng(4);
  auto x = random_tensor({77, 9}, rng);
  auto whole = run_stream(model, x, {77});
  for (const std::vector<std::size_t>& sizes :
       std::vector<std::vector<std::size_t>>{{1}, {3, 0, 11}, {16}, {0, 40}}) {
    auto run = run_stream(model, x, sizes);
    EXPECT_EQ(run.rows, whole.rows);
    EXPECT_EQ(run.hypothesis, whole.hypothesis);
  }
}

TEST(Streaming, EmittedRowsNeverChange) {
  auto cfg = stream_config(BlockVariant::transformer, 4, 4);
  auto model = shared_model<double>(cfg, 5);
  Rng rng(5);
  auto x = random_tensor({90, 9}, rng);
  auto full = run_stream(model, x, {90});
  for (std::size_t prefix : {16u, 17u, 31u, 64u}) {
    // Same prefix, then unrelated frames: rows emitted for the prefix match.
    auto state = stream_open(model);
    auto out = stream_push(state, slice_time(x, 0, prefix));
    ASSERT_GT(out.encoder_out.size(), 0u);
    for (std::size_t i = 0; i < out.encoder_out.size(); ++i) ASSERT_EQ(out.encoder_out[i], full.rows[i]) << prefix;
    auto later = stream_push(state, random_tensor({40, 9}, rng));
    ASSERT_FALSE(later.chunks.empty());
    EXPECT_EQ(later.chunks.front().first_frame * 8, out.encoder_out.size());
  }
}

TEST(Streaming, ChunkEmissionsCarryTimestamps) {
  auto cfg = stream_config(BlockVariant::transformer, 4, 2);
  auto model = shared_model<double>(cfg, 6);
  Rng rng(6);
  auto state = stream_open(model);
  auto out = stream_push(state, random_tensor({60, 9}, rng));
  ASSERT_EQ(out.chunks.size(), 3u);  // chunk 3 needs raw frame 60
  for (std::size_t i = 0; i < out.chunks.size(); ++i) {
    EXPECT_EQ(out.chunks[i].index, i);
    EXPECT_EQ(out.chunks[i].first_frame, 4 * i);
    EXPECT_EQ(out.chunks[i].frames, 4u);
  }
  auto last = stream_close(state);
  ASSERT_EQ(last.chunks.size(), 1u);
  EXPECT_EQ(last.chunks[0].first_frame, 12u);
  EXPECT_EQ(last.chunks[0].frames, 3u);
}

TEST(Streaming, EdgeCases) {
  auto cfg = stream_config(BlockVariant::transformer, 4, 2);
  auto model = shared_model<double>(cfg, 7);
  Rng rng(7);
  {
    auto state = stream_open(model);
    auto out = stream_push(state, Tensor<double>::zeros({0, 9}));
    EXPECT_EQ(out.encoder_out.size(), 0u);
    EXPECT_TRUE(out.chunks.empty());
    auto closed = stream_close(state);
    EXPECT_EQ(closed.encoder_out.size(), 0u);
    EXPECT_TRUE(closed.hypothesis.empty());
    EXPECT_THROW(stream_push(state, Tensor<double>::zeros({1, 9})), UsageError);
    EXPECT_THROW(stream_close(state), UsageError);
  }
  {
    auto x = random_tensor({1, 9}, rng);
    auto run = run_stream(model, x, {1});
    auto offline = encoder_forward(x, model->encoder, cfg);
    ASSERT_EQ(run.frames, 1u);
    EXPECT_LE(scaled_max_diff(run.rows, offline.data()), 1e-12);
  }
  {
    auto state = stream_open(model);
    stream_push(state, random_tensor({60, 9}, rng));  // 15 frames
    stream_push(state, Tensor<double>::zeros({0, 9}));
    EXPECT_EQ(state.frames_emitted(), 12u);
    EXPECT_EQ(stream_close(state).encoder_out.size(), 3u * 8);
  }
  {
    auto state = stream_open(model);
    stream_push(state, random_tensor({64, 9}, rng));  // 16 frames, exact multiple
    EXPECT_EQ(state.frames_emitted(), 16u);
    EXPECT_EQ(stream_close(state).encoder_out.size(), 0u);
  }
  auto state = stream_open(model);
  EXPECT_THROW(stream_push(state, Tensor<double>::zeros({2, 8})), DimensionError);
}

TEST(Streaming, StateSizeIsBounded) {
  for (auto variant : {BlockVariant::transformer, BlockVariant::conformer}) {
    auto cfg = stream_config(variant, 4, 4);
    auto model = shared_model<float>(cfg, 8);
    Rng rng(8);
    auto peak = [&](std::size_t frames) {
      auto state = stream_open(model);
      std::size_t most = 0;
      for (std::size_t t = 0; t < frames; ++t) {
        stream_push(state, random_tensor<float>({1, 9}, rng));
        most = std::max(most, state.state_size());
      }
      return most;
    };
    const std::size_t short_peak = peak(80), long_peak = peak(800);
    EXPECT_EQ(long_peak, short_peak) << to_string(variant);
  }
}

TEST(Streaming, IndependentStreamsShareWeights) {
  auto cfg = stream_config(BlockVariant::conformer, 4, 2);
  auto model = shared_model<float>(cfg, 9);
  Rng rng(9);
  auto a = random_tensor<float>({50, 9}, rng), b = random_tensor<float>({70, 9}, rng);
  auto solo_a = run_stream(model, a, {7}), solo_b = run_stream(model, b, {7});

  StreamRun<float> ta, tb;
  std::thread t1([&] { ta = run_stream(model, a, {3}); });
  std::thread t2([&] { tb = run_stream(model, b, {5}); });
  t1.join();
  t2.join();
  EXPECT_EQ(ta.rows, solo_a.rows);
  EXPECT_EQ(tb.rows, solo_b.rows);

  auto sa = stream_open(model), sb = stream_open(model);
  std::vector<double> rows_a;
  for (std::size_t t = 0; t < 50; t += 10) {
    auto oa = stream_push(sa, slice_time(a, t, t + 10));
    stream_push(sb, slice_time(b, t, t + 10));
    rows_a.insert(rows_a.end(), oa.encoder_out.data().begin(), oa.encoder_out.data().end());
  }
  auto ca = stream_close(sa);
  rows_a.insert(rows_a.end(), ca.encoder_out.data().begin(), ca.encoder_out.data().end());
  EXPECT_EQ(rows_a, solo_a.rows);
}

TEST(Streaming, Latency) {
  EncoderConfig cfg;
  cfg.chunk_size = 16;
  EXPECT_DOUBLE_EQ(measure_latency(cfg).milliseconds, 640.0);
  EXPECT_EQ(measure_latency(cfg).input_frames, 64u);
  EXPECT_DOUBLE_EQ(measure_latency(cfg, 10.0, 1).milliseconds, 160.0);
  cfg.chunk_size = 4;
  EXPECT_DOUBLE_EQ(measure_latency(cfg).milliseconds, 160.0);
  cfg.num_layers = 24;
  EXPECT_DOUBLE_EQ(measure_latency(cfg).milliseconds, 160.0);
}
