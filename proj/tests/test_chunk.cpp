#include <gtest/gtest.h>

#include <thread>

#include "test_util.hpp"

using namespace schunk;
using namespace schunk::testing;

TEST(Chunk, PadToChunkMultiple) {
  EXPECT_EQ(pad_to_chunk_multiple(10, 4), (PaddedLength{12, 2}));
  EXPECT_EQ(pad_to_chunk_multiple(16, 16), (PaddedLength{16, 0}));
  EXPECT_EQ(pad_to_chunk_multiple(1, 16), (PaddedLength{16, 15}));
  EXPECT_THROW(pad_to_chunk_multiple(0, 4), std::invalid_argument);
  EXPECT_THROW(pad_to_chunk_multiple(8, 1), std::invalid_argument);
}

TEST(Chunk, OddChunkSizeUsesFloorShift) {
  EXPECT_EQ(ChunkConfig::make(10, 5).shift, 2u);
}

TEST(Chunk, OrigChunkIndex) {
  EXPECT_EQ(orig_chunk_index(0, 4), 0u);
  EXPECT_EQ(orig_chunk_index(3, 4), 0u);
  EXPECT_EQ(orig_chunk_index(4, 4), 1u);
}

TEST(Chunk, ShiftedChunkIndex) {
  const std::vector<std::size_t> expected = {0, 0, 1, 1, 1, 1, 2, 2};
  for (std::size_t t = 0; t < 8; ++t) EXPECT_EQ(shifted_chunk_index(t, 4), expected[t]) << t;
}

TEST(Chunk, RegularMaskExamples) {
  EXPECT_EQ(build_regular_mask(ChunkConfig::make(4, 4)).ascii(), "####\n####\n####\n####\n");
  EXPECT_EQ(build_regular_mask(ChunkConfig::make(8, 4)).ascii(),
            "####....\n####....\n####....\n####....\n"
            "....####\n....####\n....####\n....####\n");
  EXPECT_EQ(build_regular_mask(ChunkConfig::make(3, 4)).ascii(), "###.\n###.\n###.\n...#\n");
}

TEST(Chunk, ShiftedMaskWorkedExample) {
  // Frames A..H; rolled order [C D E F | G H A B].
  const AttentionMask m = build_shifted_mask(ChunkConfig::make(8, 4));
  auto keys = [&](char q) {
    std::string out;
    for (char k = 'A'; k <= 'H'; ++k)
      if (m.allow_original(q - 'A', k - 'A')) out += k;
    return out;
  };
  EXPECT_EQ(keys('C'), "CD");
  EXPECT_EQ(keys('D'), "CD");
  EXPECT_EQ(keys('E'), "CDEF");
  EXPECT_EQ(keys('F'), "CDEF");
  EXPECT_EQ(keys('G'), "GH");
  EXPECT_EQ(keys('H'), "GH");
  EXPECT_EQ(keys('A'), "AB");
  EXPECT_EQ(keys('B'), "AB");
  EXPECT_EQ(m.batched_position(2), 0u);
  EXPECT_EQ(m.original_time(4), 6u);
}

TEST(Chunk, CyclicShiftExamples) {
  auto letters = Tensor<double>::from({8, 1}, {0, 1, 2, 3, 4, 5, 6, 7});
  const auto cfg = ChunkConfig::make(8, 4);
  auto fwd = cyclic_shift(letters, ShiftDirection::forward, cfg);
  EXPECT_EQ(std::vector<double>(fwd.data().begin(), fwd.data().end()),
            (std::vector<double>{2, 3, 4, 5, 6, 7, 0, 1}));
  auto back = cyclic_shift(fwd, ShiftDirection::reverse, cfg);
  EXPECT_EQ(max_abs_diff(back, letters), 0.0);

  auto four = Tensor<double>::from({4, 1}, {0, 1, 2, 3});
  auto two = cyclic_shift(four, ShiftDirection::forward, ChunkConfig::make(4, 2));
  EXPECT_EQ(std::vector<double>(two.data().begin(), two.data().end()), (std::vector<double>{1, 2, 3, 0}));

  EXPECT_THROW(cyclic_shift(Tensor<double>::zeros({6, 1}), ShiftDirection::forward, cfg), DimensionError);
}

namespace {

template <class F>
void for_each_geometry(F&& f) {
  for (std::size_t n : {2u, 3u, 4u, 5u, 8u, 16u})
    for (std::size_t padded = n; padded <= 8 * n; padded += n)
      for (std::size_t len = padded - n + 1; len <= padded; ++len) f(ChunkConfig::make(len, n));
}

}  // namespace

TEST(ChunkProperties, ShiftedMaskNeverLooksPastOwnChunk) {
  for_each_geometry([](const ChunkConfig& cfg) {
    const AttentionMask m = build_shifted_mask(cfg);
    for (std::size_t q = 0; q < cfg.padded_len; ++q)
      for (std::size_t k = 0; k < cfg.padded_len; ++k)
        if (m.allow(q, k)) {
          ASSERT_LE(orig_chunk_index(m.original_time(k), cfg.chunk_size),
                    orig_chunk_index(m.original_time(q), cfg.chunk_size));
        }
  });
}

TEST(ChunkProperties, RegularMaskSymmetricOnUnpaddedFrames) {
  for_each_geometry([](const ChunkConfig& cfg) {
    const AttentionMask m = build_regular_mask(cfg);
    for (std::size_t q = 0; q < cfg.true_len; ++q)
      for (std::size_t k = 0; k < cfg.true_len; ++k) ASSERT_EQ(m.allow(q, k), m.allow(k, q));
  });
}

TEST(ChunkProperties, ClosureKeyCountAndPadSafety) {
  for_each_geometry([](const ChunkConfig& cfg) {
    for (const AttentionMask& m : {build_regular_mask(cfg), build_shifted_mask(cfg)}) {
      const std::size_t n = cfg.chunk_size;
      for (std::size_t tq = 0; tq < cfg.padded_len; ++tq) {
        std::size_t count = 0;
        for (std::size_t tk = 0; tk < cfg.padded_len; ++tk) {
          if (!m.allow_original(tq, tk)) continue;
          ++count;
          ASSERT_EQ(m.batched_position(tq) / n, m.batched_position(tk) / n);
          if (tq < cfg.true_len) {
            ASSERT_LT(tk, cfg.true_len);
          }
        }
        ASSERT_LE(count, n);
        ASSERT_GE(count, 1u);
        ASSERT_EQ(count, m.allowed_keys(m.batched_position(tq)));
      }
    }
  });
}

TEST(ChunkProperties, MasksMatchPartitionEnumeration) {
  std::size_t checked = 0;
  for (std::size_t n : {2u, 3u, 4u, 5u, 8u, 16u})
    for (std::size_t padded = n; padded <= 64; padded += n)
      for (std::size_t len = 1; len <= padded; ++len) {
        if (pad_to_chunk_multiple(len, n).padded_len != padded) continue;
        const auto cfg = ChunkConfig::make(len, n);
        const auto reg = allowance_from_partition(enumerate_regular_partition(padded, n), padded, n, len, false);
        const auto shf = allowance_from_partition(enumerate_shifted_partition(padded, n), padded, n, len, true);
        const AttentionMask mr = build_regular_mask(cfg), ms = build_shifted_mask(cfg);
        for (std::size_t q = 0; q < padded; ++q)
          for (std::size_t k = 0; k < padded; ++k) {
            ASSERT_EQ(mr.allow_original(q, k), reg[q][k]) << "regular N=" << n << " L=" << len;
            ASSERT_EQ(ms.allow_original(q, k), shf[q][k]) << "shifted N=" << n << " L=" << len;
          }
        ++checked;
      }
  EXPECT_GT(checked, 100u);
}

TEST(ChunkProperties, CyclicShiftRoundTripsExactly) {
  Rng rng(5);
  for_each_geometry([&](const ChunkConfig& cfg) {
    auto x = random_tensor({cfg.padded_len, 3}, rng);
    auto y = cyclic_shift(cyclic_shift(x, ShiftDirection::forward, cfg), ShiftDirection::reverse, cfg);
    ASSERT_EQ(max_abs_diff(x, y), 0.0);
  });
}

TEST(MaskCache, SharedAcrossThreads) {
  MaskCache::instance().clear();
  const auto cfg = ChunkConfig::make(40, 8);
  std::vector<std::shared_ptr<const AttentionMask>> got(4);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < got.size(); ++i)
    threads.emplace_back([&, i] { got[i] = MaskCache::instance().get(MaskKind::shifted, cfg); });
  for (auto& t : threads) t.join();
  for (const auto& m : got) {
    EXPECT_EQ(m->ascii(), got[0]->ascii());
    EXPECT_EQ(m->kind(), MaskKind::shifted);
  }
  EXPECT_EQ(MaskCache::instance().get(MaskKind::shifted, cfg), MaskCache::instance().get(MaskKind::shifted, cfg));
}
