#pragma once

// Wall-clock and multiply-accumulate measurements for global, chunked and
// shifted-chunk attention at growing sequence lengths.

#include <algorithm>
#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "schunk/attention.hpp"
#include "schunk/rng.hpp"

namespace schunk {

struct BenchRow {
  std::size_t length = 0;
  std::string variant;  // global | chunked | shifted
  double seconds = 0;   // best of the repetitions
  MacCount measured;
  FlopReport expected;

  bool macs_match() const {
    return measured.projection == expected.projection &&
           measured.score_context == expected.score_context;
  }
};

struct BenchSettings {
  std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
  std::size_t chunk_size = 16;
  std::size_t model_dim = 256;
  std::size_t num_heads = 4;
  std::size_t repetitions = 3;
  std::uint64_t seed = 7;
  bool include_global = true;
};

template <class T>
MhsaParams<T> random_mhsa(std::size_t dim, std::size_t heads, Rng& rng) {
  auto lin = [&] {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    std::vector<T> w(dim * dim), b(dim);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : b) v = static_cast<T>(rng.uniform(-bound, bound));
    return Linear<T>{Tensor<T>::from({dim, dim}, std::move(w)), Tensor<T>::from({dim}, std::move(b))};
  };
  MhsaParams<T> p;
  p.query = lin();
  p.key = lin();
  p.value = lin();
  p.output = lin();
  p.num_heads = heads;
  return p;
}

/// Each case gets one warm-up call, then repetitions run round-robin over
/// all cases so that slow spells on the machine do not land on one length.
inline std::vector<BenchRow> run_attention_bench(const BenchSettings& s) {
  NoGradGuard no_grad;
  Rng rng(s.seed);
  const MhsaParams<float> params = random_mhsa<float>(s.model_dim, s.num_heads, rng);
  struct Case {
    BenchRow row;
    std::function<void(MacCount&)> run;
  };
  std::vector<Tensor<float>> inputs;
  inputs.reserve(s.lengths.size());
  std::vector<Case> cases;
  for (std::size_t len : s.lengths) {
    std::vector<float> xs(len * s.model_dim);
    for (auto& v : xs) v = static_cast<float>(rng.normal());
    inputs.push_back(Tensor<float>::from({len, s.model_dim}, std::move(xs)));
    const Tensor<float>* x = &inputs.back();
    const ChunkConfig cfg = ChunkConfig::make(len, s.chunk_size);
    auto add = [&](const std::string& name, FlopReport expected, std::function<void(MacCount&)> fn) {
      Case c;
      c.row.length = len;
      c.row.variant = name;
      c.row.expected = expected;
      c.row.seconds = 1e300;
      c.run = std::move(fn);
      cases.push_back(std::move(c));
    };
    if (s.include_global)
      add("global", flops_global(len, s.model_dim), [&params, x](MacCount& m) { global_mhsa(*x, params, &m); });
    add("chunked", flops_chunked(len, s.model_dim, s.chunk_size),
        [&params, x, cfg](MacCount& m) { chunk_mhsa(*x, params, cfg, &m); });
    add("shifted", flops_chunked(len, s.model_dim, s.chunk_size),
        [&params, x, cfg](MacCount& m) { shifted_chunk_mhsa(*x, params, cfg, &m); });
  }
  for (auto& c : cases) {
    MacCount warm;
    c.run(warm);
  }
  for (std::size_t r = 0; r < std::max<std::size_t>(s.repetitions, 1); ++r) {
    for (auto& c : cases) {
      MacCount macs;
      const auto t0 = std::chrono::steady_clock::now();
      c.run(macs);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      c.row.seconds = std::min(c.row.seconds, dt);
      c.row.measured = macs;
    }
  }
  std::vector<BenchRow> rows;
  for (auto& c : cases) rows.push_back(c.row);
  return rows;
}

/// seconds(variant, L) / seconds(variant, L / 2), or 0 if L / 2 was not run.
inline double doubling_ratio(const std::vector<BenchRow>& rows, const std::string& variant,
                             std::size_t length) {
  const BenchRow* hi = nullptr;
  const BenchRow* lo = nullptr;
  for (const auto& r : rows) {
    if (r.variant != variant) continue;
    if (r.length == length) hi = &r;
    if (r.length * 2 == length) lo = &r;
  }
  return hi && lo && lo->seconds > 0 ? hi->seconds / lo->seconds : 0.0;
}

}  // namespace schunk
