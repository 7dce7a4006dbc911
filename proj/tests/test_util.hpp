#pragma once

// Test-only helpers: random tensors, a central finite-difference gradient
// checker, and loop-level reference implementations that share no code
// with the library paths they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "schunk/schunk.hpp"

namespace schunk::testing {

template <class T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0, bool grad = false) {
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(scale * rng.normal());
  return grad ? Tensor<T>::parameter(shape, std::move(data)) : Tensor<T>::from(shape, std::move(data));
}

/// ||a - b|| / max(||a||, ||b||), falling back to the absolute norm when
/// both are below 1e-10.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom < 1e-10 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

/// Checks d(sum(f(inputs) * R))/d(inputs) for a random R against central
/// differences with step `h`. Returns the worst relative error over inputs.
inline double gradient_check(std::vector<Tensor<double>> inputs,
                             const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                             Rng& rng, double h = 1e-4) {
  Tensor<double> probe_out;
  {
    NoGradGuard ng;
    probe_out = f(inputs);
  }
  const Tensor<double> weights = random_tensor(probe_out.shape(), rng);
  auto loss_value = [&] {
    NoGradGuard ng;
    return sum(mul(f(inputs), weights)).item();
  };
  for (auto& in : inputs) in.zero_grad();
  sum(mul(f(inputs), weights)).backward();

  double worst = 0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    std::vector<double> analytic(in.size(), 0.0);
    if (in.has_grad()) analytic.assign(in.grad().begin(), in.grad().end());
    std::vector<double> numeric(in.size());
    auto data = in.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = loss_value();
      data[i] = keep - h;
      const double down = loss_value();
      data[i] = keep;
      numeric[i] = (up - down) / (2 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T>
MhsaParams<T> random_attention(std::size_t dim, std::size_t heads, Rng& rng, bool grad = false) {
  auto lin = [&] {
    return Linear<T>{random_tensor<T>({dim, dim}, rng, 1.0 / std::sqrt(double(dim)), grad),
                     random_tensor<T>({dim}, rng, 0.1, grad)};
  };
  MhsaParams<T> p;
  p.query = lin();
  p.key = lin();
  p.value = lin();
  p.output = lin();
  p.num_heads = heads;
  return p;
}

/// Replaces every parameter (biases and norms included) with random values
/// so no path is accidentally inert.
template <class T>
void randomize(Model<T>& m, Rng& rng, double scale = 0.5) {
  for_each_parameter(m, [&](const std::string& name, Tensor<T>& t) {
    const bool norm_gain = name.ends_with(".gamma");
    std::vector<T> v(t.size());
    const double fan = t.rank() >= 2 ? static_cast<double>(t.size() / t.dim(-1)) : 1.0;
    for (auto& x : v) {
      x = norm_gain ? static_cast<T>(1.0 + 0.1 * rng.normal())
                    : static_cast<T>(scale * rng.normal() / std::sqrt(fan));
    }
    t = Tensor<T>::parameter(t.shape(), std::move(v));
  });
}

// ---------------------------------------------------------------------------
// Loop-level attention reference.

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const Tensor<double>& x) {
  Matrix m(x.dim(0), std::vector<double>(x.dim(1)));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) m[i][j] = x[i * x.dim(1) + j];
  return m;
}

inline std::vector<double> affine(const std::vector<double>& row, const Linear<double>& l) {
  const std::size_t in = l.weight.dim(0), out = l.weight.dim(1);
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = l.bias[o];
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * l.weight[i * out + o];
    y[o] = acc;
  }
  return y;
}

/// Multi-head attention where query frame q sees exactly the frames for
/// which allowed(q, k) holds. Rows with nothing allowed produce the output
/// projection of a zero context.
inline Matrix reference_attention(const Matrix& x, const MhsaParams<double>& p,
                                  const std::function<bool(std::size_t, std::size_t)>& allowed) {
  const std::size_t len = x.size(), dim = x[0].size(), heads = p.num_heads, hd = dim / heads;
  Matrix q(len), k(len), v(len), out(len);
  for (std::size_t t = 0; t < len; ++t) {
    q[t] = affine(x[t], p.query);
    k[t] = affine(x[t], p.key);
    v[t] = affine(x[t], p.value);
  }
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<double> context(dim, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<std::pair<std::size_t, double>> scores;
      for (std::size_t u = 0; u < len; ++u) {
        if (!allowed(t, u)) continue;
        double s = 0;
        for (std::size_t d = 0; d < hd; ++d) s += q[t][h * hd + d] * k[u][h * hd + d];
        scores.emplace_back(u, s / std::sqrt(double(hd)));
      }
      if (scores.empty()) continue;
      double mx = -1e300;
      for (auto& [u, s] : scores) mx = std::max(mx, s);
      double total = 0;
      for (auto& [u, s] : scores) total += std::exp(s - mx);
      for (auto& [u, s] : scores) {
        const double w = std::exp(s - mx) / total;
        for (std::size_t d = 0; d < hd; ++d) context[h * hd + d] += w * v[u][h * hd + d];
      }
    }
    out[t] = affine(context, p.output);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partition oracle: chunk lists built by walking the frames, no rolling and
// no index formulas from the library.

using Partition = std::vector<std::vector<std::size_t>>;

inline Partition enumerate_regular_partition(std::size_t padded, std::size_t n) {
  Partition parts;
  for (std::size_t t = 0; t < padded; ++t) {
    if (t % n == 0) parts.emplace_back();
    parts.back().push_back(t);
  }
  return parts;
}

/// The regular partition displaced by floor(N/2): a short head chunk, full
/// chunks straddling each regular boundary, and a short tail chunk.
inline Partition enumerate_shifted_partition(std::size_t padded, std::size_t n) {
  const std::size_t shift = n / 2;
  std::vector<bool> starts(padded, false);
  starts[0] = true;
  for (std::size_t boundary = n - shift; boundary < padded; boundary += n) starts[boundary] = true;
  Partition parts;
  for (std::size_t t = 0; t < padded; ++t) {
    if (starts[t]) parts.emplace_back();
    parts.back().push_back(t);
  }
  return parts;
}

/// Dense allowance from a partition: pairs inside one part, restricted to
/// key.chunk <= query.chunk when `causal`, then the padding rule.
inline std::vector<std::vector<bool>> allowance_from_partition(const Partition& parts,
                                                               std::size_t padded, std::size_t n,
                                                               std::size_t true_len, bool causal) {
  std::vector<std::vector<bool>> allow(padded, std::vector<bool>(padded, false));
  for (const auto& part : parts)
    for (std::size_t q : part)
      for (std::size_t k : part) allow[q][k] = !causal || k / n <= q / n;
  for (std::size_t q = 0; q < padded; ++q)
    for (std::size_t k = 0; k < padded; ++k)
      if (q >= true_len || k >= true_len) allow[q][k] = q == k;
  return allow;
}

// ---------------------------------------------------------------------------
// CTC oracle: -log of the summed probability of every frame path that
// collapses to `labels` (merge repeats, drop blank 0).

inline double ctc_bruteforce(const Matrix& logprobs, const std::vector<int>& labels) {
  const std::size_t steps = logprobs.size(), symbols = logprobs[0].size();
  std::vector<std::size_t> path(steps, 0);
  double total = 0;
  while (true) {
    std::vector<int> collapsed;
    int prev = -1;
    double lp = 0;
    for (std::size_t t = 0; t < steps; ++t) {
      const int s = static_cast<int>(path[t]);
      if (s != 0 && s != prev) collapsed.push_back(s);
      prev = s;
      lp += logprobs[t][path[t]];
    }
    if (collapsed == labels) total += std::exp(lp);
    std::size_t t = 0;
    while (t < steps && ++path[t] == symbols) path[t++] = 0;
    if (t == steps) break;
  }
  return -std::log(total);
}

inline Matrix random_logprobs(std::size_t steps, std::size_t symbols, Rng& rng) {
  Matrix m(steps, std::vector<double>(symbols));
  for (auto& row : m) {
    double mx = -1e300, z = 0;
    for (auto& v : row) mx = std::max(mx, v = 2.0 * rng.normal());
    for (auto& v : row) z += std::exp(v - mx);
    for (auto& v : row) v -= mx + std::log(z);
  }
  return m;
}

inline Tensor<double> to_tensor(const Matrix& m) {
  std::vector<double> flat;
  for (const auto& row : m) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor<double>::from({m.size(), m[0].size()}, std::move(flat));
}

/// Random labels in [1, vocab] that fit in `steps` frames under CTC.
inline std::vector<int> random_feasible_labels(std::size_t steps, std::size_t vocab, std::size_t max_len, Rng& rng) {
  while (true) {
    std::vector<int> labels(static_cast<std::size_t>(rng.uniform_int(1, static_cast<long>(max_len))));
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(1, static_cast<long>(vocab)));
    std::size_t need = labels.size();
    for (std::size_t i = 1; i < labels.size(); ++i) need += labels[i] == labels[i - 1];
    if (need <= steps) return labels;
  }
}

// ---------------------------------------------------------------------------
// Streaming driver.

template <class T>
struct StreamRun {
  std::vector<double> rows;  // every emitted encoder row, in order
  std::size_t frames = 0;
  std::vector<int> hypothesis;
  std::vector<std::vector<double>> per_push;  // rows emitted by each call
};

/// Pushes `features` in slices cycling through `sizes` (0 allowed), then
/// closes.
template <class T>
StreamRun<T> run_stream(std::shared_ptr<const Model<T>> model, const Tensor<T>& features,
                        const std::vector<std::size_t>& sizes) {
  StreamState<T> state = stream_open(model);
  StreamRun<T> run;
  auto take = [&](const StreamOutput<T>& out) {
    std::vector<double> rows(out.encoder_out.data().begin(), out.encoder_out.data().end());
    run.rows.insert(run.rows.end(), rows.begin(), rows.end());
    run.frames += out.encoder_out.size() / model->config.model_dim;
    run.per_push.push_back(std::move(rows));
    run.hypothesis = out.hypothesis;
  };
  const std::size_t total = features.dim(0);
  std::size_t t = 0;
  for (std::size_t i = 0; t < total; ++i) {
    const std::size_t n = std::min(sizes[i % sizes.size()], total - t);
    take(stream_push(state, slice_time(features, t, t + n)));
    t += n;
  }
  take(stream_close(state));
  return run;
}

/// max |a - b| / max(1, max |b|).
inline double scaled_max_diff(const std::vector<double>& a, std::span<const double> b) {
  double diff = 0, scale = 1;
  for (std::size_t i = 0; i < b.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

}  // namespace schunk::testing
