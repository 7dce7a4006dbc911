#pragma once

// CTC output layer, loss and greedy decoding. Blank is symbol 0; real
// symbols are 1..V.

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "schunk/attention.hpp"
#include "schunk/ops.hpp"

namespace schunk {

inline constexpr int kBlank = 0;

class InfeasibleAlignment : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class T>
struct CtcParams {
  Linear<T> projection;  // [C, V + 1]
  std::size_t vocab = 0;
};

/// Per-frame log-probabilities over {blank, 1..V}.
template <class T>
Tensor<T> ctc_logprobs(const Tensor<T>& encoded, const CtcParams<T>& p) {
  return log_softmax(p.projection(encoded));
}

/// Fewest frames that can emit `labels`: one per label plus a blank between
/// each adjacent repeat.
inline std::size_t ctc_min_frames(const std::vector<int>& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i) n += labels[i] == labels[i - 1];
  return n;
}

/// Negative log-likelihood of `labels` summed over all CTC alignments, by the
/// forward recursion in log space. Gradients come from autograd.
template <class T>
Tensor<T> ctc_loss(const Tensor<T>& logprobs, const std::vector<int>& labels) {
  if (logprobs.rank() != 2 || logprobs.dim(1) < 2) {
    throw DimensionError("ctc_loss: expected [T, V+1] log-probabilities, got " +
                         shape_str(logprobs.shape()));
  }
  const std::size_t steps = logprobs.dim(0), classes = logprobs.dim(1);
  for (int l : labels) {
    if (l < 1 || static_cast<std::size_t>(l) >= classes) {
      throw std::invalid_argument("ctc_loss: label " + std::to_string(l) + " outside [1, " +
                                  std::to_string(classes - 1) + "]");
    }
  }
  if (steps < ctc_min_frames(labels) || steps == 0) {
    throw InfeasibleAlignment("infeasible alignment: " + std::to_string(steps) +
                              " frames for " + std::to_string(labels.size()) +
                              " labels needing " + std::to_string(ctc_min_frames(labels)));
  }
  constexpr T ninf = -std::numeric_limits<T>::infinity();
  // Extended sequence: blank, l1, blank, l2, ..., blank.
  std::vector<std::size_t> ext(2 * labels.size() + 1, kBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = static_cast<std::size_t>(labels[i]);
  const std::size_t states = ext.size();

  std::vector<T> start(states, ninf), skip(states, ninf);
  start[0] = 0;
  if (states > 1) start[1] = 0;
  for (std::size_t s = 2; s < states; ++s)
    if (ext[s] != kBlank && ext[s] != ext[s - 2]) skip[s] = 0;
  const Tensor<T> skip_mask = Tensor<T>::from({states}, std::move(skip));

  Tensor<T> alpha = add(gather_row(logprobs, 0, ext), Tensor<T>::from({states}, std::move(start)));
  for (std::size_t t = 1; t < steps; ++t) {
    Tensor<T> stay_or_step = logaddexp(alpha, shift_fill(alpha, 1, ninf));
    Tensor<T> jump = add(shift_fill(alpha, 2, ninf), skip_mask);
    alpha = add(logaddexp(stay_or_step, jump), gather_row(logprobs, t, ext));
  }
  Tensor<T> row = reshape(alpha, {1, states});
  Tensor<T> total = gather_row(row, 0, {states - 1});
  if (states > 1) total = logaddexp(total, gather_row(row, 0, {states - 2}));
  return reshape(scale(total, T(-1)), {});
}

/// Collapses a frame-level symbol path: merge repeats, drop blanks.
inline std::vector<int> ctc_collapse(const std::vector<int>& path) {
  std::vector<int> out;
  int prev = kBlank;
  for (int s : path) {
    if (s != kBlank && s != prev) out.push_back(s);
    prev = s;
  }
  return out;
}

/// Frame-wise argmax (lowest index wins ties).
template <class T>
std::vector<int> frame_argmax(const Tensor<T>& logprobs) {
  const std::size_t cols = logprobs.dim(-1);
  const std::size_t rows = cols == 0 ? 0 : logprobs.size() / cols;
  std::vector<int> path(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logprobs.ptr() + r * cols;
    path[r] = static_cast<int>(std::max_element(row, row + cols) - row);
  }
  return path;
}

template <class T>
std::vector<int> greedy_decode(const Tensor<T>& logprobs) {
  return ctc_collapse(frame_argmax(logprobs));
}

/// Incremental greedy decoding. Feeding frames in any split yields the same
/// hypothesis as greedy_decode on their concatenation.
class GreedyDecoder {
 public:
  template <class T>
  std::vector<int> consume(const Tensor<T>& logprobs) {
    std::vector<int> fresh;
    for (int s : frame_argmax(logprobs)) {
      if (s != kBlank && s != last_) fresh.push_back(s);
      last_ = s;
    }
    hypothesis_.insert(hypothesis_.end(), fresh.begin(), fresh.end());
    return fresh;
  }

  int last_symbol() const { return last_; }
  const std::vector<int>& hypothesis() const { return hypothesis_; }

 private:
  int last_ = kBlank;
  std::vector<int> hypothesis_;
};

}  // namespace schunk
