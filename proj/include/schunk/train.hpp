#pragma once

// Training and evaluation of encoder + CTC on the synthetic corpus.
// One utterance per forward pass; gradients are accumulated over
// `accum_steps` utterances before each Adam update.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "schunk/model.hpp"
#include "schunk/synth.hpp"

namespace schunk {

struct TrainConfig {
  std::size_t epochs = 30;
  double peak_lr = 1e-3;
  std::size_t warmup = 400;
  std::size_t accum_steps = 4;
  double grad_clip = 5.0;
  std::uint64_t seed = 1;
  std::size_t train_count = 2000;
  std::size_t dev_count = 200;
  // Stop early once dev sequence accuracy reaches this (0 disables).
  double target_seq_acc = 0.0;

  bool operator==(const TrainConfig&) const = default;
};

/// Inverse-square-root schedule with linear warmup, peaking at `peak` when
/// step == warmup.
inline double warmup_lr(double peak, std::size_t warmup, std::size_t step) {
  if (step == 0) return 0.0;
  const double s = static_cast<double>(step), w = static_cast<double>(std::max<std::size_t>(warmup, 1));
  return peak * std::min(s / w, std::sqrt(w / s));
}

template <class T>
class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.98;
  static constexpr double kEps = 1e-9;

  explicit Adam(Model<T>& model) {
    for_each_parameter(model, [&](const std::string&, Tensor<T>& p) {
      params_.push_back(p);
      m_.emplace_back(p.size(), T(0));
      v_.emplace_back(p.size(), T(0));
    });
  }

  /// Applies one update from the accumulated gradients divided by `count`,
  /// then clears them. Returns the pre-clip gradient norm.
  double step(double lr, std::size_t count, double clip) {
    const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(count, 1));
    double sq = 0;
    for (auto& p : params_)
      for (T g : p.grad()) sq += static_cast<double>(g) * g * inv * inv;
    const double norm = std::sqrt(sq);
    const double factor = inv * (clip > 0 && norm > clip ? clip / norm : 1.0);
    ++steps_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (!p.has_grad()) continue;
      auto data = p.mutable_data();
      auto grad = p.grad();
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = static_cast<double>(grad[j]) * factor;
        m_[i][j] = static_cast<T>(kBeta1 * m_[i][j] + (1 - kBeta1) * g);
        v_[i][j] = static_cast<T>(kBeta2 * v_[i][j] + (1 - kBeta2) * g * g);
        const double mh = m_[i][j] / c1, vh = v_[i][j] / c2;
        data[j] = static_cast<T>(data[j] - lr * mh / (std::sqrt(vh) + kEps));
      }
      p.zero_grad();
    }
    return norm;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t s) { steps_ = s; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t steps_ = 0;
};

/// Levenshtein distance between symbol sequences.
inline std::size_t edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ref[i - 1] != hyp[j - 1])});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

struct EvalReport {
  double token_error_rate = 0;
  double sequence_accuracy = 0;
  double loss = 0;  // mean per utterance
  std::size_t utterances = 0;
};

/// Accumulates error counts over (reference, hypothesis) pairs.
struct ErrorTally {
  std::size_t edits = 0, ref_tokens = 0, exact = 0, count = 0;
  double loss = 0;

  void add(const std::vector<int>& ref, const std::vector<int>& hyp, double utt_loss = 0) {
    edits += edit_distance(ref, hyp);
    ref_tokens += ref.size();
    exact += ref == hyp;
    ++count;
    loss += utt_loss;
  }

  EvalReport report() const {
    EvalReport r;
    r.utterances = count;
    r.token_error_rate = ref_tokens ? static_cast<double>(edits) / static_cast<double>(ref_tokens)
                                    : (edits ? 1.0 : 0.0);
    r.sequence_accuracy = count ? static_cast<double>(exact) / static_cast<double>(count) : 0.0;
    r.loss = count ? loss / static_cast<double>(count) : 0.0;
    return r;
  }
};

/// Throws InfeasibleAlignment naming the first utterance whose encoder
/// length cannot carry its labels.
inline void check_feasible(const std::vector<Utterance>& utts) {
  for (const auto& u : utts) {
    const std::size_t frames = subsampled_length(u.frames);
    if (frames < ctc_min_frames(u.labels)) {
      throw InfeasibleAlignment("infeasible alignment in utterance " + u.id + ": " +
                                std::to_string(frames) + " encoder frames for " +
                                std::to_string(u.labels.size()) + " labels");
    }
  }
}

template <class T>
EvalReport evaluate(const Model<T>& model, const std::vector<Utterance>& utts) {
  NoGradGuard no_grad;
  ErrorTally tally;
  for (const auto& u : utts) {
    Tensor<T> lp = model_logprobs(model, u.features_tensor<T>());
    double loss = 0;
    if (lp.dim(0) >= ctc_min_frames(u.labels)) loss = static_cast<double>(ctc_loss(lp, u.labels).item());
    tally.add(u.labels, greedy_decode(lp), loss);
  }
  return tally.report();
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  EvalReport dev;
  double seconds = 0;
  double lr = 0;
};

template <class T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig cfg) : model_(model), cfg_(cfg), adam_(model) {}

  /// Epoch `epoch` (1-based) over `data` in a seed-determined order.
  /// Returns the mean training loss.
  double train_epoch(const std::vector<Utterance>& data, std::size_t epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg_.seed, 0x5EED, epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i - 1)))]);

    double total = 0;
    std::size_t pending = 0;
    adam_.zero_grad();
    for (std::size_t idx : order) {
      const Utterance& u = data[idx];
      Tensor<T> loss = ctc_loss(model_logprobs(model_, u.features_tensor<T>()), u.labels);
      total += static_cast<double>(loss.item());
      loss.backward();
      if (++pending == cfg_.accum_steps) {
        adam_.step(warmup_lr(cfg_.peak_lr, cfg_.warmup, adam_.steps() + 1), pending, cfg_.grad_clip);
        pending = 0;
      }
    }
    if (pending) adam_.step(warmup_lr(cfg_.peak_lr, cfg_.warmup, adam_.steps() + 1), pending, cfg_.grad_clip);
    return data.empty() ? 0.0 : total / static_cast<double>(data.size());
  }

  /// Runs epochs start..cfg.epochs, calling `on_epoch` after each; stops
  /// early when the dev target is met or the callback returns false.
  std::vector<EpochLog> fit(const std::vector<Utterance>& train, const std::vector<Utterance>& dev,
                            std::size_t start_epoch = 1,
                            const std::function<bool(const EpochLog&)>& on_epoch = {}) {
    check_feasible(train);
    check_feasible(dev);
    std::vector<EpochLog> logs;
    for (std::size_t e = start_epoch; e <= cfg_.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochLog log;
      log.epoch = e;
      log.train_loss = train_epoch(train, e);
      log.dev = evaluate(model_, dev);
      log.lr = warmup_lr(cfg_.peak_lr, cfg_.warmup, adam_.steps());
      log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      logs.push_back(log);
      const bool go_on = on_epoch ? on_epoch(log) : true;
      if (!go_on) break;
      if (cfg_.target_seq_acc > 0 && log.dev.sequence_accuracy >= cfg_.target_seq_acc) break;
    }
    return logs;
  }

  Adam<T>& optimizer() { return adam_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  Model<T>& model_;
  TrainConfig cfg_;
  Adam<T> adam_;
};

}  // namespace schunk
