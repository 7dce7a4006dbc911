#pragma once

// Encoder plus CTC head, the unit that is trained, checkpointed and streamed.

#include <string>

#include "schunk/ctc.hpp"
#include "schunk/encoder.hpp"
#include "schunk/rng.hpp"

namespace schunk {

template <class T>
struct Model {
  EncoderConfig config;
  EncoderWeights<T> encoder;
  CtcParams<T> ctc;

  std::size_t vocab() const { return ctc.vocab; }
};

template <class T>
Model<T> init_model(const EncoderConfig& cfg, std::size_t vocab, std::uint64_t seed) {
  if (vocab == 0) throw std::invalid_argument("vocab must be >= 1");
  Rng rng(seed);
  Model<T> m;
  m.config = cfg;
  m.encoder = init_encoder<T>(cfg, rng);
  m.ctc.projection = detail::init_linear<T>(cfg.model_dim, vocab + 1, rng);
  m.ctc.vocab = vocab;
  return m;
}

template <class T, class F>
void for_each_parameter(Model<T>& m, F&& fn) {
  for_each_parameter(m.encoder, m.config, fn);
  fn(std::string("ctc.projection.weight"), m.ctc.projection.weight);
  fn(std::string("ctc.projection.bias"), m.ctc.projection.bias);
}

template <class T, class F>
void for_each_parameter(const Model<T>& m, F&& fn) {
  for_each_parameter(const_cast<Model<T>&>(m), [&](const std::string& name, Tensor<T>& t) {
    fn(name, static_cast<const Tensor<T>&>(t));
  });
}

/// Deep copy at another precision (fresh leaves).
template <class U, class T>
Model<U> cast_model(const Model<T>& src) {
  Model<U> dst = init_model<U>(src.config, src.ctc.vocab, 0);
  std::vector<const Tensor<T>*> from;
  for_each_parameter(src, [&](const std::string&, const Tensor<T>& t) { from.push_back(&t); });
  std::size_t i = 0;
  for_each_parameter(dst, [&](const std::string&, Tensor<U>& t) { t = from[i++]->template cast<U>(); });
  return dst;
}

/// Deep copy (independent storage).
template <class T>
Model<T> clone_model(const Model<T>& src) {
  return cast_model<T>(src);
}

template <class T>
std::size_t parameter_count(const Model<T>& m) {
  std::size_t n = 0;
  for_each_parameter(m, [&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

/// Full offline path: features -> per-frame CTC log-probabilities.
template <class T>
Tensor<T> model_logprobs(const Model<T>& m, const Tensor<T>& features) {
  return ctc_logprobs(encoder_forward(features, m.encoder, m.config), m.ctc);
}

}  // namespace schunk
