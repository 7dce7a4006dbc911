#pragma once

// Flat `key = value` run configuration. '#' starts a comment. Unknown keys
// are errors.
//
// encoder: num_layers num_heads model_dim ffn_dim chunk_size variant
//          conv_kernel subsample_channels shifted
// data:    vocab feat_dim frames_per_symbol jitter min_symbols max_symbols
//          noise_std context_dependent gap_frames data_seed
// train:   epochs peak_lr warmup accum_steps grad_clip seed train_count
//          dev_count target_seq_acc
//
// feat_dim sets both the synthetic feature width and the encoder input width.

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "schunk/encoder.hpp"
#include "schunk/synth.hpp"
#include "schunk/train.hpp"

namespace schunk {

struct RunConfig {
  EncoderConfig encoder;
  SynthSpec synth;
  TrainConfig train;

  RunConfig() { encoder.input_feat_dim = synth.feat_dim; }
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& v) {
  std::size_t pos = 0;
  const unsigned long long x = std::stoull(v, &pos);
  if (pos != v.size() || v.find('-') != std::string::npos) throw std::invalid_argument(v);
  return static_cast<std::size_t>(x);
}

inline double parse_double(const std::string& v) {
  std::size_t pos = 0;
  const double x = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument(v);
  return x;
}

inline bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument(v);
}

}  // namespace detail

/// Applies one key/value pair; throws ConfigError for unknown keys or bad values.
inline void apply_config_value(RunConfig& rc, const std::string& key, const std::string& value) {
  using namespace detail;
  using Setter = std::function<void(const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"num_layers", [&](auto& v) { rc.encoder.num_layers = parse_size(v); }},
      {"num_heads", [&](auto& v) { rc.encoder.num_heads = parse_size(v); }},
      {"model_dim", [&](auto& v) { rc.encoder.model_dim = parse_size(v); }},
      {"ffn_dim", [&](auto& v) { rc.encoder.ffn_dim = parse_size(v); }},
      {"chunk_size", [&](auto& v) { rc.encoder.chunk_size = parse_size(v); }},
      {"variant", [&](auto& v) { rc.encoder.variant = parse_variant(v); }},
      {"conv_kernel", [&](auto& v) { rc.encoder.conv_kernel = parse_size(v); }},
      {"subsample_channels", [&](auto& v) { rc.encoder.subsample_channels = parse_size(v); }},
      {"shifted", [&](auto& v) { rc.encoder.shifted = parse_bool(v); }},
      {"vocab", [&](auto& v) { rc.synth.vocab = parse_size(v); }},
      {"feat_dim",
       [&](auto& v) { rc.synth.feat_dim = rc.encoder.input_feat_dim = parse_size(v); }},
      {"frames_per_symbol", [&](auto& v) { rc.synth.frames_per_symbol = parse_size(v); }},
      {"jitter", [&](auto& v) { rc.synth.jitter = parse_size(v); }},
      {"min_symbols", [&](auto& v) { rc.synth.min_symbols = parse_size(v); }},
      {"max_symbols", [&](auto& v) { rc.synth.max_symbols = parse_size(v); }},
      {"noise_std", [&](auto& v) { rc.synth.noise_std = parse_double(v); }},
      {"context_dependent", [&](auto& v) { rc.synth.context_dependent = parse_bool(v); }},
      {"gap_frames", [&](auto& v) { rc.synth.gap_frames = parse_size(v); }},
      {"data_seed", [&](auto& v) { rc.synth.seed = parse_size(v); }},
      {"epochs", [&](auto& v) { rc.train.epochs = parse_size(v); }},
      {"peak_lr", [&](auto& v) { rc.train.peak_lr = parse_double(v); }},
      {"warmup", [&](auto& v) { rc.train.warmup = parse_size(v); }},
      {"accum_steps", [&](auto& v) { rc.train.accum_steps = parse_size(v); }},
      {"grad_clip", [&](auto& v) { rc.train.grad_clip = parse_double(v); }},
      {"seed", [&](auto& v) { rc.train.seed = parse_size(v); }},
      {"train_count", [&](auto& v) { rc.train.train_count = parse_size(v); }},
      {"dev_count", [&](auto& v) { rc.train.dev_count = parse_size(v); }},
      {"target_seq_acc", [&](auto& v) { rc.train.target_seq_acc = parse_double(v); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second(value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("bad value '" + value + "' for config key '" + key + "'");
  }
}

inline RunConfig parse_config(std::istream& is, const std::string& name = "config") {
  RunConfig rc;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(name + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      apply_config_value(rc, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  rc.encoder.validate();
  rc.synth.validate();
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  return parse_config(is, path);
}

}  // namespace schunk
