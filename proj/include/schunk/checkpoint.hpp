#pragma once

// Checkpoint file:
//
//   SCHUNK-CHECKPOINT 1
//   config <key>=<value> ...            encoder config and vocab
//   state epoch=<n> adam_step=<n>       optional training state
//   tensor <name> <rank> <dims...> <byte offset>
//   ...
//   payload <bytes>
//   <raw little-endian float32 values, tensors in header order>
//
// Optimizer moments, when saved, are ordinary tensors named adam.m.<param>
// and adam.v.<param>.

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "schunk/model.hpp"
#include "schunk/synth.hpp"

namespace schunk {

inline constexpr int kCheckpointVersion = 1;

struct TrainingState {
  std::size_t epoch = 0;
  std::size_t adam_step = 0;
  std::vector<std::vector<float>> first_moments, second_moments;
};

struct Checkpoint {
  Model<float> model;
  std::optional<TrainingState> training;
};

inline std::string config_line(const EncoderConfig& c, std::size_t vocab) {
  std::ostringstream os;
  os << "config num_layers=" << c.num_layers << " num_heads=" << c.num_heads
     << " model_dim=" << c.model_dim << " ffn_dim=" << c.ffn_dim << " chunk_size=" << c.chunk_size
     << " variant=" << to_string(c.variant) << " conv_kernel=" << c.conv_kernel
     << " input_feat_dim=" << c.input_feat_dim << " subsample_channels=" << c.subsample_channels
     << " shifted=" << (c.shifted ? 1 : 0) << " vocab=" << vocab;
  return os.str();
}

namespace detail {

inline void put_le(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  char b[4];
  std::memcpy(b, &bits, 4);
  out.append(b, 4);
}

inline float get_le(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Model<float>& model,
                            const TrainingState* training = nullptr) {
  std::vector<std::pair<std::string, const Tensor<float>*>> params;
  for_each_parameter(model, [&](const std::string& name, const Tensor<float>& t) {
    params.emplace_back(name, &t);
  });
  std::ostringstream header;
  header << "SCHUNK-CHECKPOINT " << kCheckpointVersion << '\n'
         << config_line(model.config, model.vocab()) << '\n';
  if (training) header << "state epoch=" << training->epoch << " adam_step=" << training->adam_step << '\n';
  std::string payload;
  auto add_tensor = [&](const std::string& name, const Shape& shape, std::span<const float> values) {
    header << "tensor " << name << ' ' << shape.size();
    for (auto d : shape) header << ' ' << d;
    header << ' ' << payload.size() << '\n';
    for (float v : values) detail::put_le(payload, v);
  };
  for (const auto& [name, t] : params) add_tensor(name, t->shape(), t->data());
  if (training) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      add_tensor("adam.m." + params[i].first, params[i].second->shape(), training->first_moments.at(i));
      add_tensor("adam.v." + params[i].first, params[i].second->shape(), training->second_moments.at(i));
    }
  }
  header << "payload " << payload.size() << '\n';
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  const std::string h = header.str();
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

namespace detail {

inline std::map<std::string, std::string> parse_kv_fields(std::istringstream& ls) {
  std::map<std::string, std::string> kv;
  std::string field;
  while (ls >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw ParseError("checkpoint: bad field '" + field + "'");
    kv[field.substr(0, eq)] = field.substr(eq + 1);
  }
  return kv;
}

inline std::size_t to_size(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ParseError("checkpoint: missing config key " + key);
  return static_cast<std::size_t>(std::stoull(it->second));
}

}  // namespace detail

/// Loads a checkpoint. With `expect`, any difference from the stored
/// encoder config is an error.
inline Checkpoint load_checkpoint(const std::string& path, const EncoderConfig* expect = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  auto fail = [&](const std::string& why) { throw ParseError(path + ": " + why); };

  std::string line;
  if (!std::getline(is, line) || line != "SCHUNK-CHECKPOINT " + std::to_string(kCheckpointVersion))
    fail("not a version " + std::to_string(kCheckpointVersion) + " checkpoint");

  EncoderConfig cfg;
  std::size_t vocab = 0;
  bool have_config = false;
  std::optional<TrainingState> training;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::size_t payload_bytes = 0;
  bool have_payload = false;
  while (!have_payload && std::getline(is, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "config") {
      auto kv = detail::parse_kv_fields(ls);
      cfg.num_layers = detail::to_size(kv, "num_layers");
      cfg.num_heads = detail::to_size(kv, "num_heads");
      cfg.model_dim = detail::to_size(kv, "model_dim");
      cfg.ffn_dim = detail::to_size(kv, "ffn_dim");
      cfg.chunk_size = detail::to_size(kv, "chunk_size");
      cfg.variant = parse_variant(kv.at("variant"));
      cfg.conv_kernel = detail::to_size(kv, "conv_kernel");
      cfg.input_feat_dim = detail::to_size(kv, "input_feat_dim");
      cfg.subsample_channels = detail::to_size(kv, "subsample_channels");
      cfg.shifted = detail::to_size(kv, "shifted") != 0;
      vocab = detail::to_size(kv, "vocab");
      have_config = true;
    } else if (kind == "state") {
      auto kv = detail::parse_kv_fields(ls);
      training = TrainingState{};
      training->epoch = detail::to_size(kv, "epoch");
      training->adam_step = detail::to_size(kv, "adam_step");
    } else if (kind == "tensor") {
      Entry e;
      std::size_t rank = 0;
      if (!(ls >> e.name >> rank)) fail("bad tensor line: " + line);
      e.shape.resize(rank);
      for (auto& d : e.shape)
        if (!(ls >> d)) fail("bad tensor shape: " + line);
      if (!(ls >> e.offset)) fail("bad tensor offset: " + line);
      entries.push_back(std::move(e));
    } else if (kind == "payload") {
      if (!(ls >> payload_bytes)) fail("bad payload line");
      have_payload = true;
    } else {
      fail("unexpected header line: " + line);
    }
  }
  if (!have_config || !have_payload) fail("truncated header");
  if (expect && !(*expect == cfg)) {
    fail("config mismatch: file has '" + config_line(cfg, vocab) + "', expected '" +
         config_line(*expect, vocab) + "'");
  }
  std::string payload(payload_bytes, '\0');
  is.read(payload.data(), static_cast<std::streamsize>(payload_bytes));
  if (static_cast<std::size_t>(is.gcount()) != payload_bytes) fail("truncated payload");

  std::map<std::string, const Entry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto read_values = [&](const Entry& e) {
    const std::size_t n = numel(e.shape);
    if (e.offset + 4 * n > payload_bytes) fail("tensor " + e.name + " runs past the payload");
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = detail::get_le(payload.data() + e.offset + 4 * i);
    return values;
  };

  Checkpoint ck{init_model<float>(cfg, vocab, 0), std::nullopt};
  std::vector<std::string> names;
  for_each_parameter(ck.model, [&](const std::string& name, Tensor<float>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail("missing tensor " + name);
    if (it->second->shape != t.shape())
      fail("tensor " + name + " has shape " + shape_str(it->second->shape) + ", expected " +
           shape_str(t.shape()));
    t = Tensor<float>::parameter(t.shape(), read_values(*it->second));
    names.push_back(name);
  });
  if (training) {
    for (const auto& name : names) {
      auto m = by_name.find("adam.m." + name), v = by_name.find("adam.v." + name);
      if (m == by_name.end() || v == by_name.end()) fail("missing optimizer state for " + name);
      training->first_moments.push_back(read_values(*m->second));
      training->second_moments.push_back(read_values(*v->second));
    }
  }
  ck.training = std::move(training);
  return ck;
}

/// Elementwise mean of several checkpoints with identical configs.
inline Model<float> average_checkpoints(const std::vector<std::string>& paths) {
  if (paths.empty()) throw std::invalid_argument("average needs at least one checkpoint");
  Checkpoint first = load_checkpoint(paths[0]);
  std::vector<std::vector<double>> acc;
  for_each_parameter(first.model, [&](const std::string&, const Tensor<float>& t) {
    acc.emplace_back(t.data().begin(), t.data().end());
  });
  for (std::size_t i = 1; i < paths.size(); ++i) {
    Checkpoint other = load_checkpoint(paths[i], &first.model.config);
    if (other.model.vocab() != first.model.vocab())
      throw ParseError(paths[i] + ": config mismatch: vocab differs");
    std::size_t k = 0;
    for_each_parameter(other.model, [&](const std::string&, const Tensor<float>& t) {
      for (std::size_t j = 0; j < t.size(); ++j) acc[k][j] += t[j];
      ++k;
    });
  }
  std::size_t k = 0;
  const double n = static_cast<double>(paths.size());
  for_each_parameter(first.model, [&](const std::string&, Tensor<float>& t) {
    std::vector<float> mean(t.size());
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] = static_cast<float>(acc[k][j] / n);
    t = Tensor<float>::parameter(t.shape(), std::move(mean));
    ++k;
  });
  return std::move(first.model);
}

}  // namespace schunk
