#pragma once

// Synthetic sequence-recognition corpus. Each symbol is rendered as a run of
// copies of a fixed random template vector plus Gaussian noise. All
// randomness comes from schunk::Rng, so a (spec, seed) pair names the same
// corpus everywhere.
//
// Context-dependent variant: the template shown for the i-th symbol is
// (shown_{i-1} + label_i) mod V, so a symbol can only be read by comparing
// it with the template shown before it. Optional silence gaps (noise only)
// separate symbols.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "schunk/rng.hpp"
#include "schunk/tensor.hpp"

namespace schunk {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthSpec {
  std::size_t vocab = 8;
  std::size_t feat_dim = 20;
  std::size_t frames_per_symbol = 8;
  std::size_t jitter = 2;
  std::size_t min_symbols = 5;
  std::size_t max_symbols = 20;
  double noise_std = 0.3;
  bool context_dependent = false;
  std::size_t gap_frames = 0;
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& why) {
      throw std::invalid_argument("invalid synth spec: " + why);
    };
    if (vocab < 2) fail("vocab must be >= 2");
    if (feat_dim == 0) fail("feat_dim must be >= 1");
    if (frames_per_symbol <= jitter) fail("frames_per_symbol must exceed jitter");
    if (min_symbols == 0 || min_symbols > max_symbols) fail("bad symbol count range");
    if (noise_std < 0) fail("noise_std must be >= 0");
  }

  bool operator==(const SynthSpec&) const = default;
};

struct Utterance {
  std::string id;
  std::size_t frames = 0;
  std::size_t feat_dim = 0;
  std::vector<float> features;  // [frames, feat_dim]
  std::vector<int> labels;      // 1..V

  template <class T>
  Tensor<T> features_tensor() const {
    return Tensor<T>::from({frames, feat_dim}, std::vector<T>(features.begin(), features.end()));
  }

  bool operator==(const Utterance&) const = default;
};

/// V templates of feat_dim N(0, 1) entries; template i renders symbol i + 1.
inline std::vector<std::vector<float>> symbol_templates(const SynthSpec& spec) {
  Rng rng(derive_seed(spec.seed, 0x7e3));
  std::vector<std::vector<float>> out(spec.vocab, std::vector<float>(spec.feat_dim));
  for (auto& t : out)
    for (auto& v : t) v = static_cast<float>(rng.normal());
  return out;
}

/// Labels never repeat back to back, so greedy CTC collapse of a perfect
/// frame classifier recovers them.
inline Utterance generate_utterance(const SynthSpec& spec, Rng& rng) {
  spec.validate();
  const auto templates = symbol_templates(spec);
  Utterance u;
  u.feat_dim = spec.feat_dim;
  const auto count = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long>(spec.min_symbols), static_cast<long>(spec.max_symbols)));
  const long v = static_cast<long>(spec.vocab);
  for (std::size_t i = 0; i < count; ++i) {
    if (i == 0) {
      u.labels.push_back(static_cast<int>(rng.uniform_int(1, v)));
    } else {
      // Uniform over the V - 1 symbols other than the previous one.
      long pick = rng.uniform_int(1, v - 1);
      if (pick >= u.labels.back()) ++pick;
      u.labels.push_back(static_cast<int>(pick));
    }
  }
  auto emit = [&](const std::vector<float>* tmpl) {
    for (std::size_t f = 0; f < spec.feat_dim; ++f) {
      const double base = tmpl ? (*tmpl)[f] : 0.0;
      u.features.push_back(static_cast<float>(base + spec.noise_std * rng.normal()));
    }
    ++u.frames;
  };
  std::size_t shown = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto label = static_cast<std::size_t>(u.labels[i]);
    if (!spec.context_dependent || i == 0) {
      shown = label - 1;
    } else {
      shown = (shown + label) % spec.vocab;
    }
    if (i > 0)
      for (std::size_t g = 0; g < spec.gap_frames; ++g) emit(nullptr);
    const long j = static_cast<long>(spec.jitter);
    const auto dur = static_cast<std::size_t>(static_cast<long>(spec.frames_per_symbol) +
                                              rng.uniform_int(-j, j));
    for (std::size_t d = 0; d < dur; ++d) emit(&templates[shown]);
  }
  return u;
}

enum class Split : std::uint64_t { train = 1, dev = 2 };

/// Utterance i of a split is drawn from its own derived stream, so train and
/// dev never share a seed and corpora can be generated in any order.
inline std::vector<Utterance> generate_corpus(const SynthSpec& spec, std::size_t count, Split split) {
  std::vector<Utterance> out;
  out.reserve(count);
  const char* prefix = split == Split::train ? "train" : "dev";
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(split), i));
    Utterance u = generate_utterance(spec, rng);
    char id[32];
    std::snprintf(id, sizeof id, "%s-%06zu", prefix, i);
    u.id = id;
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus file:
//   SYNTH1 <V> <F> <count>
//   then per utterance:  <id> <T> <label ids...>
//                        T lines of F space-separated floats

inline void write_corpus(std::ostream& os, std::size_t vocab, std::size_t feat_dim,
                         const std::vector<Utterance>& utts) {
  os << "SYNTH1 " << vocab << ' ' << feat_dim << ' ' << utts.size() << '\n';
  char buf[32];
  for (const auto& u : utts) {
    os << u.id << ' ' << u.frames;
    for (int l : u.labels) os << ' ' << l;
    os << '\n';
    for (std::size_t t = 0; t < u.frames; ++t) {
      for (std::size_t f = 0; f < feat_dim; ++f) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(u.features[t * feat_dim + f]));
        if (f) os << ' ';
        os << buf;
      }
      os << '\n';
    }
  }
}

inline void write_corpus(const std::string& path, std::size_t vocab, std::size_t feat_dim,
                         const std::vector<Utterance>& utts) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write corpus " + path);
  write_corpus(os, vocab, feat_dim, utts);
  if (!os) throw std::runtime_error("failed writing corpus " + path);
}

struct Corpus {
  std::size_t vocab = 0;
  std::size_t feat_dim = 0;
  std::vector<Utterance> utterances;
};

inline Corpus read_corpus(std::istream& is, const std::string& name = "corpus") {
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) -> void {
    throw ParseError(name + ":" + std::to_string(lineno) + ": " + why);
  };
  auto next_line = [&]() -> bool {
    if (!std::getline(is, line)) return false;
    ++lineno;
    return true;
  };
  if (!next_line()) return c;  // empty file
  std::size_t count = 0;
  {
    std::istringstream hs(line);
    std::string magic;
    if (!(hs >> magic >> c.vocab >> c.feat_dim >> count) || magic != "SYNTH1")
      fail("expected header 'SYNTH1 V F count'");
  }
  c.utterances.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    if (!next_line()) fail("truncated: expected utterance " + std::to_string(n + 1) + " of " +
                           std::to_string(count));
    Utterance u;
    u.feat_dim = c.feat_dim;
    std::istringstream us(line);
    if (!(us >> u.id >> u.frames)) fail("expected '<id> <T> <labels...>'");
    int label;
    while (us >> label) {
      if (label < 1 || static_cast<std::size_t>(label) > c.vocab)
        fail("label " + std::to_string(label) + " outside [1, " + std::to_string(c.vocab) + "]");
      u.labels.push_back(label);
    }
    if (!us.eof()) fail("bad label list");
    u.features.reserve(u.frames * c.feat_dim);
    for (std::size_t t = 0; t < u.frames; ++t) {
      if (!next_line()) fail("truncated: utterance " + u.id + " has fewer than " +
                             std::to_string(u.frames) + " frames");
      const char* p = line.data();
      const char* end = line.data() + line.size();
      for (std::size_t f = 0; f < c.feat_dim; ++f) {
        while (p < end && *p == ' ') ++p;
        float v = 0;
        auto [q, ec] = std::from_chars(p, end, v);
        if (ec != std::errc()) fail("expected " + std::to_string(c.feat_dim) + " floats, column " +
                                    std::to_string(f + 1) + " is bad");
        u.features.push_back(v);
        p = q;
      }
      while (p < end && *p == ' ') ++p;
      if (p != end) fail("trailing data after " + std::to_string(c.feat_dim) + " floats");
    }
    c.utterances.push_back(std::move(u));
  }
  return c;
}

inline Corpus read_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open corpus " + path);
  return read_corpus(is, path);
}

/// "id symbol" per line; 0 is the blank.
inline void write_symbol_table(std::ostream& os, std::size_t vocab) {
  os << "0 <blank>\n";
  for (std::size_t i = 1; i <= vocab; ++i) {
    if (vocab <= 26) {
      os << i << ' ' << static_cast<char>('a' + i - 1) << '\n';
    } else {
      os << i << " s" << i << '\n';
    }
  }
}

inline std::vector<std::string> read_symbol_table(std::istream& is) {
  std::vector<std::string> table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t id;
    std::string sym;
    if (!(ls >> id >> sym)) throw ParseError("symbols:" + std::to_string(lineno) + ": expected 'id symbol'");
    if (table.size() <= id) table.resize(id + 1);
    table[id] = sym;
  }
  return table;
}

}  // namespace schunk
