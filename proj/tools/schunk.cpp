// schunk: train, evaluate, stream, benchmark and inspect shifted-chunk
// encoders on the synthetic corpus. Errors print one line, "error: <reason>",
// and exit with status 1.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "schunk/schunk.hpp"

namespace fs = std::filesystem;
using namespace schunk;

namespace {

struct Overrides {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t chunk_size = 0;
  std::size_t layers = 0;
  std::string variant;
  bool seed_set = false;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "key = value config file");
  cmd->add_option("--seed", o.seed, "training seed")->each([&](const std::string&) { o.seed_set = true; });
  cmd->add_option("--chunk-size", o.chunk_size, "encoder chunk size N");
  cmd->add_option("--layers", o.layers, "number of encoder layers (even)");
  cmd->add_option("--variant", o.variant, "transformer | conformer")
      ->check(CLI::IsMember({"transformer", "conformer"}));
}

RunConfig resolve(const Overrides& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed_set) rc.train.seed = o.seed;
  if (o.chunk_size) rc.encoder.chunk_size = o.chunk_size;
  if (o.layers) rc.encoder.num_layers = o.layers;
  if (!o.variant.empty()) rc.encoder.variant = parse_variant(o.variant);
  rc.encoder.validate();
  rc.synth.validate();
  return rc;
}

std::string join(const std::vector<int>& symbols, const std::vector<std::string>& table = {}) {
  std::string out;
  for (int s : symbols) {
    if (!out.empty()) out += ' ';
    const auto i = static_cast<std::size_t>(s);
    out += i < table.size() && !table[i].empty() ? table[i] : std::to_string(s);
  }
  return out;
}

std::vector<std::string> default_symbols(std::size_t vocab) {
  std::stringstream ss;
  write_symbol_table(ss, vocab);
  return read_symbol_table(ss);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Overrides& o, const std::string& out) {
  const RunConfig rc = resolve(o);
  fs::create_directories(out);
  const auto train = generate_corpus(rc.synth, rc.train.train_count, Split::train);
  const auto dev = generate_corpus(rc.synth, rc.train.dev_count, Split::dev);
  write_corpus((fs::path(out) / "train.txt").string(), rc.synth.vocab, rc.synth.feat_dim, train);
  write_corpus((fs::path(out) / "dev.txt").string(), rc.synth.vocab, rc.synth.feat_dim, dev);
  std::ofstream sym(fs::path(out) / "symbols.txt");
  write_symbol_table(sym, rc.synth.vocab);
  std::printf("wrote %zu train and %zu dev utterances to %s\n", train.size(), dev.size(), out.c_str());
  return 0;
}

std::vector<Utterance> load_or_generate(const std::string& path, const RunConfig& rc, Split split) {
  if (path.empty()) {
    return generate_corpus(rc.synth, split == Split::train ? rc.train.train_count : rc.train.dev_count, split);
  }
  Corpus c = read_corpus(path);
  if (c.feat_dim != rc.encoder.input_feat_dim) {
    throw ConfigError(path + ": feature dim " + std::to_string(c.feat_dim) + " does not match config feat_dim " +
                      std::to_string(rc.encoder.input_feat_dim));
  }
  if (c.vocab > rc.synth.vocab) {
    throw ConfigError(path + ": vocab " + std::to_string(c.vocab) + " exceeds config vocab " +
                      std::to_string(rc.synth.vocab));
  }
  return std::move(c.utterances);
}

int cmd_train(const Overrides& o, const std::string& train_path, const std::string& dev_path,
              const std::string& out, const std::string& resume) {
  const RunConfig rc = resolve(o);
  const auto train = load_or_generate(train_path, rc, Split::train);
  const auto dev = load_or_generate(dev_path, rc, Split::dev);
  fs::create_directories(out);

  Model<float> model = init_model<float>(rc.encoder, rc.synth.vocab, rc.train.seed);
  std::size_t start = 1;
  std::optional<TrainingState> restored;
  if (!resume.empty()) {
    Checkpoint ck = load_checkpoint(resume, &rc.encoder);
    if (!ck.training) throw ParseError(resume + ": no training state to resume from");
    if (ck.model.vocab() != rc.synth.vocab) throw ParseError(resume + ": config mismatch: vocab differs");
    model = std::move(ck.model);
    restored = std::move(ck.training);
    start = restored->epoch + 1;
  }
  Trainer<float> trainer(model, rc.train);
  if (restored) {
    trainer.optimizer().set_steps(restored->adam_step);
    trainer.optimizer().first_moments() = restored->first_moments;
    trainer.optimizer().second_moments() = restored->second_moments;
  }
  std::ofstream metrics(fs::path(out) / "metrics.tsv", start == 1 ? std::ios::trunc : std::ios::app);
  if (start == 1) metrics << "epoch\ttrain_loss\tdev_loss\tdev_ter\tdev_seq_acc\tlr\tseconds\n";

  std::printf("training %zu parameters on %zu utterances (dev %zu), epochs %zu..%zu\n",
              parameter_count(model), train.size(), dev.size(), start, rc.train.epochs);
  trainer.fit(train, dev, start, [&](const EpochLog& log) {
    TrainingState st;
    st.epoch = log.epoch;
    st.adam_step = trainer.optimizer().steps();
    st.first_moments = trainer.optimizer().first_moments();
    st.second_moments = trainer.optimizer().second_moments();
    char name[32];
    std::snprintf(name, sizeof name, "epoch-%03zu.ckpt", log.epoch);
    save_checkpoint((fs::path(out) / name).string(), model, &st);
    metrics << log.epoch << '\t' << log.train_loss << '\t' << log.dev.loss << '\t' << log.dev.token_error_rate
            << '\t' << log.dev.sequence_accuracy << '\t' << log.lr << '\t' << log.seconds << std::endl;
    std::printf("epoch %3zu  train loss %.4f  dev loss %.4f  dev TER %.4f  dev seq acc %.3f  (%.1fs) -> %s\n",
                log.epoch, log.train_loss, log.dev.loss, log.dev.token_error_rate, log.dev.sequence_accuracy,
                log.seconds, name);
    std::fflush(stdout);
    return true;
  });
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& corpus, bool json) {
  Checkpoint ck = load_checkpoint(ckpt);
  Corpus c = read_corpus(corpus);
  if (c.feat_dim != ck.model.config.input_feat_dim)
    throw ConfigError(corpus + ": feature dim does not match the checkpoint");
  check_feasible(c.utterances);
  const EvalReport r = evaluate(ck.model, c.utterances);
  if (json) {
    nlohmann::json j = {{"utterances", r.utterances},
                        {"token_error_rate", r.token_error_rate},
                        {"sequence_accuracy", r.sequence_accuracy},
                        {"loss", r.loss}};
    std::cout << j.dump() << '\n';
  } else {
    std::printf("utterances %zu  token error rate %.4f  sequence accuracy %.4f  loss %.4f\n", r.utterances,
                r.token_error_rate, r.sequence_accuracy, r.loss);
  }
  return 0;
}

int cmd_stream(const std::string& ckpt, const std::string& corpus, const std::string& utt_id,
               std::size_t push_size, double frame_shift_ms, const std::string& symbols_path) {
  Checkpoint ck = load_checkpoint(ckpt);
  Corpus c = read_corpus(corpus);
  if (c.utterances.empty()) throw ParseError(corpus + ": no utterances");
  const Utterance* u = &c.utterances.front();
  if (!utt_id.empty()) {
    u = nullptr;
    for (const auto& x : c.utterances)
      if (x.id == utt_id) u = &x;
    if (!u) throw std::invalid_argument("utterance " + utt_id + " not found in " + corpus);
  }
  if (u->feat_dim != ck.model.config.input_feat_dim)
    throw ConfigError(corpus + ": feature dim does not match the checkpoint");
  std::vector<std::string> table = default_symbols(ck.model.vocab());
  if (!symbols_path.empty()) {
    std::ifstream is(symbols_path);
    if (!is) throw std::runtime_error("cannot open symbol table " + symbols_path);
    table = read_symbol_table(is);
  }

  auto model = std::make_shared<const Model<float>>(std::move(ck.model));
  NoGradGuard no_grad;
  StreamState<float> state = stream_open(model);
  const double enc_ms = frame_shift_ms * kSubsampleFactor;
  const Tensor<float> feats = u->features_tensor<float>();
  std::printf("utterance %s: %zu frames, push %zu, chunk %zu encoder frames (%.0f ms)\n", u->id.c_str(), u->frames,
              push_size, model->config.chunk_size, measure_latency(model->config, frame_shift_ms).milliseconds);
  auto show = [&](const StreamOutput<float>& out, std::size_t received) {
    for (const auto& ch : out.chunks) {
      char span[48];
      std::snprintf(span, sizeof span, "%.0f-%.0f ms", ch.first_frame * enc_ms, (ch.first_frame + ch.frames) * enc_ms);
      std::printf("chunk %3zu  frames %4zu-%-4zu  %-15s  after %5zu input frames  new [%s]  partial [%s]\n",
                  ch.index, ch.first_frame, ch.first_frame + ch.frames, span, received,
                  join(ch.symbols, table).c_str(), join(out.hypothesis, table).c_str());
    }
  };
  std::size_t t = 0;
  while (t < u->frames) {
    const std::size_t n = std::min(push_size, u->frames - t);
    const auto out = stream_push(state, slice_time(feats, t, t + n));
    t += n;
    show(out, t);
  }
  const auto last = stream_close(state);
  show(last, t);
  std::printf("final [%s]  reference [%s]\n", join(last.hypothesis, table).c_str(), join(u->labels, table).c_str());
  return 0;
}

int cmd_bench(BenchSettings s, bool json) {
  const auto rows = run_attention_bench(s);
  bool macs_ok = true;
  for (const auto& r : rows) macs_ok = macs_ok && r.macs_match();
  if (json) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      j.push_back({{"length", r.length},
                   {"variant", r.variant},
                   {"seconds", r.seconds},
                   {"projection_macs", r.measured.projection},
                   {"score_context_macs", r.measured.score_context},
                   {"expected_projection_macs", r.expected.projection},
                   {"expected_score_context_macs", r.expected.score_context},
                   {"macs_match", r.macs_match()},
                   {"doubling_ratio", doubling_ratio(rows, r.variant, r.length)}});
    }
    std::cout << j.dump(2) << '\n';
  } else {
    std::printf("N=%zu C=%zu h=%zu, best of %zu\n", s.chunk_size, s.model_dim, s.num_heads, s.repetitions);
    std::printf("%6s  %-8s  %10s  %14s  %14s  %5s  %6s\n", "L", "variant", "ms", "proj MACs", "score+ctx MACs",
                "match", "x2");
    for (const auto& r : rows) {
      const double ratio = doubling_ratio(rows, r.variant, r.length);
      std::printf("%6zu  %-8s  %10.3f  %14llu  %14llu  %5s  %6s\n", r.length, r.variant.c_str(), r.seconds * 1e3,
                  static_cast<unsigned long long>(r.measured.projection),
                  static_cast<unsigned long long>(r.measured.score_context), r.macs_match() ? "yes" : "NO",
                  ratio > 0 ? (std::to_string(ratio).substr(0, 4)).c_str() : "-");
    }
  }
  if (!macs_ok) throw std::runtime_error("measured MACs differ from the closed-form counts");
  return 0;
}

int cmd_average(const std::vector<std::string>& inputs, const std::string& out) {
  const Model<float> avg = average_checkpoints(inputs);
  save_checkpoint(out, avg);
  std::printf("averaged %zu checkpoints into %s\n", inputs.size(), out.c_str());
  return 0;
}

int cmd_inspect_mask(std::size_t length, std::size_t n, const std::string& kind, std::size_t true_length) {
  const std::size_t padded = pad_to_chunk_multiple(length, n).padded_len;
  if (padded != length) {
    throw std::invalid_argument("length " + std::to_string(length) + " is not a multiple of chunk size " +
                                std::to_string(n) + " (pad to " + std::to_string(padded) + ")");
  }
  if (true_length == 0) true_length = length;
  if (true_length > length) throw std::invalid_argument("--true-length exceeds --length");
  ChunkConfig cfg = ChunkConfig::make(true_length, n);
  cfg.padded_len = length;
  const AttentionMask m(kind == "shifted" ? MaskKind::shifted : MaskKind::regular, cfg);
  std::fputs(m.ascii().c_str(), stdout);
  return 0;
}

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shifted-chunk streaming encoder toolkit"};
  app.require_subcommand(1);
  Overrides ov;
  std::string out, train_path, dev_path, resume, ckpt, corpus, utt_id, symbols, kind = "shifted";
  std::vector<std::string> inputs;
  bool json = false;
  std::size_t push_size = 16, length = 8, chunk = 4, true_length = 0;
  double frame_shift = 10.0;
  BenchSettings bench;

  auto* gen = app.add_subcommand("gen-data", "write train/dev corpora and a symbol table");
  add_overrides(gen, ov);
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train encoder + CTC, one checkpoint per epoch");
  add_overrides(train, ov);
  train->add_option("--train", train_path, "training corpus (default: generate from config)");
  train->add_option("--dev", dev_path, "dev corpus (default: generate from config)");
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--resume", resume, "continue from a checkpoint written by train");

  auto* eval = app.add_subcommand("eval", "token error rate, sequence accuracy and loss");
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--corpus", corpus)->required();
  eval->add_flag("--json", json);

  auto* stream = app.add_subcommand("stream", "simulate chunked streaming of one utterance");
  stream->add_option("--checkpoint", ckpt)->required();
  stream->add_option("--corpus", corpus)->required();
  stream->add_option("--utterance", utt_id, "utterance id (default: first)");
  stream->add_option("--push-size", push_size, "input frames per push")->check(CLI::PositiveNumber);
  stream->add_option("--frame-shift-ms", frame_shift, "input frame shift");
  stream->add_option("--symbols", symbols, "symbol table");

  auto* bench_cmd = app.add_subcommand("bench", "attention wall clock and MAC counts");
  bench_cmd->add_option("--lengths", bench.lengths, "sequence lengths");
  bench_cmd->add_option("--chunk-size", bench.chunk_size)->check(CLI::Range(2, 1 << 20));
  bench_cmd->add_option("--dim", bench.model_dim);
  bench_cmd->add_option("--heads", bench.num_heads);
  bench_cmd->add_option("--reps", bench.repetitions);
  bench_cmd->add_option("--seed", bench.seed);
  bench_cmd->add_flag("--json", json);

  auto* average = app.add_subcommand("average", "elementwise mean of checkpoints");
  average->add_option("checkpoints", inputs)->required();
  average->add_option("--out", out)->required();

  auto* inspect = app.add_subcommand("inspect-mask", "print an attention mask, '#' = allowed");
  inspect->add_option("--length", length, "padded length L'")->check(CLI::PositiveNumber);
  inspect->add_option("--chunk-size", chunk)->check(CLI::Range(2, 1 << 20));
  inspect->add_option("--kind", kind)->check(CLI::IsMember({"regular", "shifted"}));
  inspect->add_option("--true-length", true_length, "unpadded length (default: L')");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(ov, out);
    if (*train) return cmd_train(ov, train_path, dev_path, out, resume);
    if (*eval) return cmd_eval(ckpt, corpus, json);
    if (*stream) return cmd_stream(ckpt, corpus, utt_id, push_size, frame_shift, symbols);
    if (*bench_cmd) return cmd_bench(bench, json);
    if (*average) return cmd_average(inputs, out);
    if (*inspect) return cmd_inspect_mask(length, chunk, kind, true_length);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 1;
}
