#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace schunk;
using namespace schunk::testing;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "schunk_harness_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.model_dim = 16;
  c.ffn_dim = 32;
  c.chunk_size = 4;
  c.input_feat_dim = 20;
  c.subsample_channels = 4;
  return c;
}

SynthSpec tiny_spec() {
  SynthSpec s;
  s.min_symbols = 2;
  s.max_symbols = 5;
  return s;
}

std::vector<float> flat_parameters(const Model<float>& m) {
  std::vector<float> out;
  for_each_parameter(m, [&](const std::string&, const Tensor<float>& t) {
    out.insert(out.end(), t.data().begin(), t.data().end());
  });
  return out;
}

}  // namespace

TEST(Config, ParsesKnownKeys) {
  std::stringstream ss(
      "# comment\n"
      "num_layers = 4\n"
      "variant = conformer   # trailing\n"
      "chunk_size=8\n"
      "feat_dim = 24\n"
      "noise_std = 0.5\n"
      "context_dependent = true\n"
      "seed = 9\n"
      "data_seed = 11\n");
  const RunConfig rc = parse_config(ss);
  EXPECT_EQ(rc.encoder.num_layers, 4u);
  EXPECT_EQ(rc.encoder.variant, BlockVariant::conformer);
  EXPECT_EQ(rc.encoder.chunk_size, 8u);
  EXPECT_EQ(rc.encoder.input_feat_dim, 24u);
  EXPECT_EQ(rc.synth.feat_dim, 24u);
  EXPECT_DOUBLE_EQ(rc.synth.noise_std, 0.5);
  EXPECT_TRUE(rc.synth.context_dependent);
  EXPECT_EQ(rc.train.seed, 9u);
  EXPECT_EQ(rc.synth.seed, 11u);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  auto error_of = [](const std::string& text) -> std::string {
    std::stringstream ss(text);
    try {
      parse_config(ss, "run.conf");
    } catch (const std::exception& e) {
      return e.what();
    }
    return "";
  };
  EXPECT_NE(error_of("chunk_sise = 4\n").find("run.conf:1: unknown config key 'chunk_sise'"), std::string::npos);
  EXPECT_NE(error_of("\nnum_layers = -2\n").find("run.conf:2:"), std::string::npos);
  EXPECT_NE(error_of("variant = lstm\n").find("variant"), std::string::npos);
  EXPECT_NE(error_of("just words\n").find("key = value"), std::string::npos);
  EXPECT_NE(error_of("num_layers = 3\n").find("even"), std::string::npos);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (auto variant : {BlockVariant::transformer, BlockVariant::conformer}) {
    auto cfg = tiny_config();
    cfg.variant = variant;
    auto m = init_model<float>(cfg, 8, 3);
    const auto path = scratch("rt.ckpt").string();
    save_checkpoint(path, m);
    Checkpoint back = load_checkpoint(path, &cfg);
    EXPECT_EQ(back.model.config, cfg);
    EXPECT_EQ(back.model.vocab(), 8u);
    EXPECT_FALSE(back.training.has_value());
    const auto a = flat_parameters(m), b = flat_parameters(back.model);
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
  }
}

TEST(Checkpoint, MismatchAndCorruptionAreErrors) {
  auto cfg = tiny_config();
  auto m = init_model<float>(cfg, 8, 3);
  const auto path = scratch("mm.ckpt").string();
  save_checkpoint(path, m);
  auto other = cfg;
  other.chunk_size = 8;
  EXPECT_THROW(load_checkpoint(path, &other), ParseError);

  std::string bytes;
  {
    std::ifstream is(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  const auto cut = scratch("cut.ckpt").string();
  std::ofstream(cut, std::ios::binary) << bytes.substr(0, bytes.size() - 10);
  EXPECT_THROW(load_checkpoint(cut), ParseError);
  const auto junk = scratch("junk.ckpt").string();
  std::ofstream(junk) << "hello\n";
  EXPECT_THROW(load_checkpoint(junk), ParseError);
  EXPECT_THROW(load_checkpoint(scratch("missing.ckpt").string()), std::runtime_error);
}

TEST(Checkpoint, Averaging) {
  auto cfg = tiny_config();
  auto m = init_model<float>(cfg, 8, 4);
  const auto one = scratch("avg1.ckpt").string(), neg = scratch("avg2.ckpt").string();
  save_checkpoint(one, m);
  EXPECT_EQ(flat_parameters(average_checkpoints({one})), flat_parameters(m));
  EXPECT_EQ(flat_parameters(average_checkpoints({one, one, one})), flat_parameters(m));

  auto negated = clone_model(m);
  for_each_parameter(negated, [](const std::string&, Tensor<float>& t) {
    for (auto& v : t.mutable_data()) v = -v;
  });
  save_checkpoint(neg, negated);
  for (float v : flat_parameters(average_checkpoints({one, neg}))) ASSERT_EQ(v, 0.0f);

  auto other_cfg = cfg;
  other_cfg.model_dim = 8;
  const auto other = scratch("avg3.ckpt").string();
  save_checkpoint(other, init_model<float>(other_cfg, 8, 4));
  EXPECT_THROW(average_checkpoints({one, other}), ParseError);
  EXPECT_THROW(average_checkpoints({}), std::invalid_argument);
}

TEST(Metrics, EditDistanceAndRates) {
  EXPECT_EQ(edit_distance({1, 2, 3}, {1, 3}), 1u);
  EXPECT_EQ(edit_distance({}, {1, 2}), 2u);
  EXPECT_EQ(edit_distance({1, 2}, {2, 1}), 2u);
  ErrorTally same;
  same.add({1, 2, 3}, {1, 2, 3});
  EXPECT_EQ(same.report().token_error_rate, 0.0);
  EXPECT_EQ(same.report().sequence_accuracy, 1.0);
  ErrorTally empty;
  empty.add({1, 2, 3}, {});
  EXPECT_EQ(empty.report().token_error_rate, 1.0);
  EXPECT_EQ(empty.report().sequence_accuracy, 0.0);
}

TEST(Training, WarmupSchedule) {
  EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 400, 200), 5e-4);
  EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 400, 400), 1e-3);
  EXPECT_DOUBLE_EQ(warmup_lr(1e-3, 400, 1600), 5e-4);
}

TEST(Training, InfeasibleUtteranceIsNamed) {
  SynthSpec spec = tiny_spec();
  auto utts = generate_corpus(spec, 3, Split::train);
  utts[1].labels.assign(100, 1);
  try {
    check_feasible(utts);
    FAIL();
  } catch (const InfeasibleAlignment& e) {
    EXPECT_NE(std::string(e.what()).find("train-000001"), std::string::npos);
  }
}

TEST(Training, OneEpochLowersLossAndIsDeterministic) {
  const auto data = generate_corpus(tiny_spec(), 32, Split::train);
  TrainConfig tc;
  tc.warmup = 4;
  tc.peak_lr = 3e-3;
  auto first_epoch = [&](std::uint64_t seed) {
    auto m = init_model<float>(tiny_config(), 8, 1);
    tc.seed = seed;
    Trainer<float> trainer(m, tc);
    const double before = evaluate(m, data).loss;
    trainer.train_epoch(data, 1);
    return std::pair{before, evaluate(m, data).loss};
  };
  const auto [before, after] = first_epoch(1);
  EXPECT_LT(after, before);
  EXPECT_EQ(first_epoch(1).second, after);
  EXPECT_NE(first_epoch(2).second, after);
}

TEST(Training, ResumeReproducesLosses) {
  const auto data = generate_corpus(tiny_spec(), 24, Split::train);
  TrainConfig tc;
  tc.warmup = 4;
  auto cfg = tiny_config();

  auto m = init_model<float>(cfg, 8, 5);
  Trainer<float> straight(m, tc);
  straight.train_epoch(data, 1);
  const double want = straight.train_epoch(data, 2);

  auto r = init_model<float>(cfg, 8, 5);
  Trainer<float> first(r, tc);
  first.train_epoch(data, 1);
  TrainingState st;
  st.epoch = 1;
  st.adam_step = first.optimizer().steps();
  st.first_moments = first.optimizer().first_moments();
  st.second_moments = first.optimizer().second_moments();
  const auto path = scratch("resume.ckpt").string();
  save_checkpoint(path, r, &st);

  Checkpoint ck = load_checkpoint(path, &cfg);
  ASSERT_TRUE(ck.training.has_value());
  EXPECT_EQ(ck.training->epoch, 1u);
  Trainer<float> resumed(ck.model, tc);
  resumed.optimizer().set_steps(ck.training->adam_step);
  resumed.optimizer().first_moments() = ck.training->first_moments;
  resumed.optimizer().second_moments() = ck.training->second_moments;
  EXPECT_EQ(resumed.train_epoch(data, 2), want);
}
