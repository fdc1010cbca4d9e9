#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "mslka/train.hpp"

using namespace mslka;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "mslka_test_training" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

double diff_fraction(const SamplePair& p) {
  const int h = p.input.h(), w = p.input.w();
  int diff = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool d = false;
      for (int c = 0; c < 3; ++c) d = d || p.input.at(0, c, y, x) != p.gt.at(0, c, y, x);
      diff += d;
    }
  return static_cast<double>(diff) / (h * w);
}

NetworkConfig tiny_config() {
  NetworkConfig cfg;
  cfg.stage_channels = {4, 8};
  cfg.blocks_per_stage = 1;
  cfg.input_size = 16;
  return cfg;
}

TrainConfig tiny_train(int steps) {
  TrainConfig tc;
  tc.batch_size = 2;
  tc.input_size = 16;
  tc.total_steps = steps;
  tc.warmup_steps = TrainConfig::default_warmup(steps);
  tc.seed = 5;
  return tc;
}

InMemoryDataset tiny_data(int n = 3) {
  std::vector<SamplePair> pairs;
  for (int i = 0; i < n; ++i) pairs.push_back(synth_sample(16, 2, i));
  return InMemoryDataset(pairs);
}

std::vector<float> flat_params(const Network<float>& net) {
  std::vector<float> out;
  for (const auto& [_, t] : net.parameters().entries()) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

}  // namespace

TEST(Synth, DeterministicPerSeedAndIndex) {
  const auto a = synth_sample(32, 3, 7), b = synth_sample(32, 3, 7);
  EXPECT_EQ(a.input.values(), b.input.values());
  EXPECT_EQ(a.gt.values(), b.gt.values());
  EXPECT_NE(synth_sample(32, 3, 8).gt.values(), a.gt.values());
  EXPECT_NE(synth_sample(32, 4, 7).gt.values(), a.gt.values());
}

TEST(Synth, GtIsTheBackgroundStream) {
  for (std::uint64_t i = 0; i < 5; ++i) {
    auto rng = detail::sample_rng(9, i, 0);
    EXPECT_EQ(synth_background(32, rng).values(), synth_sample(32, 9, i).gt.values());
  }
}

TEST(Synth, TextCoversASmallFractionOfPixels) {
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto p = synth_sample(64, 1, i);
    const double f = diff_fraction(p);
    EXPECT_GE(f, 0.005) << i;
    EXPECT_LE(f, 0.40) << i;
    for (float v : p.input.values()) {
      EXPECT_EQ(v, std::round(v * 255.0f) / 255.0f);
    }
  }
}

TEST(Synth, GenerateWritesPairedPngs) {
  const auto dir = fresh_dir("gen");
  synth_generate(4, 16, 3, dir);
  const auto ds = load_paired_dataset(dir);
  ASSERT_EQ(ds.size(), 4u);
  EXPECT_EQ(ds.names(), (std::vector<std::string>{"000000.png", "000001.png", "000002.png", "000003.png"}));
  const auto p = ds.load(2), ref = synth_sample(16, 3, 2);
  EXPECT_EQ(p.input.values(), ref.input.values());
  EXPECT_EQ(p.gt.values(), ref.gt.values());
  EXPECT_THROW(synth_generate(1, 12, 3, dir), ConfigError);
  EXPECT_THROW(synth_generate(0, 16, 3, dir), ConfigError);
}

TEST(PairedDataset, RejectsUnpairedFiles) {
  const auto dir = fresh_dir("unpaired");
  synth_generate(2, 16, 3, dir);
  write_png(dir / "input" / "extra.png", synth_sample(16, 3, 0).input);
  try {
    load_paired_dataset(dir);
    FAIL() << "expected PairingError";
  } catch (const PairingError& e) {
    EXPECT_NE(std::string(e.what()).find("extra.png"), std::string::npos);
  }
  EXPECT_THROW(load_paired_dataset(fresh_dir("empty")), IoError);
}

TEST(Augment, ZeroDrawIsIdentity) {
  const auto p = synth_sample(32, 1, 0);
  const auto q = augment_pair(p, AugmentDraw{});
  EXPECT_EQ(q.input.values(), p.input.values());
  EXPECT_EQ(q.gt.values(), p.gt.values());

  Rng rng(3);
  const auto r = augment_pair(p, rng, AugmentConfig{0.0, 0.0});
  EXPECT_EQ(r.input.values(), p.input.values());
}

TEST(Augment, SameSeedSameResult) {
  const auto p = synth_sample(32, 1, 1);
  Rng a(11), b(11);
  for (int i = 0; i < 5; ++i) {
    const auto x = augment_pair(p, a), y = augment_pair(p, b);
    EXPECT_EQ(x.input.values(), y.input.values());
    EXPECT_EQ(x.gt.values(), y.gt.values());
  }
}

TEST(Augment, DrawsStayInRange) {
  Rng rng(12);
  int flips_h = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto d = AugmentDraw::sample(rng);
    EXPECT_LE(std::abs(d.angle_deg), 10.0);
    flips_h += d.flip_h;
  }
  EXPECT_GT(flips_h, 400);
  EXPECT_LT(flips_h, 600);
}

TEST(Augment, FlipsAreExactMirrors) {
  const auto p = synth_sample(16, 1, 2);
  const auto q = augment_pair(p, AugmentDraw{0.0, true, true});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) EXPECT_EQ(q.input.at(0, c, y, x), p.input.at(0, c, 15 - y, 15 - x));
}

TEST(Augment, TransportsAgreementMask) {
  // Where input and gt agree, every pixel whose bilinear footprint stays
  // inside the agreement region must agree after the transform too.
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = synth_sample(32, 4, trial);
    const auto d = AugmentDraw::sample(rng);
    const auto q = augment_pair(p, d);
    Tensor<float> mask({1, 1, 32, 32});
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        bool same = true;
        for (int c = 0; c < 3; ++c) same = same && p.input.at(0, c, y, x) == p.gt.at(0, c, y, x);
        mask.at(0, 0, y, x) = same ? 1.0f : 0.0f;
      }
    const auto moved = apply_augment(mask, d);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        if (moved.at(0, 0, y, x) < 1.0f) continue;
        for (int c = 0; c < 3; ++c) EXPECT_EQ(q.input.at(0, c, y, x), q.gt.at(0, c, y, x));
      }
  }
}

TEST(AdamW, DecayOnlyStep) {
  TrainConfig cfg;
  std::vector<Tensor<double>> params{Tensor<double>({1, 1, 1, 3}, {1.0, -2.0, 0.5})};
  OptimizerState<double> state;
  adamw_step(params, {{0.0, 0.0, 0.0}}, state, cfg, 1e-3);
  EXPECT_DOUBLE_EQ(params[0].values()[0], 1.0 * (1 - 1e-7));
  EXPECT_DOUBLE_EQ(params[0].values()[1], -2.0 * (1 - 1e-7));
  EXPECT_EQ(state.step, 1);
}

TEST(AdamW, FirstStepClosedForm) {
  TrainConfig cfg;
  cfg.adam_eps = 1e-12;
  std::vector<Tensor<double>> params{Tensor<double>({1, 1, 1, 1}, {1.0})};
  OptimizerState<double> state;
  adamw_step(params, {{2.0}}, state, cfg, 0.1);
  EXPECT_NEAR(params[0].item(), 0.89999, 1e-4);
}

TEST(AdamW, FirstStepIsSignTimesLr) {
  TrainConfig cfg;
  cfg.weight_decay = 0;
  cfg.adam_eps = 1e-12;
  std::vector<double> g{3.0, -0.5, 1e-2, -40.0};
  std::vector<Tensor<double>> params{Tensor<double>({1, 1, 1, 4}, {0.0, 0.0, 0.0, 0.0})};
  OptimizerState<double> state;
  adamw_step(params, {g}, state, cfg, 0.01);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(params[0].values()[i], -0.01 * (g[i] > 0 ? 1 : -1), 1e-9);
}

TEST(AdamW, MinimizesAQuadratic) {
  TrainConfig cfg;
  std::vector<Tensor<double>> params{Tensor<double>({1, 1, 1, 2}, {3.0, -4.0})};
  OptimizerState<double> state;
  for (int k = 0; k < 300; ++k) {
    const auto v = params[0].values();
    adamw_step(params, {{2 * v[0], 2 * v[1]}}, state, cfg, 0.05);
  }
  EXPECT_LT(std::abs(params[0].values()[0]), 0.05);
  EXPECT_LT(std::abs(params[0].values()[1]), 0.05);
}

TEST(AdamW, RejectsMismatchedGradients) {
  TrainConfig cfg;
  std::vector<Tensor<double>> params{Tensor<double>({1, 1, 1, 2})};
  OptimizerState<double> state;
  EXPECT_THROW(adamw_step(params, {{1.0}}, state, cfg, 0.1), DimensionError);
  EXPECT_THROW(adamw_step(params, {}, state, cfg, 0.1), DimensionError);
  EXPECT_THROW(adamw_step(params, {{1.0, 1.0}}, state, cfg, -1.0), UsageError);
}

TEST(Schedule, EndpointsAndMidpoint) {
  TrainConfig cfg;
  cfg.total_steps = 600;
  cfg.warmup_steps = 30;
  EXPECT_EQ(lr_at_step(0, cfg), 0.0);
  EXPECT_EQ(lr_at_step(30, cfg), 1e-3);
  EXPECT_NEAR(lr_at_step(15, cfg), 5e-4, 1e-15);
  EXPECT_NEAR(lr_at_step(315, cfg), 5e-4, 1e-12);
  EXPECT_NEAR(lr_at_step(600, cfg), 0.0, 1e-18);
  EXPECT_THROW(lr_at_step(601, cfg), UsageError);
  EXPECT_THROW(lr_at_step(-1, cfg), UsageError);
  EXPECT_EQ(TrainConfig::default_warmup(600), 30);
}

TEST(Schedule, NoJumps) {
  for (auto [total, warm] : {std::pair{600, 30}, std::pair{100, 1}, std::pair{50, 49}, std::pair{40, 0}}) {
    TrainConfig cfg;
    cfg.total_steps = total;
    cfg.warmup_steps = warm;
    const int denom = warm == 0 ? total - warm : std::min(warm, total - warm);
    const double bound = cfg.lr / denom * (1 + std::numbers::pi / 2);
    for (int s = 0; s < total; ++s) {
      EXPECT_LE(std::abs(lr_at_step(s + 1, cfg) - lr_at_step(s, cfg)), bound) << total << " " << s;
    }
  }
}

TEST(TrainConfigTest, Validation) {
  TrainConfig cfg;
  cfg.warmup_steps = cfg.total_steps + 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.augment.flip_prob = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.adam_eps = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, ZeroStepsLeavesParametersUnchanged) {
  Network<float> net(tiny_config(), 1);
  const auto before = flat_params(net);
  auto tc = tiny_train(0);
  const auto records = train(net, tiny_data(), FeatureExtractor<float>(), LossWeights{}, tc);
  EXPECT_TRUE(records.empty());
  EXPECT_EQ(flat_params(net), before);
}

TEST(Train, SameSeedGivesIdenticalLogsAndCheckpoints) {
  const auto dir = fresh_dir("determinism");
  auto run = [&](const std::string& tag) {
    Network<float> net(tiny_config(), 1);
    TrainOptions opt;
    opt.ckpt_out = dir / (tag + ".ckpt");
    opt.log_path = dir / (tag + ".jsonl");
    train(net, tiny_data(), FeatureExtractor<float>(), LossWeights{}, tiny_train(6), opt);
  };
  run("a");
  run("b");
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  EXPECT_FALSE(slurp(dir / "a.jsonl").empty());
}

TEST(Train, LogHasOneObjectPerStepWithSchema) {
  const auto dir = fresh_dir("log");
  Network<float> net(tiny_config(), 1);
  TrainOptions opt;
  opt.log_path = dir / "log.jsonl";
  auto tc = tiny_train(4);
  tc.checkpoint_every = 2;
  opt.ckpt_out = dir / "net.ckpt";
  train(net, tiny_data(), FeatureExtractor<float>(), LossWeights{}, tc, opt);
  std::ifstream in(opt.log_path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    ++n;
    EXPECT_EQ(j["step"], n);
    for (const auto* key : {"lr", "rec", "perceptual", "style", "total"}) EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j.size(), 6u);
    EXPECT_DOUBLE_EQ(j["lr"].get<double>(), lr_at_step(n, tc));
  }
  EXPECT_EQ(n, 4);
  EXPECT_TRUE(fs::exists(dir / "net.step2.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "net.ckpt"));
}

TEST(Train, ChangesParametersAndLowersLossOnTinyData) {
  Network<float> net(tiny_config(), 2);
  const auto before = flat_params(net);
  auto tc = tiny_train(40);
  tc.augment = AugmentConfig{0.0, 0.0};
  tc.lr = 3e-3;
  const auto records = train(net, tiny_data(2), FeatureExtractor<float>(), LossWeights{}, tc);
  ASSERT_EQ(records.size(), 40u);
  EXPECT_NE(flat_params(net), before);
  EXPECT_LT(records.back().loss.total, records.front().loss.total);
}

TEST(Train, SizeMismatchFailsBeforeTheFirstStep) {
  Network<float> net(tiny_config(), 1);
  const auto before = flat_params(net);
  auto tc = tiny_train(3);
  tc.input_size = 32;
  EXPECT_THROW(train(net, tiny_data(), FeatureExtractor<float>(), LossWeights{}, tc), ConfigError);
  tc.input_size = 20;
  EXPECT_THROW(train(net, tiny_data(), FeatureExtractor<float>(), LossWeights{}, tc), ConfigError);
  EXPECT_EQ(flat_params(net), before);
}

TEST(Infer, PadsReflectivelyAndCropsBack) {
  Network<float> net(NetworkConfig::toy(), 3);
  Rng rng(4);
  const auto img = random_uniform<float>({1, 3, 70, 70}, rng, 0.0, 1.0);
  const auto out = infer(net, img);
  EXPECT_EQ(out.shape(), img.shape());
  for (float v : out.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  const auto padded = reflect_pad(img, 4);
  EXPECT_EQ(padded.shape(), (Shape{1, 3, 72, 72}));
  EXPECT_EQ(padded.at(0, 1, 70, 3), img.at(0, 1, 68, 3));
  EXPECT_EQ(padded.at(0, 2, 5, 71), img.at(0, 2, 5, 67));
  EXPECT_EQ(crop(padded, 70, 70).values(), img.values());
}

TEST(Infer, DirectoryModeWritesSameNames) {
  const auto dir = fresh_dir("infer");
  synth_generate(2, 16, 1, dir / "data");
  Network<float> net(NetworkConfig::toy(), 3);
  EXPECT_EQ(infer_dir(net, dir / "data" / "input", dir / "out"), 2u);
  EXPECT_EQ(list_png(dir / "out"), list_png(dir / "data" / "input"));
  EXPECT_THROW(infer_dir(net, fresh_dir("no_images"), dir / "out2"), IoError);
}
