// Command-line entry point: gen-data, train, infer, eval, bench.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error. The resolved
// configuration and all diagnostics go to stderr; results go to stdout.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mslka/blocks.hpp"
#include "mslka/checkpoint.hpp"
#include "mslka/metrics.hpp"
#include "mslka/network.hpp"
#include "mslka/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mslka;

namespace {

constexpr double kReferenceParams = 9.62e6;
constexpr double kParamLow = 7.7e6;
constexpr double kParamHigh = 11.5e6;

void print_config(const std::string& command, const json& cfg) {
  std::cerr << "config " << json{{"command", command}, {"config", cfg}}.dump() << "\n";
}

struct GenDataArgs {
  int count = 16;
  int size = 64;
  std::uint64_t seed = 1;
  std::string out = "data";
};

struct TrainArgs {
  std::string data;
  int steps = 600;
  int batch = 4;
  int size = 64;
  std::uint64_t seed = 1;
  std::string variant = "mslka-lkspp";
  std::string preset = "toy";
  std::string ckpt_out = "model.ckpt";
  std::string log;
};

struct InferArgs {
  std::string ckpt;
  std::string in;
  std::string out;
};

struct EvalArgs {
  std::string out_dir;
  std::string ref_dir;
  std::string json_path;
};

struct BenchArgs {
  std::vector<int> sweep_k{10, 15, 20, 25};
  int channels = 64;
  bool probe_rf = false;
};

int run_gen_data(const GenDataArgs& a) {
  print_config("gen-data", {{"count", a.count}, {"size", a.size}, {"seed", a.seed}, {"out", a.out}});
  synth_generate(a.count, a.size, a.seed, a.out);
  std::cout << "wrote " << a.count << " pairs of " << a.size << "x" << a.size << " to " << a.out << "\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  NetworkConfig net_cfg = (a.preset == "full" ? NetworkConfig::full_size() : NetworkConfig::toy()).with_variant(a.variant);
  net_cfg.input_size = a.size;
  net_cfg.validate();
  TrainConfig tc;
  tc.total_steps = a.steps;
  tc.warmup_steps = TrainConfig::default_warmup(a.steps);
  tc.batch_size = a.batch;
  tc.input_size = a.size;
  tc.seed = a.seed;
  tc.validate();
  const LossWeights weights;
  FeatureExtractor<float> fx;

  print_config("train", {{"data", a.data},
                         {"network", net_cfg.to_json()},
                         {"preset", a.preset},
                         {"variant", a.variant},
                         {"train", tc.to_json()},
                         {"loss", {{"lambda_style", weights.lambda_style}, {"lambda_perceptual", weights.lambda_perceptual}}},
                         {"extractor", fx.identity()},
                         {"ckpt_out", a.ckpt_out},
                         {"log", a.log}});

  const auto data = load_paired_dataset(a.data);
  auto net = build_network(net_cfg, a.seed);
  std::cerr << "parameters " << net.count_params() << ", " << data.size() << " training pairs\n";
  TrainOptions opt;
  opt.ckpt_out = a.ckpt_out;
  opt.log_path = a.log;
  const int every = std::max(1, a.steps / 20);
  opt.on_step = [&](const StepRecord& r) {
    if (r.step % every == 0 || r.step == a.steps) {
      char line[160];
      std::snprintf(line, sizeof line, "step %d/%d lr %.3e rec %.4f perceptual %.4f style %.3e total %.4f", r.step,
                    a.steps, r.lr, r.loss.rec, r.loss.perceptual, r.loss.style, r.loss.total);
      std::cerr << line << "\n";
    }
  };
  const auto records = train(net, data, fx, weights, tc, opt);
  json summary{{"steps", records.size()}, {"checkpoint", a.ckpt_out}};
  if (!records.empty()) summary["final"] = records.back().to_json();
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_infer(const InferArgs& a) {
  const auto header = read_checkpoint_header(a.ckpt);
  print_config("infer", {{"ckpt", a.ckpt}, {"in", a.in}, {"out", a.out}, {"network", header["config"]}});
  const auto net = load_checkpoint(a.ckpt);
  if (fs::is_directory(a.in)) {
    const auto n = infer_dir(net, a.in, a.out);
    std::cout << "wrote " << n << " images to " << a.out << "\n";
  } else {
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    write_png(a.out, infer(net, read_png(a.in)));
    std::cout << "wrote " << a.out << "\n";
  }
  return 0;
}

int run_eval(const EvalArgs& a) {
  const MetricConfig mc;
  print_config("eval", {{"out_dir", a.out_dir}, {"ref_dir", a.ref_dir}, {"json", a.json_path}, {"metrics", mc.to_json()}});
  const auto report = evaluate_corpus(a.out_dir, a.ref_dir, mc);
  const auto j = report.to_json();
  if (!a.json_path.empty()) {
    std::ofstream out(a.json_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + a.json_path);
    out << j.dump(2) << "\n";
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

/// Dilation for a nominal kernel: the one nearest K/5 for which ceil(K/d)
/// and 2d-1 are both odd.
int dilation_for(int k) {
  int best = -1;
  for (int d = 1; d <= k; ++d) {
    if (((k + d - 1) / d) % 2 == 0) continue;
    if (best < 0 || std::abs(d * 5 - k) < std::abs(best * 5 - k)) best = d;
  }
  if (best < 0) throw ConfigError("no valid dilation for nominal kernel " + std::to_string(k));
  return best;
}

int run_bench(const BenchArgs& a) {
  constexpr int kMap = 64;
  print_config("bench", {{"sweep_k", a.sweep_k}, {"channels", a.channels}, {"probe_rf", a.probe_rf}, {"map", kMap}});
  if (a.channels < 1) throw ConfigError("--channels must be >= 1");

  std::printf("Decomposed large kernel vs dense depthwise KxK + 1x1 (C=%d, %dx%d map)\n", a.channels, kMap, kMap);
  std::printf("%4s %3s %5s %3s %12s %12s %7s %14s %14s %7s\n", "K", "d", "local", "dw", "lka_params", "dense_params",
              "ratio", "lka_macs", "dense_macs", "ratio");
  bool all_cheaper = true;
  for (int k : a.sweep_k) {
    if (k < 2) throw ConfigError("--sweep-k values must be >= 2");
    const auto cfg = LKAConfig::from_nominal(a.channels, k, dilation_for(k));
    const auto lp = lka_param_count(cfg), dp = dense_depthwise_param_count(a.channels, k);
    const auto lm = lka_macs(cfg, kMap, kMap), dm = dense_depthwise_macs(a.channels, k, kMap, kMap);
    all_cheaper = all_cheaper && lp < dp;
    std::printf("%4d %3d %5d %3d %12zu %12zu %7.3f %14zu %14zu %7.3f\n", k, cfg.dilation, cfg.local_kernel,
                cfg.dw_kernel, lp, dp, static_cast<double>(lp) / dp, lm, dm, static_cast<double>(lm) / dm);
  }
  std::printf("decomposed params < dense params on every row: %s\n\n", all_cheaper ? "yes" : "no");

  const auto toy = build_network(NetworkConfig::toy(), 1);
  std::printf("toy preset (%s): %zu parameters, %zu MACs at 64x64\n", toy.config().to_json()["stage_channels"].dump().c_str(),
              toy.count_params(), toy.count_macs(64, 64));
  const auto full = build_network(NetworkConfig::full_size(), 1);
  const double n = static_cast<double>(full.count_params());
  const bool inside = n >= kParamLow && n <= kParamHigh;
  std::printf("full-size preset (%s): %zu parameters, %zu MACs at 256x256\n",
              full.config().to_json()["stage_channels"].dump().c_str(), full.count_params(), full.count_macs(256, 256));
  std::printf("reference 9.62M: delta %+.0f (%+.1f%%); range [7.7M, 11.5M]: %s\n", n - kReferenceParams,
              100.0 * (n - kReferenceParams) / kReferenceParams, inside ? "inside" : "OUTSIDE");

  if (a.probe_rf) {
    std::printf("\nReceptive field probe (impulse gradient, random weights)\n");
    std::printf("%-16s %8s %8s %8s %s\n", "path", "nominal", "height", "width", "ok");
    for (const auto& row : probe_mslka_paths()) {
      const bool control = row.path.rfind("stacked", 0) == 0;
      const bool ok = control ? row.extent.height == row.nominal && row.extent.width == row.nominal
                              : row.extent.height >= row.nominal && row.extent.width >= row.nominal;
      std::printf("%-16s %8d %8d %8d %s\n", row.path.c_str(), row.nominal, row.extent.height, row.extent.width,
                  ok ? "yes" : "no");
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scene text removal network: data generation, training, inference, evaluation and cost bench"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write synthetic input/gt PNG pairs");
  gen_cmd->add_option("--count", gen.count, "Number of pairs")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", gen.size, "Image side in pixels (multiple of 8)");
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--out", gen.out, "Output directory (gets input/ and gt/)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train on a paired directory");
  train_cmd->add_option("--data", tr.data, "Dataset root with input/ and gt/")->required();
  train_cmd->add_option("--steps", tr.steps, "Optimizer steps")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber);
  train_cmd->add_option("--size", tr.size, "Training image side; must match the data");
  train_cmd->add_option("--seed", tr.seed, "Seed for init, shuffling and augmentation");
  train_cmd->add_option("--variant", tr.variant, "Architecture variant")
      ->check(CLI::IsMember({"baseline", "mslka", "mslka-aspp", "mslka-lkspp"}));
  train_cmd->add_option("--preset", tr.preset, "Channel widths")->check(CLI::IsMember({"toy", "full"}));
  train_cmd->add_option("--ckpt-out", tr.ckpt_out, "Checkpoint path");
  train_cmd->add_option("--log", tr.log, "JSON-lines log path");

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "Run a checkpoint on an image or a directory");
  infer_cmd->add_option("--ckpt", inf.ckpt, "Checkpoint path")->required();
  infer_cmd->add_option("--in", inf.in, "Input PNG or directory")->required();
  infer_cmd->add_option("--out", inf.out, "Output PNG or directory")->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Image-quality metrics of outputs against references");
  eval_cmd->add_option("--out-dir", ev.out_dir, "Directory of outputs")->required();
  eval_cmd->add_option("--ref-dir", ev.ref_dir, "Directory of references")->required();
  eval_cmd->add_option("--json", ev.json_path, "Also write the report to this file");

  BenchArgs be;
  auto* bench_cmd = app.add_subcommand("bench", "Parameter, MAC and receptive-field report");
  bench_cmd->add_option("--sweep-k", be.sweep_k, "Nominal kernel sizes")->delimiter(',');
  bench_cmd->add_option("--channels", be.channels, "Channels for the cost sweep");
  bench_cmd->add_flag("--probe-rf", be.probe_rf, "Also measure receptive fields");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    return 1;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(tr);
    if (*infer_cmd) return run_infer(inf);
    if (*eval_cmd) return run_eval(ev);
    if (*bench_cmd) return run_bench(be);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    for (auto* sub : app.get_subcommands()) std::cerr << sub->help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
