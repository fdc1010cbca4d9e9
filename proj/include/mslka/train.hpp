#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mslka/checkpoint.hpp"
#include "mslka/data.hpp"
#include "mslka/losses.hpp"
#include "mslka/metrics.hpp"
#include "mslka/network.hpp"
#include "mslka/optim.hpp"

namespace mslka {

/// Pairs held in memory; same interface as PairedDataset.
class InMemoryDataset {
 public:
  explicit InMemoryDataset(std::vector<SamplePair> pairs) : pairs_(std::move(pairs)) {
    if (pairs_.empty()) throw IoError("empty dataset");
  }
  std::size_t size() const { return pairs_.size(); }
  SamplePair load(std::size_t i) const { return pairs_.at(i); }

 private:
  std::vector<SamplePair> pairs_;
};

template <typename D>
concept PairSource = requires(const D& d, std::size_t i) {
  { d.size() } -> std::convertible_to<std::size_t>;
  { d.load(i) } -> std::same_as<SamplePair>;
};

/// Concatenates (1, c, h, w) tensors along the batch axis.
inline Tensor<float> stack_batch(const std::vector<Tensor<float>>& items) {
  if (items.empty()) throw DimensionError("cannot stack an empty batch");
  Shape s = items.front().shape();
  const std::size_t per = s.numel() / s.n;
  s.n = 0;
  for (const auto& t : items) {
    if (t.c() != items.front().c() || t.h() != items.front().h() || t.w() != items.front().w()) {
      throw DimensionError("batch items differ in shape: " + t.shape().str() + " vs " + items.front().shape().str());
    }
    s.n += t.n();
  }
  std::vector<float> data;
  data.reserve(per * s.n);
  for (const auto& t : items) data.insert(data.end(), t.values().begin(), t.values().end());
  return Tensor<float>(s, std::move(data));
}

struct StepRecord {
  int step = 0;
  double lr = 0;
  LossReport loss;

  nlohmann::json to_json() const {
    return {{"step", step}, {"lr", lr}, {"rec", loss.rec}, {"perceptual", loss.perceptual},
            {"style", loss.style}, {"total", loss.total}};
  }
};

struct TrainOptions {
  std::filesystem::path ckpt_out;  // empty: no checkpoints
  std::filesystem::path log_path;  // empty: no JSON-lines log
  std::function<void(const StepRecord&)> on_step;
};

/// Epoch-wise shuffled index stream; a new permutation starts whenever the
/// previous one is exhausted.
class IndexStream {
 public:
  IndexStream(std::size_t n, Rng rng) : n_(n), rng_(std::move(rng)) {}

  std::size_t next() {
    if (pos_ == order_.size()) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
      for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// AdamW with warmup + cosine schedule on the weighted three-term loss.
/// Update k (0-based) uses lr_at_step(k + 1). Deterministic for a seed.
template <PairSource D>
std::vector<StepRecord> train(Network<float>& net, const D& data, const FeatureExtractor<float>& fx,
                              const LossWeights& weights, const TrainConfig& cfg, const TrainOptions& opt = {}) {
  cfg.validate();
  weights.validate();
  const int m = net.config().size_multiple();
  if (cfg.input_size % m != 0 || cfg.input_size % 8 != 0) {
    throw ConfigError("input_size " + std::to_string(cfg.input_size) + " must be a multiple of " +
                      std::to_string(std::max(m, 8)));
  }
  {
    const auto first = data.load(0);
    if (first.input.h() != cfg.input_size || first.input.w() != cfg.input_size) {
      throw ConfigError("dataset images are " + std::to_string(first.input.h()) + "x" +
                        std::to_string(first.input.w()) + " but input_size is " + std::to_string(cfg.input_size));
    }
  }

  std::ofstream log;
  if (!opt.log_path.empty()) {
    log.open(opt.log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write log " + opt.log_path.string());
  }
  auto save = [&](const std::filesystem::path& path) { save_checkpoint(net, path, fx.identity()); };

  Rng root(cfg.seed);
  IndexStream indices(data.size(), root.fork());
  Rng aug_rng = root.fork();

  std::vector<Tensor<float>> params;
  for (auto& [_, t] : net.parameters().entries()) params.push_back(t);
  OptimizerState<float> state;
  std::vector<StepRecord> records;

  for (int k = 0; k < cfg.total_steps; ++k) {
    std::vector<Tensor<float>> xs, ys;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto pair = augment_pair(data.load(indices.next()), aug_rng, cfg.augment);
      if (pair.input.h() != cfg.input_size || pair.input.w() != cfg.input_size) {
        throw ConfigError("dataset image size differs from input_size " + std::to_string(cfg.input_size));
      }
      xs.push_back(pair.input);
      ys.push_back(pair.gt);
    }
    const auto x = stack_batch(xs), y = stack_batch(ys);
    net.parameters().zero_grad();
    const auto terms = loss_total(fx, net(x), y, weights);
    terms.total.backward();

    std::vector<std::vector<float>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
      grads.push_back(p.has_grad() ? std::vector<float>(p.grad().begin(), p.grad().end())
                                   : std::vector<float>(p.numel(), 0.0f));
    }
    net.parameters().zero_grad();
    const double lr = lr_at_step(k + 1, cfg);
    adamw_step(params, grads, state, cfg, lr);

    StepRecord rec{k + 1, lr, terms.report()};
    records.push_back(rec);
    if (log) log << rec.to_json().dump() << '\n';
    if (opt.on_step) opt.on_step(rec);
    if (!opt.ckpt_out.empty() && cfg.checkpoint_every > 0 && (k + 1) % cfg.checkpoint_every == 0 &&
        k + 1 < cfg.total_steps) {
      auto p = opt.ckpt_out;
      p.replace_extension(".step" + std::to_string(k + 1) + opt.ckpt_out.extension().string());
      save(p);
    }
  }
  if (!opt.ckpt_out.empty()) save(opt.ckpt_out);
  return records;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Reflect-pads the bottom and right edges so both sizes are multiples of
/// `multiple`.
inline Tensor<float> reflect_pad(const Tensor<float>& img, int multiple) {
  const Shape s = img.shape();
  const int ph = (s.h + multiple - 1) / multiple * multiple;
  const int pw = (s.w + multiple - 1) / multiple * multiple;
  if (ph == s.h && pw == s.w) return img;
  Tensor<float> out({s.n, s.c, ph, pw});
  for (int b = 0; b < s.n; ++b)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) {
          const int sy = static_cast<int>(detail::reflect_coord(y, s.h));
          const int sx = static_cast<int>(detail::reflect_coord(x, s.w));
          out.at(b, c, y, x) = img.at(b, c, sy, sx);
        }
  return out;
}

inline Tensor<float> crop(const Tensor<float>& img, int h, int w) {
  const Shape s = img.shape();
  if (h == s.h && w == s.w) return img;
  Tensor<float> out({s.n, s.c, h, w});
  for (int b = 0; b < s.n; ++b)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(b, c, y, x) = img.at(b, c, y, x);
  return out;
}

/// Forward pass on an image of any size: pads to the network's multiple,
/// runs without recording history and crops back.
inline Tensor<float> infer(const Network<float>& net, const Tensor<float>& img) {
  NoGradGuard no_grad;
  const auto padded = reflect_pad(img, net.config().size_multiple());
  return crop(net(padded), img.h(), img.w());
}

/// Runs every *.png in `in_dir` and writes same-named 8-bit outputs.
inline std::size_t infer_dir(const Network<float>& net, const std::filesystem::path& in_dir,
                             const std::filesystem::path& out_dir) {
  const auto names = list_png(in_dir);
  if (names.empty()) throw IoError("no PNG images in " + in_dir.string());
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  for (const auto& n : names) write_png(out_dir / n, infer(net, read_png(in_dir / n)));
  return names.size();
}

struct PairScore {
  double psnr_output = 0;  // PSNR(net(input), gt)
  double psnr_input = 0;   // PSNR(input, gt)
  double rec = 0;          // mean L1(net(input), gt)
};

/// Scores every pair of a dataset without augmentation.
template <PairSource D>
std::vector<PairScore> score_dataset(const Network<float>& net, const D& data) {
  std::vector<PairScore> scores;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = data.load(i);
    const auto out = infer(net, p.input);
    const auto o = Image::from_tensor(out), in = Image::from_tensor(p.input), gt = Image::from_tensor(p.gt);
    double l1 = 0;
    for (std::size_t k = 0; k < o.v.size(); ++k) l1 += std::abs(o.v[k] - gt.v[k]);
    scores.push_back({psnr(o, gt), psnr(in, gt), l1 / static_cast<double>(o.v.size())});
  }
  return scores;
}

}  // namespace mslka
