#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "mslka/blocks.hpp"

namespace mslka {

enum class Bottleneck { none, aspp, lkspp };

inline std::string to_string(BlockVariant v) { return v == BlockVariant::plain ? "plain" : "with_mslka"; }
inline std::string to_string(Bottleneck b) {
  switch (b) {
    case Bottleneck::none: return "none";
    case Bottleneck::aspp: return "aspp";
    case Bottleneck::lkspp: return "lkspp";
  }
  return "none";
}

inline BlockVariant parse_block_variant(const std::string& s) {
  if (s == "plain") return BlockVariant::plain;
  if (s == "with_mslka") return BlockVariant::with_mslka;
  throw ConfigError("unknown block variant: " + s);
}

inline Bottleneck parse_bottleneck(const std::string& s) {
  if (s == "none") return Bottleneck::none;
  if (s == "aspp") return Bottleneck::aspp;
  if (s == "lkspp") return Bottleneck::lkspp;
  throw ConfigError("unknown bottleneck: " + s);
}

/// Encoder-decoder layout. The deepest scale holds only the bottleneck
/// module; every shallower scale has `blocks_per_stage` basic blocks in the
/// encoder and again in the decoder.
struct NetworkConfig {
  int in_channels = 3;
  int out_channels = 3;
  std::vector<int> stage_channels{64, 128, 256, 512};
  int blocks_per_stage = 2;
  BlockVariant block_variant = BlockVariant::with_mslka;
  Bottleneck bottleneck = Bottleneck::lkspp;
  int input_size = 256;

  static NetworkConfig full_size() { return {}; }

  static NetworkConfig toy() {
    NetworkConfig cfg;
    cfg.stage_channels = {16, 32, 64};
    cfg.input_size = 64;
    return cfg;
  }

  /// Ablation arms: baseline, mslka, mslka-aspp, mslka-lkspp.
  NetworkConfig with_variant(const std::string& name) const {
    NetworkConfig cfg = *this;
    if (name == "baseline") {
      cfg.block_variant = BlockVariant::plain;
      cfg.bottleneck = Bottleneck::none;
    } else if (name == "mslka") {
      cfg.block_variant = BlockVariant::with_mslka;
      cfg.bottleneck = Bottleneck::none;
    } else if (name == "mslka-aspp") {
      cfg.block_variant = BlockVariant::with_mslka;
      cfg.bottleneck = Bottleneck::aspp;
    } else if (name == "mslka-lkspp") {
      cfg.block_variant = BlockVariant::with_mslka;
      cfg.bottleneck = Bottleneck::lkspp;
    } else {
      throw ConfigError("unknown variant '" + name +
                        "'; expected baseline, mslka, mslka-aspp or mslka-lkspp");
    }
    return cfg;
  }

  int downsamplings() const { return static_cast<int>(stage_channels.size()) - 1; }
  int size_multiple() const { return 1 << downsamplings(); }

  void validate() const {
    if (in_channels < 1 || out_channels < 1) throw ConfigError("channel counts must be positive");
    if (stage_channels.empty()) throw ConfigError("stage_channels must not be empty");
    if (blocks_per_stage < 0) throw ConfigError("blocks_per_stage must be >= 0");
    for (int c : stage_channels) {
      if (c < 1) throw ConfigError("stage channels must be positive");
      if (block_variant == BlockVariant::with_mslka && c % 4 != 0) {
        throw ConfigError("stage channels must be divisible by 4 for MSLKA blocks, got " +
                          std::to_string(c));
      }
    }
    if (bottleneck != Bottleneck::none && stage_channels.back() % 4 != 0) {
      throw ConfigError("bottleneck channels must be divisible by 4, got " +
                        std::to_string(stage_channels.back()));
    }
    if (input_size < 1 || input_size % size_multiple() != 0) {
      throw ConfigError("input_size must be a positive multiple of " + std::to_string(size_multiple()));
    }
  }

  nlohmann::json to_json() const {
    return {{"in_channels", in_channels},
            {"out_channels", out_channels},
            {"stage_channels", stage_channels},
            {"blocks_per_stage", blocks_per_stage},
            {"block_variant", to_string(block_variant)},
            {"bottleneck", to_string(bottleneck)},
            {"input_size", input_size}};
  }

  static NetworkConfig from_json(const nlohmann::json& j) {
    NetworkConfig cfg;
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.out_channels = j.at("out_channels").get<int>();
    cfg.stage_channels = j.at("stage_channels").get<std::vector<int>>();
    cfg.blocks_per_stage = j.at("blocks_per_stage").get<int>();
    cfg.block_variant = parse_block_variant(j.at("block_variant").get<std::string>());
    cfg.bottleneck = parse_bottleneck(j.at("bottleneck").get<std::string>());
    cfg.input_size = j.at("input_size").get<int>();
    cfg.validate();
    return cfg;
  }
};

template <Real T>
class Network {
 public:
  Network(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const auto& ch = cfg_.stage_channels;
    const int scales = static_cast<int>(ch.size());
    stem_ = ConvLayer<T>(params_, "stem", ConvSpec::same(cfg_.in_channels, ch[0], 3), rng);
    for (int s = 0; s + 1 < scales; ++s) {
      const std::string p = "enc" + std::to_string(s);
      EncoderStage stage;
      for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
        stage.blocks.emplace_back(params_, p + ".block" + std::to_string(b),
                                  BasicBlockConfig{ch[s], cfg_.block_variant}, rng);
      }
      ConvSpec down = ConvSpec::same(ch[s], ch[s + 1], 3);
      down.stride = 2;
      stage.down = ConvLayer<T>(params_, p + ".down", down, rng);
      encoder_.push_back(std::move(stage));
    }
    if (cfg_.bottleneck != Bottleneck::none) {
      const PyramidKind kind = cfg_.bottleneck == Bottleneck::lkspp ? PyramidKind::lkspp : PyramidKind::aspp;
      bottleneck_.emplace_back(params_, "bottleneck", LKSPPConfig::for_channels(ch.back()), kind, rng);
    }
    for (int s = scales - 2; s >= 0; --s) {
      const std::string p = "dec" + std::to_string(s);
      DecoderStage stage;
      stage.reduce = ConvLayer<T>(params_, p + ".reduce", ConvSpec::pointwise(ch[s + 1], ch[s]), rng);
      stage.fuse = ConvLayer<T>(params_, p + ".fuse", ConvSpec::same(2 * ch[s], ch[s], 3), rng);
      for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
        stage.blocks.emplace_back(params_, p + ".block" + std::to_string(b),
                                  BasicBlockConfig{ch[s], cfg_.block_variant}, rng);
      }
      decoder_.push_back(std::move(stage));
    }
    head_ = ConvLayer<T>(params_, "head", ConvSpec::pointwise(ch[0], cfg_.out_channels), rng);
  }

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// (n, in, h, w) in [0,1] to (n, out, h, w) in [0,1].
  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.c() != cfg_.in_channels) {
      throw DimensionError("network expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                           std::to_string(x.c()));
    }
    const int m = cfg_.size_multiple();
    if (x.h() % m != 0 || x.w() % m != 0) {
      throw DimensionError("input size " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                           " must be a multiple of " + std::to_string(m) + "; pad the image first");
    }
    Tensor<T> h = relu(stem_(x));
    std::vector<Tensor<T>> skips;
    for (const auto& stage : encoder_) {
      for (const auto& b : stage.blocks) h = b(h);
      skips.push_back(h);
      h = relu(stage.down(h));
    }
    if (!bottleneck_.empty()) h = bottleneck_.front()(h);
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      const auto& stage = decoder_[i];
      const Tensor<T>& skip = skips[skips.size() - 1 - i];
      h = relu(stage.reduce(upsample_bilinear(h, skip.h(), skip.w())));
      h = relu(stage.fuse(concat_channels<T>({h, skip})));
      for (const auto& b : stage.blocks) h = b(h);
    }
    return sigmoid(head_(h));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return forward(x); }

  const NetworkConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  std::size_t count_params() const { return params_.count(); }

  /// Multiply-accumulates of every convolution for one image of size h x w.
  /// Pointwise ops (norm, activations, resampling, attention products) are
  /// not counted.
  std::size_t count_macs(int h, int w) const {
    std::size_t total = stem_.macs(h, w);
    std::vector<std::pair<int, int>> sizes;
    for (const auto& stage : encoder_) {
      for (const auto& b : stage.blocks) total += b.macs(h, w);
      sizes.emplace_back(h, w);
      total += stage.down.macs(h, w);
      h = stage.down.spec.out_size(h, 3);
      w = stage.down.spec.out_size(w, 3);
    }
    if (!bottleneck_.empty()) total += bottleneck_.front().macs(h, w);
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      const auto& stage = decoder_[i];
      std::tie(h, w) = sizes[sizes.size() - 1 - i];
      total += stage.reduce.macs(h, w) + stage.fuse.macs(h, w);
      for (const auto& b : stage.blocks) total += b.macs(h, w);
    }
    return total + head_.macs(h, w);
  }

 private:
  struct EncoderStage {
    std::vector<BasicBlock<T>> blocks;
    ConvLayer<T> down;
  };
  struct DecoderStage {
    ConvLayer<T> reduce;
    ConvLayer<T> fuse;
    std::vector<BasicBlock<T>> blocks;
  };

  NetworkConfig cfg_;
  ParameterSet<T> params_;
  ConvLayer<T> stem_;
  std::vector<EncoderStage> encoder_;
  std::vector<SpatialPyramid<T>> bottleneck_;  // zero or one
  std::vector<DecoderStage> decoder_;
  ConvLayer<T> head_;
};

template <Real T = float>
Network<T> build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  return Network<T>(cfg, seed);
}

template <Real T>
Tensor<T> forward_image(const Network<T>& net, const Tensor<T>& x) {
  return net.forward(x);
}

template <Real T>
std::size_t count_params(const Network<T>& net) {
  return net.count_params();
}

template <Real T>
std::size_t count_macs(const Network<T>& net, int h, int w) {
  return net.count_macs(h, w);
}

}  // namespace mslka
