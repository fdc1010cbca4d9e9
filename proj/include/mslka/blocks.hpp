#pragma once

#include <algorithm>

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "mslka/layers.hpp"
#include "mslka/ops.hpp"

namespace mslka {

// ---------------------------------------------------------------------------
// Configurations
// ---------------------------------------------------------------------------

/// A K x K kernel approximated by a (2d-1) local depthwise convolution, a
/// ceil(K/d) depthwise convolution dilated by d, and a 1x1 convolution.
struct LKAConfig {
  int channels = 0;
  int nominal_k = 0;
  int dilation = 1;
  int dw_kernel = 1;
  int local_kernel = 1;

  static LKAConfig from_nominal(int channels, int nominal_k, int dilation) {
    LKAConfig cfg{channels, nominal_k, dilation, (nominal_k + dilation - 1) / dilation,
                  2 * dilation - 1};
    cfg.validate();
    return cfg;
  }

  void validate() const {
    if (channels < 1 || nominal_k < 1 || dilation < 1) {
      throw ConfigError("LKA: channels, nominal kernel and dilation must be positive");
    }
    if (dw_kernel != (nominal_k + dilation - 1) / dilation || local_kernel != 2 * dilation - 1) {
      throw ConfigError("LKA: dw_kernel must be ceil(K/d) and local_kernel 2d-1");
    }
    if (dw_kernel % 2 == 0 || local_kernel % 2 == 0) {
      throw ConfigError("LKA: kernel sizes must be odd (K=" + std::to_string(nominal_k) +
                        ", d=" + std::to_string(dilation) + " gives " + std::to_string(dw_kernel) + ")");
    }
  }
};

/// Four LKA groups over channels/4 channels each, dilations 2,3,4,5 with a
/// fixed depthwise kernel of 5: nominal kernels 10, 15, 20, 25.
struct MSLKAConfig {
  int channels = 0;
  std::array<int, 4> dilations{2, 3, 4, 5};
  int dw_kernel = 5;

  static constexpr int kGroups = 4;

  std::array<int, 4> nominal_ks() const {
    std::array<int, 4> ks{};
    for (int g = 0; g < kGroups; ++g) ks[g] = dw_kernel * dilations[g];
    return ks;
  }
  int group_channels() const { return channels / kGroups; }

  LKAConfig group(int g) const {
    return LKAConfig::from_nominal(group_channels(), nominal_ks()[g], dilations[g]);
  }

  void validate() const {
    if (channels < kGroups || channels % kGroups != 0) {
      throw ConfigError("MSLKA: channels (" + std::to_string(channels) + ") must be divisible by 4");
    }
    for (int g = 0; g < kGroups; ++g) group(g).validate();
  }
};

enum class PyramidKind { lkspp, aspp };

/// Five-branch pyramid: 1x1, one branch per rate, and image-level pooling,
/// concatenated and projected back by a 1x1 convolution.
struct LKSPPConfig {
  int in_channels = 0;
  int branch_channels = 0;
  int out_channels = 0;
  std::array<int, 3> rates{3, 4, 5};
  int dw_kernel = 7;

  static constexpr int kBranches = 5;

  /// Branch width in/4, output width equal to input.
  static LKSPPConfig for_channels(int channels) {
    return LKSPPConfig{channels, std::max(1, channels / 4), channels};
  }

  int projection_in() const { return kBranches * branch_channels; }

  /// Decomposed large-kernel geometry of one rate branch.
  LKAConfig rate_branch(int rate) const {
    return LKAConfig::from_nominal(in_channels, dw_kernel * rate, rate);
  }

  void validate() const {
    if (in_channels < 1 || branch_channels < 1 || out_channels < 1) {
      throw ConfigError("spatial pyramid: channel counts must be positive");
    }
    for (int r : rates) rate_branch(r).validate();
  }
};

/// Kernel size of the atrous depthwise convolutions in the ASPP comparator.
inline constexpr int kAsppKernel = 3;

enum class BlockVariant { plain, with_mslka };

struct BasicBlockConfig {
  int channels = 0;
  BlockVariant variant = BlockVariant::plain;
};

// ---------------------------------------------------------------------------
// Closed-form costs. Biases count as parameters; MACs count convolution
// multiply-accumulates only.
// ---------------------------------------------------------------------------

inline std::size_t lka_param_count(const LKAConfig& c, int out_channels) {
  const std::size_t ch = c.channels;
  return ch * c.local_kernel * c.local_kernel + ch + ch * c.dw_kernel * c.dw_kernel + ch +
         static_cast<std::size_t>(out_channels) * ch + out_channels;
}
inline std::size_t lka_param_count(const LKAConfig& c) { return lka_param_count(c, c.channels); }

inline std::size_t lka_macs(const LKAConfig& c, int h, int w, int out_channels) {
  const std::size_t ch = c.channels;
  return (ch * c.local_kernel * c.local_kernel + ch * c.dw_kernel * c.dw_kernel +
          static_cast<std::size_t>(out_channels) * ch) *
         h * w;
}
inline std::size_t lka_macs(const LKAConfig& c, int h, int w) {
  return lka_macs(c, h, w, c.channels);
}

/// Dense depthwise K x K followed by a 1x1 convolution, both with bias.
inline std::size_t dense_depthwise_param_count(int channels, int k) {
  const std::size_t ch = channels;
  return ch * k * k + ch + ch * ch + ch;
}
inline std::size_t dense_depthwise_macs(int channels, int k, int h, int w) {
  const std::size_t ch = channels;
  return (ch * k * k + ch * ch) * h * w;
}

inline std::size_t pyramid_param_count(const LKSPPConfig& c, PyramidKind kind) {
  const std::size_t in = c.in_channels, br = c.branch_channels;
  std::size_t total = br * in + br;  // 1x1 branch
  for (int r : c.rates) {
    total += kind == PyramidKind::lkspp
                 ? lka_param_count(c.rate_branch(r), c.branch_channels)
                 : in * kAsppKernel * kAsppKernel + in + br * in + br;
  }
  total += br * in + br;  // pooling branch
  total += static_cast<std::size_t>(c.out_channels) * c.projection_in() + c.out_channels;
  return total;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// local depthwise -> dilated depthwise -> 1x1, the decomposed large kernel.
template <Real T>
struct DecomposedConv {
  LKAConfig cfg;
  ConvLayer<T> local;
  ConvLayer<T> dilated;
  ConvLayer<T> pointwise;

  DecomposedConv() = default;
  DecomposedConv(ParameterSet<T>& params, const std::string& name, const LKAConfig& c,
                 int out_channels, Rng& rng)
      : cfg(c),
        local(params, name + ".local", ConvSpec::depthwise(c.channels, c.local_kernel), rng),
        dilated(params, name + ".dilated", ConvSpec::depthwise(c.channels, c.dw_kernel, c.dilation),
                rng),
        pointwise(params, name + ".pointwise", ConvSpec::pointwise(c.channels, out_channels), rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return pointwise(dilated(local(x))); }

  std::size_t macs(int h, int w) const {
    return local.macs(h, w) + dilated.macs(h, w) + pointwise.macs(h, w);
  }
};

/// Large kernel attention: the decomposed kernel's response reweights the input.
template <Real T>
class LargeKernelAttention {
 public:
  LargeKernelAttention() = default;
  LargeKernelAttention(ParameterSet<T>& params, const std::string& name, const LKAConfig& cfg,
                       Rng& rng)
      : cfg_((cfg.validate(), cfg)), attention_(params, name, cfg, cfg.channels, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.c() != cfg_.channels) {
      throw DimensionError("LKA expects " + std::to_string(cfg_.channels) + " channels, got " +
                           std::to_string(x.c()));
    }
    return mul(attention(x), x);
  }

  Tensor<T> attention(const Tensor<T>& x) const { return attention_(x); }
  const LKAConfig& config() const { return cfg_; }
  const DecomposedConv<T>& parts() const { return attention_; }
  std::size_t macs(int h, int w) const { return attention_.macs(h, w); }

 private:
  LKAConfig cfg_;
  DecomposedConv<T> attention_;
};

/// Channels split into four groups, each reweighted by its own LKA, then
/// concatenated back in order.
template <Real T>
class MultiScaleLKA {
 public:
  MultiScaleLKA() = default;
  MultiScaleLKA(ParameterSet<T>& params, const std::string& name, const MSLKAConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg_.validate();
    for (int g = 0; g < MSLKAConfig::kGroups; ++g) {
      groups_.emplace_back(params, name + ".group" + std::to_string(g), cfg_.group(g), rng);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.c() != cfg_.channels) {
      throw DimensionError("MSLKA expects " + std::to_string(cfg_.channels) + " channels, got " +
                           std::to_string(x.c()));
    }
    const int gc = cfg_.group_channels();
    auto parts = split_channels(x, {gc, gc, gc, gc});
    for (int g = 0; g < MSLKAConfig::kGroups; ++g) parts[g] = groups_[g](parts[g]);
    return concat_channels(parts);
  }

  const MSLKAConfig& config() const { return cfg_; }
  const LargeKernelAttention<T>& group(int g) const { return groups_[g]; }
  std::size_t macs(int h, int w) const {
    std::size_t total = 0;
    for (const auto& g : groups_) total += g.macs(h, w);
    return total;
  }

 private:
  MSLKAConfig cfg_;
  std::vector<LargeKernelAttention<T>> groups_;
};

/// Spatial pyramid pooling. LKSPP branches are decomposed large kernels
/// (dw kernel 7 at rates 3, 4, 5); the ASPP comparator uses a single 3x3
/// depthwise atrous convolution followed by 1x1 at the same rates. Every
/// branch and the projection end in relu.
template <Real T>
class SpatialPyramid {
 public:
  SpatialPyramid() = default;
  SpatialPyramid(ParameterSet<T>& params, const std::string& name, const LKSPPConfig& cfg,
                 PyramidKind kind, Rng& rng)
      : cfg_(cfg), kind_(kind) {
    cfg_.validate();
    const int in = cfg.in_channels, br = cfg.branch_channels;
    conv1x1_ = ConvLayer<T>(params, name + ".conv1x1", ConvSpec::pointwise(in, br), rng);
    for (int r : cfg.rates) {
      const std::string bn = name + ".rate" + std::to_string(r);
      if (kind == PyramidKind::lkspp) {
        large_.emplace_back(params, bn, cfg.rate_branch(r), br, rng);
      } else {
        atrous_.emplace_back(params, bn + ".atrous",
                             ConvSpec::depthwise(in, kAsppKernel, r), rng);
        atrous_pw_.emplace_back(params, bn + ".pointwise", ConvSpec::pointwise(in, br), rng);
      }
    }
    pool_conv_ = ConvLayer<T>(params, name + ".pool", ConvSpec::pointwise(in, br), rng);
    project_ = ConvLayer<T>(params, name + ".project",
                            ConvSpec::pointwise(cfg.projection_in(), cfg.out_channels), rng);
  }

  /// The five branch outputs concatenated, before projection.
  Tensor<T> branches(const Tensor<T>& x) const {
    if (x.c() != cfg_.in_channels) {
      throw DimensionError("spatial pyramid expects " + std::to_string(cfg_.in_channels) +
                           " channels, got " + std::to_string(x.c()));
    }
    std::vector<Tensor<T>> outs;
    outs.push_back(relu(conv1x1_(x)));
    for (std::size_t i = 0; i < cfg_.rates.size(); ++i) {
      outs.push_back(relu(kind_ == PyramidKind::lkspp ? large_[i](x) : atrous_pw_[i](atrous_[i](x))));
    }
    outs.push_back(upsample_bilinear(relu(pool_conv_(global_avg_pool(x))), x.h(), x.w()));
    return concat_channels(outs);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return relu(project_(branches(x))); }

  const LKSPPConfig& config() const { return cfg_; }
  PyramidKind kind() const { return kind_; }
  const ConvLayer<T>& pool_conv() const { return pool_conv_; }

  std::size_t macs(int h, int w) const {
    std::size_t total = conv1x1_.macs(h, w) + pool_conv_.macs(1, 1) + project_.macs(h, w);
    for (const auto& b : large_) total += b.macs(h, w);
    for (const auto& c : atrous_) total += c.macs(h, w);
    for (const auto& c : atrous_pw_) total += c.macs(h, w);
    return total;
  }

 private:
  LKSPPConfig cfg_;
  PyramidKind kind_ = PyramidKind::lkspp;
  ConvLayer<T> conv1x1_;
  std::vector<DecomposedConv<T>> large_;
  std::vector<ConvLayer<T>> atrous_;
  std::vector<ConvLayer<T>> atrous_pw_;
  ConvLayer<T> pool_conv_;
  ConvLayer<T> project_;
};

/// Residual block: relu(x + conv2(f(relu(norm(conv1(x)))))), where f is the
/// identity for the plain variant and MSLKA for the attention variant.
/// conv2 starts at zero, so a fresh block computes relu(x).
template <Real T>
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(ParameterSet<T>& params, const std::string& name, const BasicBlockConfig& cfg, Rng& rng)
      : cfg_(cfg),
        conv1_(params, name + ".conv1", ConvSpec::same(cfg.channels, cfg.channels, 3), rng),
        norm_(params, name + ".norm", cfg.channels) {
    if (cfg.variant == BlockVariant::with_mslka) {
      mslka_.emplace_back(params, name + ".mslka", MSLKAConfig{cfg.channels}, rng);
    }
    conv2_ = ConvLayer<T>(params, name + ".conv2", ConvSpec::same(cfg.channels, cfg.channels, 3), rng);
    std::ranges::fill(conv2_.weight.data(), T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.c() != cfg_.channels) {
      throw DimensionError("basic block expects " + std::to_string(cfg_.channels) +
                           " channels, got " + std::to_string(x.c()));
    }
    Tensor<T> r = relu(norm_(conv1_(x)));
    if (!mslka_.empty()) r = mslka_.front()(r);
    return relu(add(x, conv2_(r)));
  }

  const BasicBlockConfig& config() const { return cfg_; }
  ConvLayer<T>& conv2() { return conv2_; }

  std::size_t macs(int h, int w) const {
    std::size_t total = conv1_.macs(h, w) + conv2_.macs(h, w);
    for (const auto& m : mslka_) total += m.macs(h, w);
    return total;
  }

 private:
  BasicBlockConfig cfg_;
  ConvLayer<T> conv1_;
  InstanceNormLayer<T> norm_;
  std::vector<MultiScaleLKA<T>> mslka_;  // zero or one
  ConvLayer<T> conv2_;
};

// ---------------------------------------------------------------------------
// Receptive-field probe
// ---------------------------------------------------------------------------

struct Extent {
  int height = 0;
  int width = 0;
  bool operator==(const Extent&) const = default;
};

/// Bounding box of input positions with non-zero gradient for a loss that
/// sums the block's output at the center pixel over all channels.
template <Real T>
Extent receptive_field_probe(const std::function<Tensor<T>(const Tensor<T>&)>& block, int channels,
                             int probe_size, std::uint64_t seed = 1) {
  Rng rng(seed);
  auto x = random_uniform<T>({1, channels, probe_size, probe_size}, rng, 0.5, 1.5);
  x.set_requires_grad(true);
  auto out = block(x);
  Tensor<T> mask(out.shape());
  for (int ch = 0; ch < out.c(); ++ch) mask.at(0, ch, out.h() / 2, out.w() / 2) = T(1);
  const auto g = gradients(sum(mul(out, mask)), {x})[0];
  int top = probe_size, bottom = -1, left = probe_size, right = -1;
  for (int ch = 0; ch < channels; ++ch)
    for (int y = 0; y < probe_size; ++y)
      for (int xx = 0; xx < probe_size; ++xx) {
        if (g[x.offset(0, ch, y, xx)] == T(0)) continue;
        top = std::min(top, y);
        bottom = std::max(bottom, y);
        left = std::min(left, xx);
        right = std::max(right, xx);
      }
  if (bottom < 0) return Extent{0, 0};
  if (top == 0 || left == 0 || bottom == probe_size - 1 || right == probe_size - 1) {
    throw ConfigError("receptive field probe too small: extent reaches the border of a " +
                      std::to_string(probe_size) + "x" + std::to_string(probe_size) + " probe");
  }
  return Extent{bottom - top + 1, right - left + 1};
}

struct PathExtent {
  std::string path;
  int nominal = 0;  // expected lower bound on the extent
  Extent extent;
};

/// Probes each MSLKA group path and a two-layer stacked 3x3 control. Runs
/// in double precision with random weights.
inline std::vector<PathExtent> probe_mslka_paths(int channels = 8, int probe_size = 41, std::uint64_t seed = 1) {
  Rng rng(seed);
  ParameterSet<double> params;
  MultiScaleLKA<double> m(params, "mslka", MSLKAConfig{channels}, rng);
  std::vector<PathExtent> rows;
  const int gc = m.config().group_channels();
  for (int g = 0; g < MSLKAConfig::kGroups; ++g) {
    const auto& group = m.group(g);
    std::function<Tensor<double>(const Tensor<double>&)> path = [&](const Tensor<double>& x) { return group(x); };
    rows.push_back({"group" + std::to_string(g) + " (d=" + std::to_string(m.config().dilations[g]) + ")",
                    m.config().nominal_ks()[g], receptive_field_probe(path, gc, probe_size, seed)});
  }
  ConvLayer<double> c1(params, "control.c1", ConvSpec::same(gc, gc, 3), rng);
  ConvLayer<double> c2(params, "control.c2", ConvSpec::same(gc, gc, 3), rng);
  std::function<Tensor<double>(const Tensor<double>&)> control = [&](const Tensor<double>& x) { return c2(c1(x)); };
  rows.push_back({"stacked 3x3 x2", 5, receptive_field_probe(control, gc, probe_size, seed)});
  return rows;
}

}  // namespace mslka
