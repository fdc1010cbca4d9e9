#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mslka/layers.hpp"

namespace mslka {

struct LossWeights {
  double lambda_style = 120.0;
  double lambda_perceptual = 0.01;

  void validate() const {
    if (lambda_style < 0 || lambda_perceptual < 0) throw ConfigError("loss weights must be non-negative");
  }
};

struct LossReport {
  double rec = 0;
  double perceptual = 0;
  double style = 0;
  double total = 0;

  static LossReport combine(double rec, double perceptual, double style, const LossWeights& w = {}) {
    return {rec, perceptual, style, rec + w.lambda_style * style + w.lambda_perceptual * perceptual};
  }
};

/// Frozen stand-in for a pretrained backbone: three stages of
/// conv3x3 -> relu -> 2x2 average pool with 16, 32, 64 channels.
template <Real T>
class FeatureExtractor {
 public:
  static constexpr int kStages = 3;
  static constexpr std::array<int, kStages> kChannels{16, 32, 64};

  explicit FeatureExtractor(std::uint64_t seed = 1234, int in_channels = 3) : seed_(seed) {
    Rng rng(seed);
    int in = in_channels;
    for (int s = 0; s < kStages; ++s) {
      convs_.emplace_back(params_, "fx" + std::to_string(s), ConvSpec::same(in, kChannels[s], 3), rng);
      in = kChannels[s];
    }
    for (auto& [_, t] : params_.entries()) t.set_requires_grad(false);
  }

  /// Feature maps at 1/2, 1/4 and 1/8 resolution.
  std::vector<Tensor<T>> operator()(const Tensor<T>& img) const {
    if (img.h() % 8 != 0 || img.w() % 8 != 0) {
      throw DimensionError("feature extractor needs sizes divisible by 8, got " + img.shape().str());
    }
    std::vector<Tensor<T>> feats;
    Tensor<T> h = img;
    for (const auto& conv : convs_) {
      h = avg_pool2x2(relu(conv(h)));
      feats.push_back(h);
    }
    return feats;
  }

  nlohmann::json identity() const {
    return {{"arch", "conv3x3-relu-avgpool2 x3 (16,32,64)"}, {"seed", seed_}};
  }

  const ConvLayer<T>& stage(int s) const { return convs_.at(s); }

 private:
  std::uint64_t seed_;
  ParameterSet<T> params_;
  std::vector<ConvLayer<T>> convs_;
};

template <Real T>
std::vector<Tensor<T>> extract_features(const FeatureExtractor<T>& fx, const Tensor<T>& img) {
  return fx(img);
}

namespace detail {

template <Real T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes differ, " + a.shape().str() + " vs " + b.shape().str());
  }
}

}  // namespace detail

/// Mean absolute error over every entry.
template <Real T>
Tensor<T> loss_rec(const Tensor<T>& out, const Tensor<T>& gt) {
  detail::check_same_shape(out, gt, "loss_rec");
  return mean(activation(sub(out, gt), Activation::abs));
}

/// Sum over stages of the mean absolute feature difference.
template <Real T>
Tensor<T> loss_perceptual(const std::vector<Tensor<T>>& f_out, const std::vector<Tensor<T>>& f_gt) {
  Tensor<T> total;
  for (std::size_t s = 0; s < f_out.size(); ++s) {
    auto term = mean(activation(sub(f_out[s], f_gt[s]), Activation::abs));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

/// Sum over stages of the mean squared Gram-matrix difference.
template <Real T>
Tensor<T> loss_style(const std::vector<Tensor<T>>& f_out, const std::vector<Tensor<T>>& f_gt) {
  Tensor<T> total;
  for (std::size_t s = 0; s < f_out.size(); ++s) {
    auto term = mean(activation(sub(gram_matrix(f_out[s]), gram_matrix(f_gt[s])), Activation::square));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <Real T>
Tensor<T> loss_perceptual(const FeatureExtractor<T>& fx, const Tensor<T>& out, const Tensor<T>& gt) {
  detail::check_same_shape(out, gt, "loss_perceptual");
  return loss_perceptual(fx(out), fx(gt));
}

template <Real T>
Tensor<T> loss_style(const FeatureExtractor<T>& fx, const Tensor<T>& out, const Tensor<T>& gt) {
  detail::check_same_shape(out, gt, "loss_style");
  return loss_style(fx(out), fx(gt));
}

/// The differentiable total plus its components.
template <Real T>
struct LossTerms {
  Tensor<T> rec;
  Tensor<T> perceptual;
  Tensor<T> style;
  Tensor<T> total;

  LossReport report() const {
    return {static_cast<double>(rec.item()), static_cast<double>(perceptual.item()),
            static_cast<double>(style.item()), static_cast<double>(total.item())};
  }
};

/// total = rec + lambda_style * style + lambda_perceptual * perceptual.
template <Real T>
LossTerms<T> loss_total(const FeatureExtractor<T>& fx, const Tensor<T>& out, const Tensor<T>& gt,
                        const LossWeights& w = {}) {
  w.validate();
  detail::check_same_shape(out, gt, "loss_total");
  const auto f_out = fx(out);
  std::vector<Tensor<T>> f_gt;
  {
    NoGradGuard no_grad;
    f_gt = fx(gt);
  }
  LossTerms<T> t;
  t.rec = loss_rec(out, gt);
  t.perceptual = loss_perceptual(f_out, f_gt);
  t.style = loss_style(f_out, f_gt);
  t.total = add(t.rec, add(scale(t.style, static_cast<T>(w.lambda_style)),
                           scale(t.perceptual, static_cast<T>(w.lambda_perceptual))));
  return t;
}

}  // namespace mslka
