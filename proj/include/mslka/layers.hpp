#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mslka/conv.hpp"
#include "mslka/ops.hpp"
#include "mslka/random.hpp"

namespace mslka {

/// Named, ordered parameter list. Iteration order is registration order and is
/// also the checkpoint serialization order.
template <Real T>
class ParameterSet {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    for (const auto& [existing, _] : entries_) {
      if (existing == name) throw ConfigError("duplicate parameter name: " + name);
    }
    t.set_requires_grad(true);
    entries_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }

  std::size_t count() const {
    std::size_t total = 0;
    for (const auto& [_, t] : entries_) total += t.numel();
    return total;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

/// Convolution with bias. Weights are uniform in +-sqrt(3 / fan_in) (unit
/// variance gain for linear layers); biases start at zero.
template <Real T>
struct ConvLayer {
  ConvSpec spec;
  Tensor<T> weight;
  Tensor<T> bias;

  ConvLayer() = default;
  ConvLayer(ParameterSet<T>& params, const std::string& name, const ConvSpec& s, Rng& rng)
      : spec(s) {
    spec.validate();
    const double fan_in = static_cast<double>(spec.in_channels / spec.groups) * spec.kh * spec.kw;
    const double bound = std::sqrt(3.0 / fan_in);
    weight = params.add(name + ".weight", random_uniform<T>(spec.weight_shape(), rng, -bound, bound));
    bias = params.add(name + ".bias", Tensor<T>::zeros({1, spec.out_channels, 1, 1}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d<T>(x, weight, bias, spec); }

  std::size_t param_count() const { return spec.param_count(); }
  std::size_t macs(int h, int w) const {
    return spec.macs(spec.out_size(h, spec.kh), spec.out_size(w, spec.kw));
  }
};

/// Instance normalization with learned per-channel scale (init 1) and shift (init 0).
template <Real T>
struct InstanceNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;

  InstanceNormLayer() = default;
  InstanceNormLayer(ParameterSet<T>& params, const std::string& name, int channels) {
    gamma = params.add(name + ".gamma", Tensor<T>::ones({1, channels, 1, 1}));
    beta = params.add(name + ".beta", Tensor<T>::zeros({1, channels, 1, 1}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return instance_norm<T>(x, gamma, beta); }
  std::size_t param_count() const { return gamma.numel() + beta.numel(); }
};

}  // namespace mslka
