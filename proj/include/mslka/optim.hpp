#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "mslka/data.hpp"
#include "mslka/tensor.hpp"

namespace mslka {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double adam_eps = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch_size = 4;
  int input_size = 64;
  int total_steps = 600;
  int warmup_steps = 30;
  std::uint64_t seed = 1;
  AugmentConfig augment;
  int checkpoint_every = 0;  // 0: only the final checkpoint

  /// Warmup of 5% of total steps, rounded.
  static int default_warmup(int total_steps) { return static_cast<int>(std::lround(0.05 * total_steps)); }

  void validate() const {
    if (lr < 0 || weight_decay < 0 || adam_eps <= 0) throw ConfigError("lr, weight_decay must be >= 0 and eps > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("betas must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (input_size < 8) throw ConfigError("input_size must be >= 8");
    if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
    if (warmup_steps < 0 || warmup_steps > total_steps) throw ConfigError("need 0 <= warmup_steps <= total_steps");
    if (augment.flip_prob < 0 || augment.flip_prob > 1) throw ConfigError("flip_prob must lie in [0, 1]");
    if (augment.rotation_max_deg < 0) throw ConfigError("rotation_max_deg must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"lr", lr},
            {"weight_decay", weight_decay},
            {"adam_eps", adam_eps},
            {"betas", {beta1, beta2}},
            {"batch_size", batch_size},
            {"input_size", input_size},
            {"total_steps", total_steps},
            {"warmup_steps", warmup_steps},
            {"seed", seed},
            {"rotation_max_deg", augment.rotation_max_deg},
            {"flip_prob", augment.flip_prob},
            {"checkpoint_every", checkpoint_every}};
  }
};

/// Linear warmup from 0 to cfg.lr, then half-cosine decay to 0.
inline double lr_at_step(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) {
    throw UsageError("step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  }
  if (step < cfg.warmup_steps) return cfg.lr * step / cfg.warmup_steps;
  if (cfg.total_steps == cfg.warmup_steps) return cfg.lr;
  const double t = static_cast<double>(step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps);
  return std::max(0.0, cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

template <Real T>
struct OptimizerState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

/// Decoupled weight decay followed by a bias-corrected Adam update.
template <Real T>
void adamw_step(std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads, OptimizerState<T>& state,
                const TrainConfig& cfg, double lr_now) {
  if (grads.size() != params.size()) {
    throw DimensionError("adamw_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (lr_now < 0) throw UsageError("learning rate must be >= 0");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("optimizer state does not match the parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr_now * cfg.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].data();
    const auto& g = grads[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (g.size() != p.size() || m.size() != p.size()) {
      throw DimensionError("adamw_step: gradient " + std::to_string(k) + " has " + std::to_string(g.size()) +
                           " entries, parameter has " + std::to_string(p.size()));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] = static_cast<T>(p[i] * decay - lr_now * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
}

}  // namespace mslka
