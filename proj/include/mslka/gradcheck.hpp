#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mslka/tensor.hpp"

namespace mslka {

struct GradCheckReport {
  /// max |analytic - numeric| / max(|analytic|, |numeric|, floor) over checked
  /// entries, where floor is 1e-3 of the largest analytic entry. Entries far
  /// below the gradient scale carry only roundoff in both estimates, so they
  /// are measured against that scale instead of their own magnitude.
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Entries sitting so close to a non-differentiable point (a ReLU kink)
  /// that no step size gave a consistent numeric derivative.
  std::size_t skipped = 0;
};

namespace detail {

/// Fourth-order central difference of f along one coordinate.
inline double central_difference(const std::function<double()>& f, double& value, double h) {
  const double saved = value;
  auto at = [&](double offset) {
    value = saved + offset;
    return f();
  };
  const double d = 8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h));
  value = saved;
  return d / (12.0 * h);
}

}  // namespace detail

/// Compares reverse-mode gradients of a scalar function against numeric
/// derivatives for every entry of every tensor in `wrt`.
///
/// Each entry starts at step `h` and requires the estimates at h, h/2 and
/// h/4 to agree relative to the gradient scale. A disagreement means the stencil straddles a kink, so the step shrinks by
/// 10x down to `min_h`; entries that never settle are counted as skipped. A
/// kink exactly at the evaluation point is symmetric and goes undetected.
/// Stored gradients of `wrt` are left untouched.
inline GradCheckReport finite_diff_report(const std::function<Tensor<double>()>& f,
                                          std::vector<Tensor<double>> wrt, double h = 1e-3,
                                          double min_h = 1e-7) {
  for (auto& t : wrt) {
    if (t.node()->is_leaf()) t.set_requires_grad(true);
  }
  const auto analytic = gradients(f(), wrt);
  double largest = 0.0;
  for (const auto& g : analytic) {
    for (double v : g) largest = std::max(largest, std::abs(v));
  }
  const double floor = std::max(1e-3 * largest, 1e-12);

  // Accepted estimates are uncertain by at most 2 * kAgree of the scale,
  // comfortably below the 1e-6 errors the checks are asked to resolve.
  constexpr double kAgree = 2.5e-7;
  GradCheckReport report;
  NoGradGuard no_grad;
  const std::function<double()> eval = [&] { return f().item(); };
  const double magnitude = std::abs(eval());
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto values = wrt[k].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      bool settled = false;
      double numeric = 0.0;
      for (double step = h; step >= min_h * 0.999; step *= 0.1) {
        const double coarse = detail::central_difference(eval, values[i], step);
        const double fine = detail::central_difference(eval, values[i], step * 0.5);
        // Agreement is judged against the gradient scale plus the roundoff
        // a difference quotient of f picks up at this step. The roundoff
        // allowance is capped so an estimate coarser than the scale-relative
        // tolerance never counts as settled.
        const double scale = std::max({std::abs(coarse), std::abs(fine), floor});
        const double tol = kAgree * scale + std::min(1e-14 * magnitude / step, kAgree * scale);
        if (std::abs(coarse - fine) > tol) continue;
        // Two noisy estimates can agree by chance; a third at h/4 must too.
        const double finest = detail::central_difference(eval, values[i], step * 0.25);
        if (std::abs(fine - finest) <= tol) {
          numeric = finest;
          settled = true;
          break;
        }
      }
      if (!settled) {
        ++report.skipped;
        continue;
      }
      ++report.checked;
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
    }
  }
  return report;
}

/// Worst relative error of finite_diff_report.
inline double finite_diff_check(const std::function<Tensor<double>()>& f,
                                std::vector<Tensor<double>> wrt, double h = 1e-3) {
  return finite_diff_report(f, std::move(wrt), h).max_rel_error;
}

/// Single-input form: f is evaluated at x.
inline double finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                Tensor<double> x, double h = 1e-3) {
  return finite_diff_check([&] { return f(x); }, std::vector<Tensor<double>>{x}, h);
}

}  // namespace mslka
