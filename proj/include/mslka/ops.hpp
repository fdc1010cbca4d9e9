#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mslka/conv.hpp"
#include "mslka/tensor.hpp"

namespace mslka {

namespace detail {

template <Real T>
using NodePtr = std::shared_ptr<Node<T>>;

inline bool is_channel_broadcast(const Shape& x, const Shape& y) {
  return y.n == x.n && y.c == x.c && y.h == 1 && y.w == 1;
}

template <Real T>
void check_binary(const Tensor<T>& x, const Tensor<T>& y, const char* op) {
  if (x.shape() == y.shape() || is_channel_broadcast(x.shape(), y.shape())) return;
  throw DimensionError(std::string(op) + ": shapes " + x.shape().str() + " and " +
                       y.shape().str() + " are not compatible (equal or (n,c,1,1) broadcast)");
}

}  // namespace detail

enum class Elementwise { add, sub, mul };

/// Pointwise binary op. y may also be (n, c, 1, 1), broadcast over h and w.
template <Real T>
Tensor<T> elemwise(const Tensor<T>& x, const Tensor<T>& y, Elementwise kind) {
  detail::check_binary(x, y, "elemwise");
  const Shape s = x.shape();
  const bool bcast = x.shape() != y.shape();
  const std::size_t plane = s.plane();
  const auto xv = x.data();
  const auto yv = y.data();
  Buffer<T> out(s.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T b = bcast ? yv[i / plane] : yv[i];
    switch (kind) {
      case Elementwise::add: out[i] = xv[i] + b; break;
      case Elementwise::sub: out[i] = xv[i] - b; break;
      case Elementwise::mul: out[i] = xv[i] * b; break;
    }
  }
  return detail::make_result<T>(s, std::move(out), {x.node(), y.node()},
                                [kind, bcast, plane](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& yn = *self.inputs[1];
    const auto& g = self.grad;
    if (xn.requires_grad) {
      auto& dx = xn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T b = bcast ? yn.data[i / plane] : yn.data[i];
        dx[i] += kind == Elementwise::mul ? g[i] * b : g[i];
      }
    }
    if (yn.requires_grad) {
      auto& dy = yn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t j = bcast ? i / plane : i;
        switch (kind) {
          case Elementwise::add: dy[j] += g[i]; break;
          case Elementwise::sub: dy[j] -= g[i]; break;
          case Elementwise::mul: dy[j] += g[i] * xn.data[i]; break;
        }
      }
    }
  });
}

template <Real T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) { return elemwise(x, y, Elementwise::add); }
template <Real T>
Tensor<T> sub(const Tensor<T>& x, const Tensor<T>& y) { return elemwise(x, y, Elementwise::sub); }
template <Real T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) { return elemwise(x, y, Elementwise::mul); }

enum class Activation { identity, relu, sigmoid, tanh, abs, square };

namespace detail {

template <Real T>
T activate(Activation kind, T v) {
  switch (kind) {
    case Activation::identity: return v;
    case Activation::relu: return v > T(0) ? v : T(0);
    case Activation::sigmoid: return T(1) / (T(1) + std::exp(-v));
    case Activation::tanh: return std::tanh(v);
    case Activation::abs: return std::abs(v);
    case Activation::square: return v * v;
  }
  return v;
}

/// Derivative given the input v and the output y = f(v).
template <Real T>
T activate_grad(Activation kind, T v, T y) {
  switch (kind) {
    case Activation::identity: return T(1);
    case Activation::relu: return v > T(0) ? T(1) : T(0);
    case Activation::sigmoid: return y * (T(1) - y);
    case Activation::tanh: return T(1) - y * y;
    case Activation::abs: return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
    case Activation::square: return T(2) * v;
  }
  return T(1);
}

}  // namespace detail

template <Real T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Buffer<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::activate(kind, xv[i]);
  return detail::make_result<T>(x.shape(), std::move(out), {x.node()},
                                [kind](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& dx = xn.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      dx[i] += self.grad[i] * detail::activate_grad(kind, xn.data[i], self.data[i]);
    }
  });
}

template <Real T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::relu); }
template <Real T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::sigmoid); }
template <Real T>
Tensor<T> tanh(const Tensor<T>& x) { return activation(x, Activation::tanh); }

template <Real T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Buffer<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  return detail::make_result<T>(x.shape(), std::move(out), {x.node()},
                                [factor](detail::Node<T>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * factor;
  });
}

/// Sum of every entry as a 1x1x1x1 tensor.
template <Real T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return detail::make_result<T>(Shape{1, 1, 1, 1}, {acc}, {x.node()}, [](detail::Node<T>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    const T g = self.grad[0];
    for (auto& v : dx) v += g;
  });
}

template <Real T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Per-(n, c) mean over the spatial plane.
template <Real T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Buffer<T> out(static_cast<std::size_t>(s.n) * s.c);
  const auto xv = x.data();
  for (std::size_t k = 0; k < out.size(); ++k) {
    T acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += xv[k * plane + i];
    out[k] = acc / static_cast<T>(plane);
  }
  return detail::make_result<T>(Shape{s.n, s.c, 1, 1}, std::move(out), {x.node()},
                                [plane](detail::Node<T>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      const T g = self.grad[k] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) dx[k * plane + i] += g;
    }
  });
}

/// Non-overlapping 2x2 mean pooling; h and w must be even.
template <Real T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw DimensionError("avg_pool2x2 needs even spatial size, got " + s.str());
  }
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Buffer<T> out(os.numel());
  const auto xv = x.data();
  for (int p = 0; p < s.n * s.c; ++p) {
    for (int y = 0; y < os.h; ++y) {
      for (int xx = 0; xx < os.w; ++xx) {
        const std::size_t i = (static_cast<std::size_t>(p) * s.h + 2 * y) * s.w + 2 * xx;
        out[(static_cast<std::size_t>(p) * os.h + y) * os.w + xx] =
            T(0.25) * (xv[i] + xv[i + 1] + xv[i + s.w] + xv[i + s.w + 1]);
      }
    }
  }
  return detail::make_result<T>(os, std::move(out), {x.node()}, [s, os](detail::Node<T>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (int p = 0; p < s.n * s.c; ++p) {
      for (int y = 0; y < os.h; ++y) {
        for (int xx = 0; xx < os.w; ++xx) {
          const T g = T(0.25) * self.grad[(static_cast<std::size_t>(p) * os.h + y) * os.w + xx];
          const std::size_t i = (static_cast<std::size_t>(p) * s.h + 2 * y) * s.w + 2 * xx;
          dx[i] += g;
          dx[i + 1] += g;
          dx[i + s.w] += g;
          dx[i + s.w + 1] += g;
        }
      }
    }
  });
}

namespace detail {

/// Half-pixel source coordinate: taps i0, i1 with weight lambda on i1.
struct BilinearTap {
  int i0, i1;
  double lambda;
};

inline std::vector<BilinearTap> bilinear_taps(int in, int out) {
  std::vector<BilinearTap> taps(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 + 1 < in ? i0 + 1 : in - 1;
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize with half-pixel centers and no corner alignment.
template <Real T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw DimensionError("upsample_bilinear: output size must be >= 1");
  const Shape s = x.shape();
  const Shape os{s.n, s.c, out_h, out_w};
  auto ty = detail::bilinear_taps(s.h, out_h);
  auto tx = detail::bilinear_taps(s.w, out_w);
  Buffer<T> out(os.numel());
  const auto xv = x.data();
  for (int p = 0; p < s.n * s.c; ++p) {
    const T* src = xv.data() + static_cast<std::size_t>(p) * s.h * s.w;
    T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      const T ly = static_cast<T>(a.lambda);
      for (int xx = 0; xx < out_w; ++xx) {
        const auto& b = tx[xx];
        const T lx = static_cast<T>(b.lambda);
        const T top = (T(1) - lx) * src[a.i0 * s.w + b.i0] + lx * src[a.i0 * s.w + b.i1];
        const T bot = (T(1) - lx) * src[a.i1 * s.w + b.i0] + lx * src[a.i1 * s.w + b.i1];
        dst[y * out_w + xx] = (T(1) - ly) * top + ly * bot;
      }
    }
  }
  return detail::make_result<T>(os, std::move(out), {x.node()},
                                [s, os, ty = std::move(ty), tx = std::move(tx)](detail::Node<T>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (int p = 0; p < s.n * s.c; ++p) {
      T* dst = dx.data() + static_cast<std::size_t>(p) * s.h * s.w;
      const T* g = self.grad.data() + static_cast<std::size_t>(p) * os.h * os.w;
      for (int y = 0; y < os.h; ++y) {
        const auto& a = ty[y];
        const T ly = static_cast<T>(a.lambda);
        for (int xx = 0; xx < os.w; ++xx) {
          const auto& b = tx[xx];
          const T lx = static_cast<T>(b.lambda);
          const T gv = g[y * os.w + xx];
          dst[a.i0 * s.w + b.i0] += gv * (T(1) - ly) * (T(1) - lx);
          dst[a.i0 * s.w + b.i1] += gv * (T(1) - ly) * lx;
          dst[a.i1 * s.w + b.i0] += gv * ly * (T(1) - lx);
          dst[a.i1 * s.w + b.i1] += gv * ly * lx;
        }
      }
    }
  });
}

template <Real T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  const Shape first = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw DimensionError("concat_channels: " + s.str() + " does not match " + first.str() +
                           " in n, h, w");
    }
    total += s.c;
  }
  const Shape os{first.n, total, first.h, first.w};
  const std::size_t plane = first.plane();
  Buffer<T> out(os.numel());
  std::vector<int> widths;
  std::vector<std::shared_ptr<detail::Node<T>>> inputs;
  for (int b = 0; b < first.n; ++b) {
    T* dst = out.data() + static_cast<std::size_t>(b) * total * plane;
    for (const auto& p : parts) {
      const std::size_t chunk = static_cast<std::size_t>(p.c()) * plane;
      const T* src = p.data().data() + b * chunk;
      std::copy(src, src + chunk, dst);
      dst += chunk;
    }
  }
  for (const auto& p : parts) {
    widths.push_back(p.c());
    inputs.push_back(p.node());
  }
  return detail::make_result<T>(os, std::move(out), std::move(inputs),
                                [widths, total, plane, batch = first.n](detail::Node<T>& self) {
    std::size_t coff = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t chunk = static_cast<std::size_t>(widths[k]) * plane;
      if (self.inputs[k]->requires_grad) {
        auto& dx = self.inputs[k]->grad_buffer();
        for (int b = 0; b < batch; ++b) {
          const T* g = self.grad.data() + static_cast<std::size_t>(b) * total * plane + coff;
          T* d = dx.data() + b * chunk;
          for (std::size_t i = 0; i < chunk; ++i) d[i] += g[i];
        }
      }
      coff += chunk;
    }
  });
}

/// Splits along channels into consecutive groups of the given sizes.
template <Real T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<int>& sizes) {
  const Shape s = x.shape();
  int total = 0;
  for (int sz : sizes) {
    if (sz < 1) throw DimensionError("split_channels: group sizes must be >= 1");
    total += sz;
  }
  if (total != s.c) {
    throw DimensionError("split_channels: sizes sum to " + std::to_string(total) + ", tensor has " +
                         std::to_string(s.c) + " channels");
  }
  const std::size_t plane = s.plane();
  std::vector<Tensor<T>> parts;
  int c0 = 0;
  for (int sz : sizes) {
    const Shape os{s.n, sz, s.h, s.w};
    const std::size_t chunk = static_cast<std::size_t>(sz) * plane;
    Buffer<T> out(os.numel());
    for (int b = 0; b < s.n; ++b) {
      const T* src = x.data().data() + (static_cast<std::size_t>(b) * s.c + c0) * plane;
      std::copy(src, src + chunk, out.data() + b * chunk);
    }
    parts.push_back(detail::make_result<T>(os, std::move(out), {x.node()},
                                           [c0, chunk, s, plane](detail::Node<T>& self) {
      auto& dx = self.inputs[0]->grad_buffer();
      for (int b = 0; b < s.n; ++b) {
        T* d = dx.data() + (static_cast<std::size_t>(b) * s.c + c0) * plane;
        const T* g = self.grad.data() + b * chunk;
        for (std::size_t i = 0; i < chunk; ++i) d[i] += g[i];
      }
    }));
    c0 += sz;
  }
  return parts;
}

/// Per-sample, per-channel normalization over h*w with learned scale and shift,
/// both holding c values.
template <Real T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(1e-5)) {
  const Shape s = x.shape();
  if (gamma.numel() != static_cast<std::size_t>(s.c) || beta.numel() != static_cast<std::size_t>(s.c)) {
    throw DimensionError("instance_norm: scale/shift must hold " + std::to_string(s.c) + " values");
  }
  const std::size_t plane = s.plane();
  const std::size_t pairs = static_cast<std::size_t>(s.n) * s.c;
  Buffer<T> out(s.numel());
  Buffer<T> xhat(s.numel());
  Buffer<T> inv_std(pairs);
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t k = 0; k < pairs; ++k) {
    const int ch = static_cast<int>(k % s.c);
    const T* src = xv.data() + k * plane;
    T mu = 0;
    for (std::size_t i = 0; i < plane; ++i) mu += src[i];
    mu /= static_cast<T>(plane);
    T var = 0;
    for (std::size_t i = 0; i < plane; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(plane);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[k] = is;
    for (std::size_t i = 0; i < plane; ++i) {
      const T xh = (src[i] - mu) * is;
      xhat[k * plane + i] = xh;
      out[k * plane + i] = gv[ch] * xh + bv[ch];
    }
  }
  return detail::make_result<T>(
      s, std::move(out), {x.node(), gamma.node(), beta.node()},
      [s, plane, pairs, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const auto& g = self.grad;
        for (std::size_t k = 0; k < pairs; ++k) {
          const int ch = static_cast<int>(k % s.c);
          T sum_g = 0, sum_gx = 0;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g += g[k * plane + i];
            sum_gx += g[k * plane + i] * xhat[k * plane + i];
          }
          if (gn.requires_grad) gn.grad_buffer()[ch] += sum_gx;
          if (bn.requires_grad) bn.grad_buffer()[ch] += sum_g;
          if (xn.requires_grad) {
            auto& dx = xn.grad_buffer();
            const T coef = gn.data[ch] * inv_std[k] / static_cast<T>(plane);
            for (std::size_t i = 0; i < plane; ++i) {
              dx[k * plane + i] += coef * (static_cast<T>(plane) * g[k * plane + i] - sum_g -
                                           xhat[k * plane + i] * sum_gx);
            }
          }
        }
      });
}

/// Channel Gram matrix per sample: out[b, i, j, 0] = sum_hw f_i f_j / (c h w).
template <Real T>
Tensor<T> gram_matrix(const Tensor<T>& f) {
  const Shape s = f.shape();
  const std::size_t plane = s.plane();
  const T norm = T(1) / static_cast<T>(static_cast<std::size_t>(s.c) * plane);
  const Shape os{s.n, s.c, s.c, 1};
  Buffer<T> out(os.numel());
  for (int b = 0; b < s.n; ++b) {
    detail::CMapMat<T> fm(f.data().data() + static_cast<std::size_t>(b) * s.c * plane, s.c,
                          static_cast<Eigen::Index>(plane));
    detail::MapMat<T>(out.data() + static_cast<std::size_t>(b) * s.c * s.c, s.c, s.c).noalias() =
        norm * (fm * fm.transpose());
  }
  return detail::make_result<T>(os, std::move(out), {f.node()},
                                [s, plane, norm](detail::Node<T>& self) {
    auto& fn = *self.inputs[0];
    auto& df = fn.grad_buffer();
    for (int b = 0; b < s.n; ++b) {
      const std::size_t fo = static_cast<std::size_t>(b) * s.c * plane;
      detail::CMapMat<T> gm(self.grad.data() + static_cast<std::size_t>(b) * s.c * s.c, s.c, s.c);
      detail::CMapMat<T> fm(fn.data.data() + fo, s.c, static_cast<Eigen::Index>(plane));
      detail::MapMat<T>(df.data() + fo, s.c, static_cast<Eigen::Index>(plane)).noalias() +=
          norm * ((gm + gm.transpose()) * fm);
    }
  });
}

}  // namespace mslka
