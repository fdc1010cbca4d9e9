#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mslka/tensor.hpp"

namespace mslka {

/// Geometry of one 2-D convolution. Padding is symmetric zero padding.
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kh = 1;
  int kw = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;

  /// Odd square kernel with "same" padding: dilation * (k - 1) / 2.
  static ConvSpec same(int in, int out, int k, int dilation = 1, int groups = 1) {
    return ConvSpec{in, out, k, k, 1, dilation * (k - 1) / 2, dilation, groups};
  }
  static ConvSpec depthwise(int channels, int k, int dilation = 1) {
    return same(channels, channels, k, dilation, channels);
  }
  static ConvSpec pointwise(int in, int out) { return ConvSpec{in, out, 1, 1, 1, 0, 1, 1}; }

  bool is_depthwise() const { return groups == in_channels && groups == out_channels; }

  Shape weight_shape() const { return Shape{out_channels, in_channels / groups, kh, kw}; }

  int out_size(int in, int k) const {
    const int span = dilation * (k - 1) + 1;
    const int room = in + 2 * padding - span;
    return room < 0 ? 0 : room / stride + 1;
  }

  void validate() const {
    if (in_channels < 1 || out_channels < 1 || kh < 1 || kw < 1 || stride < 1 || dilation < 1 ||
        groups < 1 || padding < 0) {
      throw ConfigError("invalid convolution spec: all sizes must be positive, padding >= 0");
    }
    if (in_channels % groups != 0 || out_channels % groups != 0) {
      throw ConfigError("convolution channels (" + std::to_string(in_channels) + " -> " +
                        std::to_string(out_channels) + ") not divisible by groups " +
                        std::to_string(groups));
    }
  }

  std::size_t param_count(bool bias = true) const {
    return static_cast<std::size_t>(out_channels) * (in_channels / groups) * kh * kw +
           (bias ? out_channels : 0);
  }
  /// Multiply-accumulates for one image at the given output resolution.
  std::size_t macs(int out_h, int out_w) const {
    return static_cast<std::size_t>(out_channels) * (in_channels / groups) * kh * kw * out_h *
           out_w;
  }
};

namespace detail {

inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline int ceil_div(int a, int b) { return -floor_div(-a, b); }

/// Output positions o in [lo, hi) whose tap o * stride + off lands inside [0, extent).
inline std::pair<int, int> valid_range(int off, int stride, int extent, int out) {
  const int lo = std::min(out, std::max(0, ceil_div(-off, stride)));
  const int hi = std::min(out, floor_div(extent - 1 - off, stride) + 1);
  return {lo, std::max(lo, hi)};
}

struct ConvGeometry {
  ConvSpec spec;
  int h, w, ho, wo;
};

template <Real T>
void im2col(const T* x, int channels, const ConvGeometry& g, T* cols) {
  const auto& s = g.spec;
  const int plane = g.ho * g.wo;
  for (int ci = 0; ci < channels; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < s.kh; ++ki) {
      for (int kj = 0; kj < s.kw; ++kj) {
        T* row = cols + (static_cast<std::size_t>(ci) * s.kh * s.kw + ki * s.kw + kj) * plane;
        const int xoff = kj * s.dilation - s.padding;
        const auto [lo, hi] = valid_range(xoff, s.stride, g.w, g.wo);
        for (int oy = 0; oy < g.ho; ++oy) {
          T* dst = row + oy * g.wo;
          const int iy = oy * s.stride - s.padding + ki * s.dilation;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * g.w;
          std::fill(dst, dst + lo, T(0));
          if (s.stride == 1) {
            std::copy(src + lo + xoff, src + hi + xoff, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * s.stride + xoff];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters column entries back, accumulating into x.
template <Real T>
void col2im_add(const T* cols, int channels, const ConvGeometry& g, T* x) {
  const auto& s = g.spec;
  const int plane = g.ho * g.wo;
  for (int ci = 0; ci < channels; ++ci) {
    T* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < s.kh; ++ki) {
      for (int kj = 0; kj < s.kw; ++kj) {
        const T* row = cols + (static_cast<std::size_t>(ci) * s.kh * s.kw + ki * s.kw + kj) * plane;
        const int xoff = kj * s.dilation - s.padding;
        const auto [lo, hi] = valid_range(xoff, s.stride, g.w, g.wo);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * s.stride - s.padding + ki * s.dilation;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + oy * g.wo;
          T* dst = xc + static_cast<std::size_t>(iy) * g.w;
          for (int ox = lo; ox < hi; ++ox) dst[ox * s.stride + xoff] += src[ox];
        }
      }
    }
  }
}

template <Real T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <Real T>
using MapMat = Eigen::Map<RowMat<T>>;
template <Real T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <Real T>
bool is_plain_pointwise(const ConvSpec& s) {
  return s.kh == 1 && s.kw == 1 && s.stride == 1 && s.padding == 0;
}

template <Real T>
void conv_forward_gemm(const T* x, const T* wt, const T* bias, int batch, const ConvGeometry& g,
                       T* out) {
  const auto& s = g.spec;
  const int cin_g = s.in_channels / s.groups;
  const int cout_g = s.out_channels / s.groups;
  const int k = cin_g * s.kh * s.kw;
  const int plane = g.ho * g.wo;
  const bool direct = is_plain_pointwise<T>(s);
  Buffer<T> cols(direct ? 0 : static_cast<std::size_t>(k) * plane);
  for (int b = 0; b < batch; ++b) {
    for (int grp = 0; grp < s.groups; ++grp) {
      const T* xg = x + (static_cast<std::size_t>(b) * s.in_channels + grp * cin_g) * g.h * g.w;
      const T* colp = xg;
      if (!direct) {
        im2col(xg, cin_g, g, cols.data());
        colp = cols.data();
      }
      T* og = out + (static_cast<std::size_t>(b) * s.out_channels + grp * cout_g) * plane;
      MapMat<T> o(og, cout_g, plane);
      o.noalias() = CMapMat<T>(wt + static_cast<std::size_t>(grp) * cout_g * k, cout_g, k) *
                    CMapMat<T>(colp, k, plane);
      if (bias) {
        for (int co = 0; co < cout_g; ++co) o.row(co).array() += bias[grp * cout_g + co];
      }
    }
  }
}

template <Real T>
void conv_backward_gemm(const T* x, const T* wt, const T* dy, int batch, const ConvGeometry& g,
                        T* dx, T* dw, T* db) {
  const auto& s = g.spec;
  const int cin_g = s.in_channels / s.groups;
  const int cout_g = s.out_channels / s.groups;
  const int k = cin_g * s.kh * s.kw;
  const int plane = g.ho * g.wo;
  const bool direct = is_plain_pointwise<T>(s);
  Buffer<T> cols(direct ? 0 : static_cast<std::size_t>(k) * plane);
  Buffer<T> dcols(dx && !direct ? static_cast<std::size_t>(k) * plane : 0);
  for (int b = 0; b < batch; ++b) {
    for (int grp = 0; grp < s.groups; ++grp) {
      const std::size_t xo = (static_cast<std::size_t>(b) * s.in_channels + grp * cin_g) * g.h * g.w;
      const T* dyg = dy + (static_cast<std::size_t>(b) * s.out_channels + grp * cout_g) * plane;
      CMapMat<T> dym(dyg, cout_g, plane);
      CMapMat<T> wm(wt + static_cast<std::size_t>(grp) * cout_g * k, cout_g, k);
      if (dw) {
        const T* colp = x + xo;
        if (!direct) {
          im2col(x + xo, cin_g, g, cols.data());
          colp = cols.data();
        }
        MapMat<T>(dw + static_cast<std::size_t>(grp) * cout_g * k, cout_g, k).noalias() +=
            dym * CMapMat<T>(colp, k, plane).transpose();
      }
      if (dx) {
        if (direct) {
          MapMat<T>(dx + xo, k, plane).noalias() += wm.transpose() * dym;
        } else {
          MapMat<T>(dcols.data(), k, plane).noalias() = wm.transpose() * dym;
          col2im_add(dcols.data(), cin_g, g, dx + xo);
        }
      }
      if (db) {
        for (int co = 0; co < cout_g; ++co) db[grp * cout_g + co] += dym.row(co).sum();
      }
    }
  }
}

template <Real T>
void conv_forward_depthwise(const T* x, const T* wt, const T* bias, int batch,
                            const ConvGeometry& g, T* out) {
  const auto& s = g.spec;
  const int c = s.in_channels;
  for (int b = 0; b < batch; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T* xc = x + (static_cast<std::size_t>(b) * c + ch) * g.h * g.w;
      T* oc = out + (static_cast<std::size_t>(b) * c + ch) * g.ho * g.wo;
      std::fill(oc, oc + static_cast<std::size_t>(g.ho) * g.wo, bias ? bias[ch] : T(0));
      const T* wc = wt + static_cast<std::size_t>(ch) * s.kh * s.kw;
      for (int ki = 0; ki < s.kh; ++ki) {
        const int yoff = ki * s.dilation - s.padding;
        const auto [ylo, yhi] = valid_range(yoff, s.stride, g.h, g.ho);
        for (int kj = 0; kj < s.kw; ++kj) {
          const T wv = wc[ki * s.kw + kj];
          const int xoff = kj * s.dilation - s.padding;
          const auto [xlo, xhi] = valid_range(xoff, s.stride, g.w, g.wo);
          for (int oy = ylo; oy < yhi; ++oy) {
            const T* src = xc + static_cast<std::ptrdiff_t>(oy * s.stride + yoff) * g.w + xoff;
            T* dst = oc + static_cast<std::size_t>(oy) * g.wo;
            if (s.stride == 1) {
              for (int ox = xlo; ox < xhi; ++ox) dst[ox] += wv * src[ox];
            } else {
              for (int ox = xlo; ox < xhi; ++ox) dst[ox] += wv * src[ox * s.stride];
            }
          }
        }
      }
    }
  }
}

template <Real T>
void conv_backward_depthwise(const T* x, const T* wt, const T* dy, int batch,
                             const ConvGeometry& g, T* dx, T* dw, T* db) {
  const auto& s = g.spec;
  const int c = s.in_channels;
  for (int b = 0; b < batch; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t xo = (static_cast<std::size_t>(b) * c + ch) * g.h * g.w;
      const T* dyc = dy + (static_cast<std::size_t>(b) * c + ch) * g.ho * g.wo;
      const T* wc = wt + static_cast<std::size_t>(ch) * s.kh * s.kw;
      if (db) {
        T acc = 0;
        for (int i = 0; i < g.ho * g.wo; ++i) acc += dyc[i];
        db[ch] += acc;
      }
      for (int ki = 0; ki < s.kh; ++ki) {
        const int yoff = ki * s.dilation - s.padding;
        const auto [ylo, yhi] = valid_range(yoff, s.stride, g.h, g.ho);
        for (int kj = 0; kj < s.kw; ++kj) {
          const int xoff = kj * s.dilation - s.padding;
          const auto [xlo, xhi] = valid_range(xoff, s.stride, g.w, g.wo);
          const T wv = wc[ki * s.kw + kj];
          T wacc = 0;
          for (int oy = ylo; oy < yhi; ++oy) {
            const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(oy * s.stride + yoff) * g.w + xoff;
            const T* g_out = dyc + static_cast<std::size_t>(oy) * g.wo;
            const T* src = x + xo + row;
            T* dst = dx ? dx + xo + row : nullptr;
            for (int ox = xlo; ox < xhi; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s.stride;
              wacc += g_out[ox] * src[ix];
              if (dst) dst[ix] += wv * g_out[ox];
            }
          }
          if (dw) dw[ch * s.kh * s.kw + ki * s.kw + kj] += wacc;
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation over (n, c, h, w) input.
///
/// weight is (out_c, in_c / groups, kh, kw); bias, when given, is a tensor of
/// out_c values in any 4-D shape. Depthwise specs use a direct loop kernel;
/// everything else goes through im2col and a matrix product.
template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 const ConvSpec& spec) {
  spec.validate();
  if (x.c() != spec.in_channels) {
    throw DimensionError("conv2d: input has " + std::to_string(x.c()) + " channels, spec expects " +
                         std::to_string(spec.in_channels));
  }
  if (weight.shape() != spec.weight_shape()) {
    throw DimensionError("conv2d: weight shape " + weight.shape().str() + " != expected " +
                         spec.weight_shape().str());
  }
  if (bias && bias->numel() != static_cast<std::size_t>(spec.out_channels)) {
    throw DimensionError("conv2d: bias has " + std::to_string(bias->numel()) + " values, expected " +
                         std::to_string(spec.out_channels));
  }
  const int ho = spec.out_size(x.h(), spec.kh);
  const int wo = spec.out_size(x.w(), spec.kw);
  if (ho < 1 || wo < 1) {
    throw ConfigError("conv2d: non-positive output size for input " + x.shape().str());
  }
  const detail::ConvGeometry geo{spec, x.h(), x.w(), ho, wo};
  const Shape out_shape{x.n(), spec.out_channels, ho, wo};
  Buffer<T> out(out_shape.numel());
  const T* bptr = bias ? bias->data().data() : nullptr;
  const bool dw = spec.is_depthwise();
  if (dw) {
    detail::conv_forward_depthwise(x.data().data(), weight.data().data(), bptr, x.n(), geo,
                                   out.data());
  } else {
    detail::conv_forward_gemm(x.data().data(), weight.data().data(), bptr, x.n(), geo, out.data());
  }

  std::vector<std::shared_ptr<detail::Node<T>>> inputs{x.node(), weight.node()};
  if (bias) inputs.push_back(bias->node());
  const int batch = x.n();
  return detail::make_result<T>(out_shape, std::move(out), std::move(inputs),
                                [geo, batch, dw](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& wn = *self.inputs[1];
    T* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
    T* dwp = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
    T* db = nullptr;
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      db = self.inputs[2]->grad_buffer().data();
    }
    if (dw) {
      detail::conv_backward_depthwise(xn.data.data(), wn.data.data(), self.grad.data(), batch, geo,
                                      dx, dwp, db);
    } else {
      detail::conv_backward_gemm(xn.data.data(), wn.data.data(), self.grad.data(), batch, geo, dx,
                                 dwp, db);
    }
  });
}

template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const ConvSpec& spec) {
  return conv2d<T>(x, weight, std::nullopt, spec);
}

}  // namespace mslka
