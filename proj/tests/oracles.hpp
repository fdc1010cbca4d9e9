#pragma once

// Straightforward reference implementations used only by the tests. None of
// these share code with the library paths they check.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mslka/conv.hpp"
#include "mslka/tensor.hpp"

namespace oracle {

/// Direct summation over every output, input channel and kernel tap.
inline std::vector<double> conv2d(const mslka::Tensor<double>& x, const mslka::Tensor<double>& w,
                                  std::span<const double> bias, const mslka::ConvSpec& s) {
  const int ho = (x.h() + 2 * s.padding - s.dilation * (s.kh - 1) - 1) / s.stride + 1;
  const int wo = (x.w() + 2 * s.padding - s.dilation * (s.kw - 1) - 1) / s.stride + 1;
  const int cin_g = s.in_channels / s.groups;
  const int cout_g = s.out_channels / s.groups;
  std::vector<double> out(static_cast<std::size_t>(x.n()) * s.out_channels * ho * wo, 0.0);
  for (int b = 0; b < x.n(); ++b)
    for (int co = 0; co < s.out_channels; ++co)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const int g = co / cout_g;
          double acc = bias.empty() ? 0.0 : bias[co];
          for (int ci = 0; ci < cin_g; ++ci)
            for (int ki = 0; ki < s.kh; ++ki)
              for (int kj = 0; kj < s.kw; ++kj) {
                const int iy = oy * s.stride - s.padding + ki * s.dilation;
                const int ix = ox * s.stride - s.padding + kj * s.dilation;
                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                acc += w.at(co, ci, ki, kj) * x.at(b, g * cin_g + ci, iy, ix);
              }
          out[((static_cast<std::size_t>(b) * s.out_channels + co) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

/// Scalar half-pixel bilinear sample of one output position.
inline double bilinear_at(const std::vector<double>& img, int h, int w, int oh, int ow, int y,
                          int x) {
  auto coord = [](int o, int in, int out) {
    double c = (o + 0.5) * in / static_cast<double>(out) - 0.5;
    return std::clamp(c, 0.0, static_cast<double>(in - 1));
  };
  const double sy = coord(y, h, oh);
  const double sx = coord(x, w, ow);
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0;
  const double fx = sx - x0;
  return img[y0 * w + x0] * (1 - fy) * (1 - fx) + img[y0 * w + x1] * (1 - fy) * fx +
         img[y1 * w + x0] * fy * (1 - fx) + img[y1 * w + x1] * fy * fx;
}

/// Plain (c, h, w) image used by the metric oracles.
struct Img {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;
  double at(int ch, int y, int x) const { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
};

/// relu then 2x2 mean, on a flat (n, c, h, w) buffer.
inline std::vector<double> relu_pool(const std::vector<double>& x, int n, int c, int h, int w) {
  std::vector<double> out(static_cast<std::size_t>(n) * c * (h / 2) * (w / 2));
  std::size_t k = 0;
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < h / 2; ++y)
      for (int xx = 0; xx < w / 2; ++xx) {
        double acc = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            acc += std::max(0.0, x[(static_cast<std::size_t>(p) * h + 2 * y + dy) * w + 2 * xx + dx]);
        out[k++] = acc / 4;
      }
  return out;
}

/// Gram entries G[b][i][j] = sum_p f_i(p) f_j(p) / (c h w).
inline std::vector<double> gram(std::span<const double> f, int n, int c, int h, int w) {
  std::vector<double> g(static_cast<std::size_t>(n) * c * c, 0.0);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j) {
        double acc = 0;
        for (std::size_t p = 0; p < hw; ++p) acc += f[(b * c + i) * hw + p] * f[(b * c + j) * hw + p];
        g[(static_cast<std::size_t>(b) * c + i) * c + j] = acc / static_cast<double>(c * hw);
      }
  return g;
}

/// SSIM of one 11x11 window at (y, x), computed directly from the 2-D
/// Gaussian weights.
inline double ssim_window(const Img& a, const Img& b, int ch, int y, int x) {
  const int n = 11;
  const double sigma = 1.5;
  double wsum = 0;
  double wts[11][11];
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double di = i - 5.0, dj = j - 5.0;
      wts[i][j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
      wsum += wts[i][j];
    }
  double ma = 0, mb = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      ma += wts[i][j] / wsum * a.at(ch, y + i, x + j);
      mb += wts[i][j] / wsum * b.at(ch, y + i, x + j);
    }
  double va = 0, vb = 0, cov = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double da = a.at(ch, y + i, x + j) - ma, db = b.at(ch, y + i, x + j) - mb;
      va += wts[i][j] / wsum * da * da;
      vb += wts[i][j] / wsum * db * db;
      cov += wts[i][j] / wsum * da * db;
    }
  const double c1 = 1e-4, c2 = 9e-4;
  return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

inline double mssim(const Img& a, const Img& b) {
  double acc = 0;
  int count = 0;
  for (int ch = 0; ch < a.c; ++ch)
    for (int y = 0; y + 11 <= a.h; ++y)
      for (int x = 0; x + 11 <= a.w; ++x) {
        acc += ssim_window(a, b, ch, y, x);
        ++count;
      }
  return 100.0 * acc / count;
}

inline double luma(const Img& a, int y, int x) {
  return 255.0 * (0.299 * a.at(0, y, x) + 0.587 * a.at(1, y, x) + 0.114 * a.at(2, y, x));
}

}  // namespace oracle
