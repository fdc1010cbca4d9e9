#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <cctype>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mslka/image_io.hpp"
#include "mslka/tensor.hpp"

namespace mslka {

/// Metric conventions. Images are compared on [0, 1]; gray-level metrics use
/// 8-bit BT.601 luma.
struct MetricConfig {
  double psnr_cap = 99.0;          // reported when mse < mse_floor
  double mse_floor = 1e-10;
  int ssim_window = 11;            // Gaussian window side
  double ssim_sigma = 1.5;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  double error_threshold = 20.0;   // gray levels; error pixel iff |diff| > threshold

  nlohmann::json to_json() const {
    return {{"psnr_cap", psnr_cap},   {"mse_floor", mse_floor}, {"ssim_window", ssim_window},
            {"ssim_sigma", ssim_sigma}, {"ssim_k1", ssim_k1},     {"ssim_k2", ssim_k2},
            {"error_threshold", error_threshold}};
  }
};

struct MetricsReport {
  double psnr = 0;
  double mssim = 0;
  double mse = 0;
  double age = 0;
  double peps = 0;
  double pceps = 0;
  std::size_t count = 1;

  nlohmann::json to_json() const {
    return {{"count", count}, {"psnr", psnr}, {"mssim", mssim}, {"mse", mse},
            {"age", age},     {"peps", peps}, {"pceps", pceps}};
  }
};

/// Row-major (channels, h, w) image in [0, 1], clamped on construction.
struct Image {
  int channels = 0;
  int h = 0;
  int w = 0;
  std::vector<double> v;

  Image() = default;
  Image(int c, int hh, int ww, double fill = 0.0)
      : channels(c), h(hh), w(ww), v(static_cast<std::size_t>(c) * hh * ww, fill) {}

  /// Image `b` of an (n, c, h, w) tensor.
  template <Real T>
  static Image from_tensor(const Tensor<T>& t, int b = 0) {
    Image img(t.c(), t.h(), t.w());
    const std::size_t per = img.v.size();
    for (std::size_t i = 0; i < per; ++i) {
      img.v[i] = std::clamp(static_cast<double>(t.values()[b * per + i]), 0.0, 1.0);
    }
    return img;
  }

  double& at(int c, int y, int x) { return v[(static_cast<std::size_t>(c) * h + y) * w + x]; }
  double at(int c, int y, int x) const { return v[(static_cast<std::size_t>(c) * h + y) * w + x]; }
  bool same_shape(const Image& o) const { return channels == o.channels && h == o.h && w == o.w; }
};

namespace detail {

inline void check_pair(const Image& a, const Image& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("image pair shapes differ: " + std::to_string(a.channels) + "x" + std::to_string(a.h) + "x" +
                         std::to_string(a.w) + " vs " + std::to_string(b.channels) + "x" + std::to_string(b.h) +
                         "x" + std::to_string(b.w));
  }
}

inline std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  double total = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    k[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += k[i];
  }
  for (auto& e : k) e /= total;
  return k;
}

/// Separable "valid" filtering of one h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& plane, int h, int w,
                                        const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * plane[static_cast<std::size_t>(y) * w + x + i];
      rows[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * rows[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace detail

inline double mse(const Image& a, const Image& b) {
  detail::check_pair(a, b);
  double acc = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) acc += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
  return acc / static_cast<double>(a.v.size());
}

/// Peak 1.0; capped for (near-)identical images.
inline double psnr(const Image& a, const Image& b, const MetricConfig& cfg = {}) {
  const double m = mse(a, b);
  if (m < cfg.mse_floor) return cfg.psnr_cap;
  return std::min(cfg.psnr_cap, 10.0 * std::log10(1.0 / m));
}

/// Mean SSIM over channels and valid window positions, times 100.
inline double mssim(const Image& a, const Image& b, const MetricConfig& cfg = {}) {
  detail::check_pair(a, b);
  if (a.h < cfg.ssim_window || a.w < cfg.ssim_window) {
    throw DimensionError("MSSIM needs images of at least " + std::to_string(cfg.ssim_window) + "x" +
                         std::to_string(cfg.ssim_window) + ", got " + std::to_string(a.h) + "x" +
                         std::to_string(a.w));
  }
  const auto k = detail::gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma);
  const double c1 = cfg.ssim_k1 * cfg.ssim_k1, c2 = cfg.ssim_k2 * cfg.ssim_k2;
  const std::size_t plane = static_cast<std::size_t>(a.h) * a.w;
  double total = 0;
  std::size_t count = 0;
  for (int c = 0; c < a.channels; ++c) {
    std::vector<double> x(a.v.begin() + c * plane, a.v.begin() + (c + 1) * plane);
    std::vector<double> y(b.v.begin() + c * plane, b.v.begin() + (c + 1) * plane);
    std::vector<double> xx(plane), yy(plane), xy(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_valid(x, a.h, a.w, k);
    const auto my = detail::filter_valid(y, a.h, a.w, k);
    const auto sxx = detail::filter_valid(xx, a.h, a.w, k);
    const auto syy = detail::filter_valid(yy, a.h, a.w, k);
    const auto sxy = detail::filter_valid(xy, a.h, a.w, k);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    count += mx.size();
  }
  return 100.0 * total / static_cast<double>(count);
}

/// 8-bit luma, 255 * (0.299 R + 0.587 G + 0.114 B), as an h x w map.
inline std::vector<double> gray(const Image& img) {
  if (img.channels != 3) throw DimensionError("gray() needs an RGB image");
  std::vector<double> g(static_cast<std::size_t>(img.h) * img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      g[static_cast<std::size_t>(y) * img.w + x] =
          255.0 * (0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x));
    }
  return g;
}

inline double age(const Image& a, const Image& b) {
  detail::check_pair(a, b);
  const auto ga = gray(a), gb = gray(b);
  double acc = 0;
  for (std::size_t i = 0; i < ga.size(); ++i) acc += std::abs(ga[i] - gb[i]);
  return acc / static_cast<double>(ga.size());
}

/// Row-major h x w mask of pixels whose gray difference exceeds the threshold.
inline std::vector<bool> error_mask(const Image& a, const Image& b, const MetricConfig& cfg = {}) {
  detail::check_pair(a, b);
  const auto ga = gray(a), gb = gray(b);
  std::vector<bool> m(ga.size());
  for (std::size_t i = 0; i < ga.size(); ++i) m[i] = std::abs(ga[i] - gb[i]) > cfg.error_threshold;
  return m;
}

inline double peps(const Image& a, const Image& b, const MetricConfig& cfg = {}) {
  const auto m = error_mask(a, b, cfg);
  return static_cast<double>(std::count(m.begin(), m.end(), true)) / static_cast<double>(m.size());
}

/// Error pixels whose four neighbours are all error pixels; neighbours
/// outside the image count as non-error.
inline double pceps(const Image& a, const Image& b, const MetricConfig& cfg = {}) {
  const auto m = error_mask(a, b, cfg);
  const int h = a.h, w = a.w;
  auto err = [&](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w && m[static_cast<std::size_t>(y) * w + x]; };
  std::size_t clustered = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (err(y, x) && err(y - 1, x) && err(y + 1, x) && err(y, x - 1) && err(y, x + 1)) ++clustered;
    }
  return static_cast<double>(clustered) / static_cast<double>(m.size());
}

inline MetricsReport evaluate_pair(const Image& out, const Image& ref, const MetricConfig& cfg = {}) {
  MetricsReport r;
  r.mse = mse(out, ref);
  r.psnr = psnr(out, ref, cfg);
  r.mssim = mssim(out, ref, cfg);
  r.age = age(out, ref);
  r.peps = peps(out, ref, cfg);
  r.pceps = pceps(out, ref, cfg);
  return r;
}

/// Arithmetic mean of each metric; count is the number of reports.
inline MetricsReport average(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw UsageError("cannot average an empty set of metric reports");
  MetricsReport m;
  m.psnr = m.mssim = m.mse = m.age = m.peps = m.pceps = 0;
  for (const auto& r : reports) {
    m.psnr += r.psnr;
    m.mssim += r.mssim;
    m.mse += r.mse;
    m.age += r.age;
    m.peps += r.peps;
    m.pceps += r.pceps;
  }
  const double n = static_cast<double>(reports.size());
  m.psnr /= n;
  m.mssim /= n;
  m.mse /= n;
  m.age /= n;
  m.peps /= n;
  m.pceps /= n;
  m.count = reports.size();
  return m;
}

/// Sorted *.png filenames directly inside `dir`.
inline std::vector<std::string> list_png(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

/// Filenames present in both directories. Any file present in only one of
/// them raises a PairingError listing every offender.
inline std::vector<std::string> match_filenames(const std::filesystem::path& a, const std::filesystem::path& b) {
  const auto na = list_png(a), nb = list_png(b);
  const std::set<std::string> sa(na.begin(), na.end()), sb(nb.begin(), nb.end());
  std::string offenders;
  for (const auto& n : na)
    if (!sb.count(n)) offenders += " " + (a / n).string();
  for (const auto& n : nb)
    if (!sa.count(n)) offenders += " " + (b / n).string();
  if (!offenders.empty()) throw PairingError("files without a counterpart:" + offenders);
  return na;
}

inline MetricsReport evaluate_corpus(const std::filesystem::path& out_dir, const std::filesystem::path& ref_dir,
                                     const MetricConfig& cfg = {}) {
  const auto names = match_filenames(out_dir, ref_dir);
  if (names.empty()) throw IoError("no PNG images in " + out_dir.string());
  std::vector<MetricsReport> reports;
  for (const auto& n : names) {
    const auto out = Image::from_tensor(read_png(out_dir / n));
    const auto ref = Image::from_tensor(read_png(ref_dir / n));
    reports.push_back(evaluate_pair(out, ref, cfg));
  }
  return average(reports);
}

}  // namespace mslka
