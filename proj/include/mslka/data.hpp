#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "mslka/image_io.hpp"
#include "mslka/metrics.hpp"
#include "mslka/random.hpp"

namespace mslka {

/// One training example: (1, 3, h, w) tensors in [0, 1].
struct SamplePair {
  Tensor<float> input;
  Tensor<float> gt;
};

// ---------------------------------------------------------------------------
// Synthetic pairs
// ---------------------------------------------------------------------------

namespace detail {

/// Independent stream per (seed, sample, purpose).
inline Rng sample_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t purpose) {
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL + index * 0xbf58476d1ce4e5b9ULL + purpose * 0x94d049bb133111ebULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return Rng(z ^ (z >> 31));
}

inline float quantize8(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0); }

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

}  // namespace detail

/// Clean background: a two-colour linear gradient, smooth low-frequency
/// noise and a few low-contrast discs and boxes. Quantized to 8 bits.
inline Tensor<float> synth_background(int size, Rng& rng) {
  std::array<double, 3> c0{}, c1{};
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.1, 0.9);
    c1[c] = rng.uniform(0.1, 0.9);
  }
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double gx = std::cos(angle), gy = std::sin(angle);

  // 5x5 random lattice, bilinearly interpolated, per channel.
  constexpr int kGrid = 5;
  std::array<std::array<double, kGrid * kGrid>, 3> lattice{};
  const double amp = rng.uniform(0.03, 0.12);
  for (auto& ch : lattice)
    for (auto& v : ch) v = rng.uniform(-amp, amp);

  struct Shape2 {
    bool disc;
    double cx, cy, r, rx, ry;
    std::array<double, 3> tint;
    double alpha;
  };
  std::vector<Shape2> shapes(static_cast<std::size_t>(rng.uniform_int(1, 3)));
  for (auto& s : shapes) {
    s.disc = rng.bernoulli(0.5);
    s.cx = rng.uniform(0, size);
    s.cy = rng.uniform(0, size);
    s.r = rng.uniform(0.1, 0.3) * size;
    s.rx = rng.uniform(0.08, 0.3) * size;
    s.ry = rng.uniform(0.08, 0.3) * size;
    for (auto& t : s.tint) t = rng.uniform(0.1, 0.9);
    s.alpha = rng.uniform(0.15, 0.35);
  }

  Tensor<float> img({1, 3, size, size});
  const double half = (size - 1) / 2.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double t = std::clamp(0.5 + ((x - half) * gx + (y - half) * gy) / size, 0.0, 1.0);
      const double u = static_cast<double>(x) / std::max(1, size - 1) * (kGrid - 1);
      const double v = static_cast<double>(y) / std::max(1, size - 1) * (kGrid - 1);
      const int u0 = std::min(static_cast<int>(u), kGrid - 2), v0 = std::min(static_cast<int>(v), kGrid - 2);
      const double fu = u - u0, fv = v - v0;
      for (int c = 0; c < 3; ++c) {
        const auto& L = lattice[c];
        const double noise = (1 - fv) * ((1 - fu) * L[v0 * kGrid + u0] + fu * L[v0 * kGrid + u0 + 1]) +
                             fv * ((1 - fu) * L[(v0 + 1) * kGrid + u0] + fu * L[(v0 + 1) * kGrid + u0 + 1]);
        double val = (1 - t) * c0[c] + t * c1[c] + noise;
        for (const auto& s : shapes) {
          const bool inside = s.disc ? (x - s.cx) * (x - s.cx) + (y - s.cy) * (y - s.cy) < s.r * s.r
                                     : std::abs(x - s.cx) < s.rx && std::abs(y - s.cy) < s.ry;
          if (inside) val = (1 - s.alpha) * val + s.alpha * s.tint[c];
        }
        img.at(0, c, y, x) = detail::quantize8(val);
      }
    }
  return img;
}

/// Draws 1-5 text-like items (words of stroke glyphs, or solid bars) in a
/// colour chosen to contrast with the background.
inline Tensor<float> synth_composite(const Tensor<float>& background, Rng& rng) {
  const int size = background.h();
  double luma = 0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < background.w(); ++x)
      luma += 0.299 * background.at(0, 0, y, x) + 0.587 * background.at(0, 1, y, x) + 0.114 * background.at(0, 2, y, x);
  luma /= static_cast<double>(size) * background.w();

  struct Stroke {
    double ax, ay, bx, by, radius;
  };
  struct Item {
    std::vector<Stroke> strokes;
    std::array<double, 3> color;
  };
  std::vector<Item> items(static_cast<std::size_t>(rng.uniform_int(1, 5)));
  for (auto& item : items) {
    const bool bright = luma < 0.5;
    for (auto& c : item.color) c = bright ? rng.uniform(0.85, 1.0) : rng.uniform(0.0, 0.15);
    if (rng.bernoulli(0.75)) {
      // A word: 2-5 glyphs of 2-3 strokes each inside glyph boxes.
      const double gh = rng.uniform(0.1, 0.22) * size;
      const double gw = 0.65 * gh;
      const int glyphs = rng.uniform_int(2, 5);
      const double ox = rng.uniform(0, std::max(1.0, size - glyphs * gw * 1.2));
      const double oy = rng.uniform(0, std::max(1.0, size - gh));
      const double radius = std::max(0.6, gh / 10.0);
      for (int g = 0; g < glyphs; ++g) {
        const double bx = ox + g * gw * 1.2;
        const int n = rng.uniform_int(2, 3);
        for (int s = 0; s < n; ++s) {
          item.strokes.push_back({bx + rng.uniform(0, gw), oy + rng.uniform(0, gh), bx + rng.uniform(0, gw),
                                  oy + rng.uniform(0, gh), radius});
        }
      }
    } else {
      const double len = rng.uniform(0.1, 0.3) * size;
      const double ax = rng.uniform(0, size - len), ay = rng.uniform(0, size);
      item.strokes.push_back({ax, ay, ax + len, ay, rng.uniform(1.0, 0.05 * size + 1.0)});
    }
  }

  Tensor<float> img = background.clone();
  for (const auto& item : items)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < background.w(); ++x) {
        bool hit = false;
        for (const auto& s : item.strokes) {
          if (detail::segment_distance(x, y, s.ax, s.ay, s.bx, s.by) <= s.radius) {
            hit = true;
            break;
          }
        }
        if (!hit) continue;
        for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = detail::quantize8(item.color[c]);
      }
  return img;
}

/// Sample `index` of the synthetic corpus for `seed`. The background is
/// drawn from its own stream, so synth_background(size, detail::sample_rng(
/// seed, index, 0)) reproduces gt exactly.
inline SamplePair synth_sample(int size, std::uint64_t seed, std::uint64_t index) {
  Rng bg_rng = detail::sample_rng(seed, index, 0);
  Rng fg_rng = detail::sample_rng(seed, index, 1);
  SamplePair p;
  p.gt = synth_background(size, bg_rng);
  p.input = synth_composite(p.gt, fg_rng);
  return p;
}

inline std::string sample_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.png", index);
  return buf;
}

/// Writes out_dir/input/NNNNNN.png and out_dir/gt/NNNNNN.png.
inline void synth_generate(int count, int size, std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (count < 1) throw ConfigError("count must be >= 1");
  if (size < 8 || size % 8 != 0) throw ConfigError("size must be a positive multiple of 8, got " + std::to_string(size));
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "input", ec);
  std::filesystem::create_directories(out_dir / "gt", ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  for (int i = 0; i < count; ++i) {
    const auto p = synth_sample(size, seed, static_cast<std::uint64_t>(i));
    write_png(out_dir / "input" / sample_name(i), p.input);
    write_png(out_dir / "gt" / sample_name(i), p.gt);
  }
}

// ---------------------------------------------------------------------------
// Paired directory dataset
// ---------------------------------------------------------------------------

/// root/input/*.png paired with root/gt/*.png by filename, in lexicographic
/// order. Images are decoded on access.
class PairedDataset {
 public:
  explicit PairedDataset(std::filesystem::path root) : root_(std::move(root)) {
    names_ = match_filenames(root_ / "input", root_ / "gt");
    if (names_.empty()) throw IoError("empty dataset: no PNG pairs under " + root_.string());
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::filesystem::path& root() const { return root_; }

  SamplePair load(std::size_t i) const {
    SamplePair p{read_png(root_ / "input" / names_.at(i)), read_png(root_ / "gt" / names_.at(i))};
    if (p.input.shape() != p.gt.shape()) {
      throw DimensionError("input and gt sizes differ for " + names_[i] + ": " + p.input.shape().str() + " vs " +
                           p.gt.shape().str());
    }
    return p;
  }

 private:
  std::filesystem::path root_;
  std::vector<std::string> names_;
};

inline PairedDataset load_paired_dataset(const std::filesystem::path& root) { return PairedDataset(root); }

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double rotation_max_deg = 10.0;
  double flip_prob = 0.5;
};

/// One geometric transform, applied identically to input and gt.
struct AugmentDraw {
  double angle_deg = 0.0;
  bool flip_h = false;
  bool flip_v = false;

  static AugmentDraw sample(Rng& rng, const AugmentConfig& cfg = {}) {
    AugmentDraw d;
    d.angle_deg = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg);
    d.flip_h = rng.bernoulli(cfg.flip_prob);
    d.flip_v = rng.bernoulli(cfg.flip_prob);
    return d;
  }
};

namespace detail {

/// Mirror a continuous coordinate into [0, n-1] (edge sample not repeated).
inline double reflect_coord(double v, int n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * (n - 1);
  v = std::fmod(std::abs(v), period);
  return v > n - 1 ? period - v : v;
}

}  // namespace detail

/// Rotation about the image centre with bilinear resampling and reflection
/// padding, then the flips. Works on every image of an (n, c, h, w) tensor.
inline Tensor<float> apply_augment(const Tensor<float>& img, const AugmentDraw& d) {
  const Shape s = img.shape();
  Tensor<float> rotated = img.clone();
  if (d.angle_deg != 0.0) {
    const double a = d.angle_deg * std::numbers::pi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    const double cy = (s.h - 1) / 2.0, cx = (s.w - 1) / 2.0;
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        // Inverse map: output pixel to source position.
        const double sx = detail::reflect_coord(ca * (x - cx) + sa * (y - cy) + cx, s.w);
        const double sy = detail::reflect_coord(-sa * (x - cx) + ca * (y - cy) + cy, s.h);
        const int x0 = std::min(static_cast<int>(sx), s.w - 1), y0 = std::min(static_cast<int>(sy), s.h - 1);
        const int x1 = std::min(x0 + 1, s.w - 1), y1 = std::min(y0 + 1, s.h - 1);
        const double fx = sx - x0, fy = sy - y0;
        for (int b = 0; b < s.n; ++b)
          for (int c = 0; c < s.c; ++c) {
            const double v = (1 - fy) * ((1 - fx) * img.at(b, c, y0, x0) + fx * img.at(b, c, y0, x1)) +
                             fy * ((1 - fx) * img.at(b, c, y1, x0) + fx * img.at(b, c, y1, x1));
            rotated.at(b, c, y, x) = static_cast<float>(v);
          }
      }
  }
  if (!d.flip_h && !d.flip_v) return rotated;
  Tensor<float> out(s);
  for (int b = 0; b < s.n; ++b)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          out.at(b, c, y, x) = rotated.at(b, c, d.flip_v ? s.h - 1 - y : y, d.flip_h ? s.w - 1 - x : x);
        }
  return out;
}

inline SamplePair augment_pair(const SamplePair& p, const AugmentDraw& d) {
  return {apply_augment(p.input, d), apply_augment(p.gt, d)};
}

inline SamplePair augment_pair(const SamplePair& p, Rng& rng, const AugmentConfig& cfg = {}) {
  return augment_pair(p, AugmentDraw::sample(rng, cfg));
}

}  // namespace mslka
