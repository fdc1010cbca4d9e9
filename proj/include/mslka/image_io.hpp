#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mslka/tensor.hpp"

namespace mslka {

/// Decodes any PNG as 8-bit RGB into a (1, 3, h, w) tensor in [0, 1].
inline Tensor<float> read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot decode image " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode image " + path.string() + ": " + msg);
  }
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  Tensor<float> t({1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
  return t;
}

/// Quantizes image `b` of an (n, 3, h, w) tensor to 8-bit RGB, rounding and
/// clamping to [0, 255].
inline std::vector<std::uint8_t> to_rgb8(const Tensor<float>& t, int b = 0) {
  if (t.c() != 3) throw DimensionError("RGB image needs 3 channels, got " + t.shape().str());
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(t.h()) * t.w() * 3);
  for (int y = 0; y < t.h(); ++y)
    for (int x = 0; x < t.w(); ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(t.at(b, c, y, x), 0.0f, 1.0f);
        buf[(static_cast<std::size_t>(y) * t.w() + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return buf;
}

inline Tensor<float> from_rgb8(const std::vector<std::uint8_t>& buf, int h, int w) {
  Tensor<float> t({1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
  return t;
}

inline void write_png(const std::filesystem::path& path, const Tensor<float>& t, int b = 0) {
  const auto buf = to_rgb8(t, b);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(t.w());
  image.height = static_cast<png_uint_32>(t.h());
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write image " + path.string() + ": " + image.message);
  }
}

}  // namespace mslka
