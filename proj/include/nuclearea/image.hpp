#pragma once

// RGB images as planar float tensors [3, H, W] with values in [0, 1], binary
// PPM (P6) input/output, mirror-padded patch extraction and bilinear sampling.

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "nuclearea/error.hpp"
#include "nuclearea/tensor.hpp"

namespace nuclearea {

using Image = Tensor<float>;

inline Image make_image(std::size_t width, std::size_t height, float fill = 0.0f) {
  return Image({3, height, width}, fill);
}

inline std::size_t image_width(const Image& img) { return img.dim(2); }
inline std::size_t image_height(const Image& img) { return img.dim(1); }

/// Reflects an index into [0, n) about the first and last pixel centers
/// (..., 2, 1, 0, 1, 2, ..., n-2, n-1, n-2, ...).
inline std::ptrdiff_t mirror_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Square patch of side `patch_px` whose pixel (patch_px/2, patch_px/2) sits
/// on the rounded center. Pixels beyond the image are mirrored.
inline Tensor<float> extract_patch(const Image& image, double cx, double cy, std::size_t patch_px) {
  const auto w = static_cast<std::ptrdiff_t>(image_width(image));
  const auto h = static_cast<std::ptrdiff_t>(image_height(image));
  if (!(cx >= 0.0 && cy >= 0.0 && cx < static_cast<double>(w) && cy < static_cast<double>(h)))
    throw DataError("patch center (" + std::to_string(cx) + ", " + std::to_string(cy) + ") outside the " +
                    std::to_string(w) + "x" + std::to_string(h) + " image");
  const auto x0 = static_cast<std::ptrdiff_t>(std::lround(cx)) - static_cast<std::ptrdiff_t>(patch_px / 2);
  const auto y0 = static_cast<std::ptrdiff_t>(std::lround(cy)) - static_cast<std::ptrdiff_t>(patch_px / 2);
  Tensor<float> patch({image.dim(0), patch_px, patch_px});
  for (std::size_t c = 0; c < image.dim(0); ++c)
    for (std::size_t r = 0; r < patch_px; ++r) {
      const auto sy = static_cast<std::size_t>(mirror_index(y0 + static_cast<std::ptrdiff_t>(r), h));
      for (std::size_t q = 0; q < patch_px; ++q) {
        const auto sx = static_cast<std::size_t>(mirror_index(x0 + static_cast<std::ptrdiff_t>(q), w));
        patch.at(c, r, q) = image.at(c, sy, sx);
      }
    }
  return patch;
}

/// Bilinear sample of channel `c` at continuous pixel coordinates, with
/// mirror reflection outside the image.
inline float sample_bilinear(const Image& image, std::size_t c, double x, double y) {
  const auto w = static_cast<std::ptrdiff_t>(image_width(image));
  const auto h = static_cast<std::ptrdiff_t>(image_height(image));
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const auto ix = static_cast<std::ptrdiff_t>(fx), iy = static_cast<std::ptrdiff_t>(fy);
  const auto x0 = static_cast<std::size_t>(mirror_index(ix, w)), x1 = static_cast<std::size_t>(mirror_index(ix + 1, w));
  const auto y0 = static_cast<std::size_t>(mirror_index(iy, h)), y1 = static_cast<std::size_t>(mirror_index(iy + 1, h));
  const double top = (1.0 - ax) * image.at(c, y0, x0) + ax * image.at(c, y0, x1);
  const double bottom = (1.0 - ax) * image.at(c, y1, x0) + ax * image.at(c, y1, x1);
  return static_cast<float>((1.0 - ay) * top + ay * bottom);
}

/// Symmetric mirror padding by `pad` pixels on every side.
inline Image mirror_pad(const Image& image, std::size_t pad) {
  const auto w = image_width(image), h = image_height(image);
  Image out({image.dim(0), h + 2 * pad, w + 2 * pad});
  for (std::size_t c = 0; c < image.dim(0); ++c)
    for (std::size_t y = 0; y < h + 2 * pad; ++y) {
      const auto sy = static_cast<std::size_t>(
          mirror_index(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(pad), static_cast<std::ptrdiff_t>(h)));
      for (std::size_t x = 0; x < w + 2 * pad; ++x) {
        const auto sx = static_cast<std::size_t>(mirror_index(
            static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(pad), static_cast<std::ptrdiff_t>(w)));
        out.at(c, y, x) = image.at(c, sy, sx);
      }
    }
  return out;
}

// -- PPM ----------------------------------------------------------------------

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_ppm(const std::string& path, const Image& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("PPM output needs a [3,H,W] image");
  const auto w = image_width(image), h = image_height(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::string row(w * 3, '\0');
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) row[x * 3 + c] = static_cast<char>(to_byte(image.at(c, y, x)));
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw DataError("write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  if (token() != "P6") throw DataError(path + " is not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw DataError(path + ": malformed PPM header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw DataError(path + ": only 8-bit PPM images are supported");
  std::string bytes(w * h * 3, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw DataError(path + ": truncated pixel data");
  Image image = make_image(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        image.at(c, y, x) = static_cast<float>(static_cast<unsigned char>(bytes[(y * w + x) * 3 + c])) / 255.0f;
  return image;
}

}  // namespace nuclearea
