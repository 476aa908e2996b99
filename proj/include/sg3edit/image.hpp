#pragma once

// Interleaved floating point images and resampling.
//
// Pixel values live in [-1, 1] (generator convention); conversion to 8/16-bit
// happens only at file boundaries. Pixel (x, y) has its center at x + 0.5.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "core.hpp"
#include "transform.hpp"

namespace sg3 {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<double> data;  ///< row-major, interleaved channels

  Image() = default;
  Image(int w, int h, int c = 3, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {
    require(w >= 0 && h >= 0 && c > 0, ErrorCode::InvalidArgument, "bad image shape");
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  double& at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a(&width, sizeof width);
    h = fnv1a(&height, sizeof height, h);
    h = fnv1a(&channels, sizeof channels, h);
    return fnv1a(data.data(), data.size() * sizeof(double), h);
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Per-pixel validity (or write count, for coverage checks).
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<int> values;

  Mask() = default;
  Mask(int w, int h, int fill = 0) : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}
  int& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  int at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count_equal(int v) const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), v)); }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  require(a.same_shape(b), ErrorCode::DimensionMismatch, std::string(what) + ": image shapes differ");
}

inline double mean_squared_error(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  if (a.data.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

/// Max-abs difference, optionally restricted to pixels where mask != 0.
inline double max_abs_diff(const Image& a, const Image& b, const Mask* mask = nullptr) {
  require_same_shape(a, b, "max_abs_diff");
  double err = 0.0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (mask && mask->at(x, y) == 0) continue;
      for (int c = 0; c < a.channels; ++c) err = std::max(err, std::abs(a.at(x, y, c) - b.at(x, y, c)));
    }
  return err;
}

/// Integer-pixel sub-image; the box must lie inside the image.
struct Box {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

inline bool box_inside(const Box& box, int width, int height) {
  return box.width > 0 && box.height > 0 && box.x >= 0 && box.y >= 0 && box.x + box.width <= width &&
         box.y + box.height <= height;
}

inline Image crop(const Image& img, const Box& box) {
  require(box_inside(box, img.width, img.height), ErrorCode::OutOfBounds, "crop box outside image");
  Image out(box.width, box.height, img.channels);
  for (int y = 0; y < box.height; ++y)
    for (int x = 0; x < box.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(box.x + x, box.y + y, c);
  return out;
}

enum class Interpolation { Linear, Lagrange8 };
enum class Border { Invalid, Clamp };

namespace detail {

/// Lagrange weights for taps at integer offsets [-3, 4] relative to floor(x).
/// An exactly-integer position yields weight 1 at offset 0 and 0 elsewhere.
inline void lagrange8_weights(double frac, double w[8]) {
  for (int i = 0; i < 8; ++i) {
    const double xi = i - 3;
    double num = 1.0, den = 1.0;
    for (int j = 0; j < 8; ++j) {
      if (j == i) continue;
      const double xj = j - 3;
      num *= frac - xj;
      den *= xi - xj;
    }
    w[i] = num / den;
  }
}

}  // namespace detail

/// Samples the image at continuous index coordinates (pixel centers at
/// integers). Returns false when a tap falls outside and border is Invalid.
inline bool sample(const Image& img, double sx, double sy, Interpolation interp, Border border,
                   std::span<double> out) {
  const int taps = interp == Interpolation::Linear ? 2 : 8;
  const int lead = interp == Interpolation::Linear ? 0 : 3;
  const double fx = std::floor(sx), fy = std::floor(sy);
  const int ix = static_cast<int>(fx) - lead, iy = static_cast<int>(fy) - lead;
  if (border == Border::Invalid &&
      (ix < 0 || iy < 0 || ix + taps > img.width || iy + taps > img.height))
    return false;
  double wx[8], wy[8];
  if (interp == Interpolation::Linear) {
    wx[0] = 1.0 - (sx - fx); wx[1] = sx - fx;
    wy[0] = 1.0 - (sy - fy); wy[1] = sy - fy;
  } else {
    detail::lagrange8_weights(sx - fx, wx);
    detail::lagrange8_weights(sy - fy, wy);
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (int j = 0; j < taps; ++j) {
    const int yy = std::clamp(iy + j, 0, img.height - 1);
    for (int i = 0; i < taps; ++i) {
      const int xx = std::clamp(ix + i, 0, img.width - 1);
      const double w = wx[i] * wy[j];
      for (int c = 0; c < img.channels; ++c) out[c] += w * img.at(xx, yy, c);
    }
  }
  return true;
}

struct WarpResult {
  Image image;
  Mask valid;
};

/// out(p) = src(M^-1 p), with both canvases in normalized centered
/// coordinates (units of their own width). Output defaults to src shape.
inline WarpResult warp(const Image& src, const TransformMatrix& m, Interpolation interp = Interpolation::Lagrange8,
                       Border border = Border::Invalid, int out_width = 0, int out_height = 0,
                       double fill = 0.0) {
  if (out_width <= 0) out_width = src.width;
  if (out_height <= 0) out_height = src.height;
  const TransformMatrix inv = inverse_rigid(m);
  WarpResult res{Image(out_width, out_height, src.channels, fill), Mask(out_width, out_height, 0)};
  std::vector<double> px(src.channels);
  const double ow = out_width, sw = src.width;
  for (int y = 0; y < out_height; ++y) {
    for (int x = 0; x < out_width; ++x) {
      const double nx = (x + 0.5 - 0.5 * out_width) / ow;
      const double ny = (y + 0.5 - 0.5 * out_height) / ow;
      const auto s = inv.apply(nx, ny);
      const double sx = s[0] * sw + 0.5 * src.width - 0.5;
      const double sy = s[1] * sw + 0.5 * src.height - 0.5;
      if (sample(src, sx, sy, interp, border, px)) {
        for (int c = 0; c < src.channels; ++c) res.image.at(x, y, c) = px[c];
        res.valid.at(x, y) = 1;
      }
    }
  }
  return res;
}

/// Integer-pixel shift: out(x, y) = src(x - dx, y - dy); no interpolation.
inline WarpResult shift_pixels(const Image& src, int dx, int dy, double fill = 0.0) {
  WarpResult res{Image(src.width, src.height, src.channels, fill), Mask(src.width, src.height, 0)};
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      const int sx = x - dx, sy = y - dy;
      if (sx < 0 || sy < 0 || sx >= src.width || sy >= src.height) continue;
      for (int c = 0; c < src.channels; ++c) res.image.at(x, y, c) = src.at(sx, sy, c);
      res.valid.at(x, y) = 1;
    }
  return res;
}

/// Resamples to a new size over the same field of view (linear interpolation,
/// edge clamped). Same-size input is returned unchanged.
inline Image resize(const Image& src, int width, int height) {
  if (width == src.width && height == src.height) return src;
  Image out(width, height, src.channels);
  std::vector<double> px(src.channels);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double sx = (x + 0.5) * src.width / width - 0.5;
      const double sy = (y + 0.5) * src.height / height - 0.5;
      sample(src, sx, sy, Interpolation::Linear, Border::Clamp, px);
      for (int c = 0; c < src.channels; ++c) out.at(x, y, c) = px[c];
    }
  return out;
}

}  // namespace sg3
