#pragma once

// PNG frame I/O. Pixel values in [-1, 1] map linearly onto the full 8- or
// 16-bit range; out-of-range values are clamped on write.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "image.hpp"

namespace sg3 {

namespace detail {

struct PngReadCursor {
  const std::string* bytes;
  std::size_t pos;
};

inline void png_append(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), n);
}

inline void png_flush_noop(png_structp) {}

inline void png_consume(png_structp png, png_bytep data, png_size_t n) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + n > cur->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(data, cur->bytes->data() + cur->pos, n);
  cur->pos += n;
}

}  // namespace detail

/// PNG bytes for an image; identical images always give identical bytes.
inline std::string encode_png(const Image& img, int bit_depth = 16) {
  require(bit_depth == 8 || bit_depth == 16, ErrorCode::InvalidArgument, "PNG bit depth must be 8 or 16");
  require(img.channels == 1 || img.channels == 3, ErrorCode::InvalidArgument, "PNG output needs 1 or 3 channels");
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorCode::Io, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::Io, "PNG encoding failed");
  }
  png_set_write_fn(png, &out, detail::png_append, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), bit_depth,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int bytes = bit_depth / 8;
  const double top = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * img.channels * bytes);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const double v = std::clamp((img.at(x, y, c) + 1.0) * 0.5, 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround(v * top));
        const std::size_t o = (static_cast<std::size_t>(x) * img.channels + c) * bytes;
        if (bytes == 2) {
          row[o] = static_cast<png_byte>(q >> 8);
          row[o + 1] = static_cast<png_byte>(q & 0xff);
        } else {
          row[o] = static_cast<png_byte>(q);
        }
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

/// Decodes 8- or 16-bit gray, RGB or RGBA PNG bytes (alpha is dropped) into [-1, 1].
inline Image decode_png(const std::string& bytes, const std::string& what = "PNG data") {
  require(bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0,
          ErrorCode::Format, what + " is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorCode::Io, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::Format, "PNG decoding failed for " + what);
  }
  detail::PngReadCursor cursor{&bytes, 0};
  png_set_read_fn(png, &cursor, detail::png_consume);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int in_channels = png_get_channels(png, info);
  const int out_channels = in_channels >= 3 ? 3 : 1;
  const int nbytes = depth == 16 ? 2 : 1;
  const double top = depth == 16 ? 65535.0 : 255.0;
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  Image img(width, height, out_channels);
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < out_channels; ++c) {
        const std::size_t o = (static_cast<std::size_t>(x) * in_channels + c) * nbytes;
        const unsigned q = nbytes == 2 ? (static_cast<unsigned>(row[o]) << 8) | row[o + 1] : row[o];
        img.at(x, y, c) = q / top * 2.0 - 1.0;
      }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::Io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::Io, "cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), ErrorCode::Io, "write failed for '" + path + "'");
}

inline void write_png(const Image& img, const std::string& path, int bit_depth = 16) {
  write_file_bytes(path, encode_png(img, bit_depth));
}

inline Image read_png(const std::string& path) { return decode_png(read_file_bytes(path), "'" + path + "'"); }

inline std::string frame_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06d.png", index);
  return buf;
}

}  // namespace sg3
