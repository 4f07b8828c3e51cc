#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Image containers shared by the data pipeline and the network front end,
// plus the on-disk formats: PFM (float), PNG (8/16-bit).

namespace unips {

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Row-major HxWxC float image; row 0 is the top of the frame.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> px;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.f)
      : height(h), width(w), channels(c), px(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c = 0) { return px[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c = 0) const {
    return px[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_size(const Image& o) const { return height == o.height && width == o.width; }
  bool operator==(const Image&) const = default;
};

/// Binary object mask.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> v;

  Mask() = default;
  Mask(int h, int w, bool fill = false) : height(h), width(w), v(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

  bool operator()(int y, int x) const { return v[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool on) { v[static_cast<std::size_t>(y) * width + x] = on ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(v.begin(), v.end(), 1)); }
  bool empty() const { return count() == 0; }
  bool operator==(const Mask&) const = default;
};

/// Per-pixel unit normals in camera coordinates (x right, y up, z toward the
/// camera) with a validity mask.
struct NormalMap {
  Image n;
  Mask valid;

  NormalMap() = default;
  NormalMap(int h, int w) : n(h, w, 3), valid(h, w) {}
  int height() const { return n.height; }
  int width() const { return n.width; }
};

// ------------------------------------------------------------------------ PFM

/// Portable float map: "PF" (3 channels) or "Pf" (1 channel), negative scale
/// = little-endian, rows stored bottom-to-top.
inline void write_pfm(const std::string& path, const Image& img) {
  static_assert(std::endian::native == std::endian::little);
  if (img.channels != 3 && img.channels != 1) throw IoError("write_pfm: need 1 or 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << (img.channels == 3 ? "PF" : "Pf") << '\n' << img.width << ' ' << img.height << '\n' << "-1.0\n";
  const std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = img.height - 1; y >= 0; --y)
    os.write(reinterpret_cast<const char*>(&img.px[static_cast<std::size_t>(y) * row]),
             static_cast<std::streamsize>(row * sizeof(float)));
  if (!os) throw IoError("write failed: " + path);
}

inline Image read_pfm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  is >> magic >> w >> h >> scale;
  is.get();
  if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0) throw IoError("malformed PFM header: " + path);
  if (scale > 0) throw IoError("big-endian PFM not supported: " + path);
  Image img(h, w, magic == "PF" ? 3 : 1);
  const std::size_t row = static_cast<std::size_t>(w) * img.channels;
  for (int y = h - 1; y >= 0; --y)
    if (!is.read(reinterpret_cast<char*>(&img.px[static_cast<std::size_t>(y) * row]),
                 static_cast<std::streamsize>(row * sizeof(float))))
      throw IoError("truncated PFM: " + path);
  return img;
}

// ------------------------------------------------------------------------ PNG

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

/// Writes interleaved samples; `bit_depth` is 8 or 16 (big-endian samples,
/// as PNG requires).
inline void write_png_raw(const std::string& path, int w, int h, int channels, int bit_depth,
                          const std::vector<std::uint8_t>& bytes, bool linear_gamma) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw IoError("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write error: " + path);
  }
  png_init_io(png, fp.get());
  const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (linear_gamma) png_set_gAMA(png, info, 1.0);
  // Fixed timestamp-free header: no tIME chunk, so output is reproducible.
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(w) * channels * (bit_depth / 8);
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(&bytes[static_cast<std::size_t>(y) * stride]));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_mask_png(const std::string& path, const Mask& m) {
  std::vector<std::uint8_t> bytes(m.v.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = m.v[i] ? 255 : 0;
  detail::write_png_raw(path, m.width, m.height, 1, 8, bytes, false);
}

/// 8-bit RGB from values already in [0,1].
inline void write_png8(const std::string& path, const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw IoError("write_png8: need 1 or 3 channels");
  std::vector<std::uint8_t> bytes(img.px.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.px[i], 0.f, 1.f) * 255.f));
  detail::write_png_raw(path, img.width, img.height, img.channels, 8, bytes, false);
}

/// 16-bit linear export: value v maps to round(clamp(v / white, 0, 1) * 65535),
/// tagged with gAMA = 1.0.
inline void write_png16_linear(const std::string& path, const Image& img, float white = 1.f) {
  std::vector<std::uint8_t> bytes(img.px.size() * 2);
  for (std::size_t i = 0; i < img.px.size(); ++i) {
    const auto v = static_cast<std::uint16_t>(std::lround(std::clamp(img.px[i] / white, 0.f, 1.f) * 65535.f));
    bytes[2 * i] = static_cast<std::uint8_t>(v >> 8);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(v & 0xFF);
  }
  detail::write_png_raw(path, img.width, img.height, img.channels, 16, bytes, true);
}

/// Reads any PNG as float samples in [0,1] (gray/RGB; alpha dropped).
inline Image read_png(const std::string& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw IoError("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("malformed PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  const int out_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  std::vector<std::uint8_t> buf(stride * static_cast<std::size_t>(h));
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[y] = &buf[static_cast<std::size_t>(y) * stride];
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  Image img(h, w, channels);
  for (int y = 0; y < h; ++y)
    for (int i = 0; i < w * channels; ++i) {
      float v;
      if (out_depth == 16) {
        const std::uint8_t* p = &buf[static_cast<std::size_t>(y) * stride + 2 * i];
        v = static_cast<float>((p[0] << 8) | p[1]) / 65535.f;
      } else {
        v = static_cast<float>(buf[static_cast<std::size_t>(y) * stride + i]) / 255.f;
      }
      img.px[static_cast<std::size_t>(y) * w * channels + i] = v;
    }
  return img;
}

inline Mask read_mask_png(const std::string& path) {
  const Image img = read_png(path);
  Mask m(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) m.set(y, x, img.at(y, x, 0) >= 0.5f);
  return m;
}

}  // namespace unips
