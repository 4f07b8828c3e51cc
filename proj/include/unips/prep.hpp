#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "unips/image.hpp"
#include "unips/numkit/ops.hpp"

// Input conditioning: mean normalization, mask-driven crop, resize to the
// canonical square resolution with the mask appended as a fourth channel.

namespace unips::prep {

class PrepError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Inclusive pixel rectangle.
struct Rect {
  int row0 = 0, col0 = 0, row1 = -1, col1 = -1;
  int height() const { return row1 - row0 + 1; }
  int width() const { return col1 - col0 + 1; }
  bool operator==(const Rect&) const = default;
};

/// Mean over mask pixels, channels pooled, accumulated in double.
inline double masked_mean(const Image& img, const Mask& mask) {
  if (!(img.height == mask.height && img.width == mask.width))
    throw PrepError("masked_mean: image and mask sizes differ");
  double sum = 0;
  std::size_t n = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      if (!mask(y, x)) continue;
      for (int c = 0; c < img.channels; ++c) sum += img.at(y, x, c);
      n += static_cast<std::size_t>(img.channels);
    }
  if (n == 0) throw PrepError("masked_mean: empty mask");
  return sum / static_cast<double>(n);
}

/// image / masked mean. The whole frame is scaled; only the statistic is masked.
inline Image normalize_by_mean(const Image& img, const Mask& mask) {
  const double mean = masked_mean(img, mask);
  if (!(mean > 0.0)) throw PrepError("normalize_by_mean: non-positive mean (black image)");
  Image out = img;
  for (auto& v : out.px) v = static_cast<float>(static_cast<double>(v) / mean);
  return out;
}

/// Tight bounding box of the mask grown by `margin` and clamped to the frame.
inline Rect bounding_rect(const Mask& mask, int margin = 4) {
  Rect r{mask.height, mask.width, -1, -1};
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask(y, x)) {
        r.row0 = std::min(r.row0, y);
        r.row1 = std::max(r.row1, y);
        r.col0 = std::min(r.col0, x);
        r.col1 = std::max(r.col1, x);
      }
  if (r.row1 < 0) throw PrepError("crop_bounding: empty mask");
  r.row0 = std::max(0, r.row0 - margin);
  r.col0 = std::max(0, r.col0 - margin);
  r.row1 = std::min(mask.height - 1, r.row1 + margin);
  r.col1 = std::min(mask.width - 1, r.col1 + margin);
  return r;
}

inline Image crop(const Image& img, const Rect& r) {
  Image out(r.height(), r.width(), img.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(r.row0 + y, r.col0 + x, c);
  return out;
}

inline Mask crop(const Mask& m, const Rect& r) {
  Mask out(r.height(), r.width());
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.set(y, x, m(r.row0 + y, r.col0 + x));
  return out;
}

struct Cropped {
  std::vector<Image> images;
  Mask mask;
  Rect rect;
};

inline Cropped crop_bounding(const std::vector<Image>& images, const Mask& mask, int margin = 4) {
  Cropped c;
  c.rect = bounding_rect(mask, margin);
  c.mask = crop(mask, c.rect);
  c.images.reserve(images.size());
  for (const auto& img : images) {
    if (img.height != mask.height || img.width != mask.width)
      throw PrepError("crop_bounding: image and mask sizes differ");
    c.images.push_back(crop(img, c.rect));
  }
  return c;
}

/// Bilinear resize with pixel-center alignment and edge clamping.
inline Image resize_bilinear(const Image& img, int oh, int ow) {
  std::vector<nk::Taps> ty(static_cast<std::size_t>(oh)), tx(static_cast<std::size_t>(ow));
  for (int i = 0; i < oh; ++i) ty[i] = nk::bilinear_taps(nk::center_aligned(i, img.height, oh), img.height);
  for (int j = 0; j < ow; ++j) tx[j] = nk::bilinear_taps(nk::center_aligned(j, img.width, ow), img.width);
  Image out(oh, ow, img.channels);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      const auto& a = ty[i];
      const auto& b = tx[j];
      const int y0 = static_cast<int>(a.i0), y1 = static_cast<int>(a.i1);
      const int x0 = static_cast<int>(b.i0), x1 = static_cast<int>(b.i1);
      for (int c = 0; c < img.channels; ++c) {
        const double v = a.w0 * (b.w0 * img.at(y0, x0, c) + b.w1 * img.at(y0, x1, c)) +
                         a.w1 * (b.w0 * img.at(y1, x0, c) + b.w1 * img.at(y1, x1, c));
        out.at(i, j, c) = static_cast<float>(v);
      }
    }
  return out;
}

inline Image mask_image(const Mask& m) {
  Image out(m.height, m.width, 1);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) out.at(y, x) = m(y, x) ? 1.f : 0.f;
  return out;
}

/// q canonical s x s x 4 inputs (RGB + mask) plus where they came from.
struct PreprocessedStack {
  int s = 0;
  std::vector<Image> stack;
  Rect rect;
  int height = 0, width = 0;  // original resolution
};

inline void check_canonical_size(int s) {
  if (s < 16 || s % 4 != 0)
    throw PrepError("canonical resolution must be >= 16 and divisible by 4, got " + std::to_string(s));
}

inline PreprocessedStack to_canonical(const Cropped& c, int s, int orig_h, int orig_w) {
  check_canonical_size(s);
  PreprocessedStack p;
  p.s = s;
  p.rect = c.rect;
  p.height = orig_h;
  p.width = orig_w;
  Image m = resize_bilinear(mask_image(c.mask), s, s);
  for (auto& v : m.px) v = std::clamp(v, 0.f, 1.f);
  for (const auto& img : c.images) {
    const Image rgb = resize_bilinear(img, s, s);
    Image out(s, s, 4);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        for (int k = 0; k < 3; ++k) out.at(y, x, k) = rgb.at(y, x, k);
        out.at(y, x, 3) = m.at(y, x);
      }
    p.stack.push_back(std::move(out));
  }
  return p;
}

/// Normalized images at the original resolution and the canonical stack.
struct Prepared {
  std::vector<Image> normalized;
  Mask mask;
  PreprocessedStack canonical;
};

inline Prepared preprocess(const std::vector<Image>& images, const Mask& mask, int s, int margin = 4) {
  if (images.empty()) throw PrepError("preprocess: no images");
  Prepared p;
  p.mask = mask;
  p.normalized.reserve(images.size());
  for (const auto& img : images) {
    if (img.channels != 3) throw PrepError("preprocess: expected RGB images");
    p.normalized.push_back(normalize_by_mean(img, mask));
  }
  p.canonical = to_canonical(crop_bounding(p.normalized, mask, margin), s, mask.height, mask.width);
  return p;
}

}  // namespace unips::prep
