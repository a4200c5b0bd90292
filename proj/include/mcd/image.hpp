#pragma once

#include <cstdint>
#include <vector>

#include "mcd/common.hpp"

namespace mcd {

// Dense image, planar channel-major storage, values in [0, 1].
struct ImagePlane {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;  // data[(c*H + y)*W + x]

  ImagePlane() = default;
  ImagePlane(int h, int w, int c)
      : height(h), width(w), channels(c), data(size_t(h) * size_t(w) * size_t(c), 0.f) {
    MCD_CHECK(h >= 1 && w >= 1 && c >= 1, "bad image dims ", h, "x", w, "x", c);
  }

  static ImagePlane filled(int h, int w, int c, float v) {
    ImagePlane img(h, w, c);
    std::fill(img.data.begin(), img.data.end(), v);
    return img;
  }

  float& at(int c, int y, int x) {
    return data[size_t((c * height + y) * width + x)];
  }
  float at(int c, int y, int x) const {
    return data[size_t((c * height + y) * width + x)];
  }

  size_t plane_size() const { return size_t(height) * size_t(width); }

  bool is_valid() const;
  // Throws InvalidArgument when shape or value range is violated.
  void check_valid(const char* where) const;
};

// Bilinear resample of a source rectangle (half-pixel centers, edge clamp).
// Region (x, y, w, h) is given in source pixel coordinates and may be the
// whole image; the identity case (region == full image, out == src size)
// reproduces the source bit-exactly.
ImagePlane resample_bilinear(const ImagePlane& src, int rx, int ry, int rw,
                             int rh, int out_h, int out_w);

// Whole-image resize, same convention.
ImagePlane resize_bilinear(const ImagePlane& src, int out_h, int out_w);

// Per-pixel BT.601 luminance of an RGB image.
float luminance(float r, float g, float b);

}  // namespace mcd
