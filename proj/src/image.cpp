#include "mcd/image.hpp"

#include <algorithm>
#include <cmath>

namespace mcd {

bool ImagePlane::is_valid() const {
  if (height < 1 || width < 1 || channels < 1) return false;
  if (data.size() != size_t(height) * size_t(width) * size_t(channels)) return false;
  for (float v : data) {
    if (!std::isfinite(v) || v < 0.f || v > 1.f) return false;
  }
  return true;
}

void ImagePlane::check_valid(const char* where) const {
  MCD_CHECK(is_valid(), where, ": image invalid (", height, "x", width, "x",
            channels, ", ", data.size(), " values)");
}

float luminance(float r, float g, float b) {
  return 0.299f * r + 0.587f * g + 0.114f * b;
}

ImagePlane resample_bilinear(const ImagePlane& src, int rx, int ry, int rw,
                             int rh, int out_h, int out_w) {
  MCD_CHECK(rw >= 1 && rh >= 1, "empty crop region ", rw, "x", rh);
  MCD_CHECK(rx >= 0 && ry >= 0 && rx + rw <= src.width && ry + rh <= src.height,
            "crop region (", rx, ",", ry, ",", rw, ",", rh,
            ") outside source ", src.height, "x", src.width);
  MCD_CHECK(out_h >= 1 && out_w >= 1, "bad output size ", out_h, "x", out_w);

  ImagePlane out(out_h, out_w, src.channels);
  const double sx_scale = double(rw) / double(out_w);
  const double sy_scale = double(rh) / double(out_h);

  for (int oy = 0; oy < out_h; ++oy) {
    double sy = (double(oy) + 0.5) * sy_scale - 0.5 + double(ry);
    sy = std::clamp(sy, double(ry), double(ry + rh - 1));
    const int y0 = int(std::floor(sy));
    const int y1 = std::min(y0 + 1, ry + rh - 1);
    const float fy = float(sy - double(y0));
    for (int ox = 0; ox < out_w; ++ox) {
      double sx = (double(ox) + 0.5) * sx_scale - 0.5 + double(rx);
      sx = std::clamp(sx, double(rx), double(rx + rw - 1));
      const int x0 = int(std::floor(sx));
      const int x1 = std::min(x0 + 1, rx + rw - 1);
      const float fx = float(sx - double(x0));
      for (int c = 0; c < src.channels; ++c) {
        const float top = (1.f - fx) * src.at(c, y0, x0) + fx * src.at(c, y0, x1);
        const float bot = (1.f - fx) * src.at(c, y1, x0) + fx * src.at(c, y1, x1);
        float v = (1.f - fy) * top + fy * bot;
        out.at(c, oy, ox) = std::clamp(v, 0.f, 1.f);
      }
    }
  }
  return out;
}

ImagePlane resize_bilinear(const ImagePlane& src, int out_h, int out_w) {
  return resample_bilinear(src, 0, 0, src.width, src.height, out_h, out_w);
}

}  // namespace mcd
