#include "mcd/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace mcd {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

}  // namespace

ImagePlane read_image(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  MCD_REQUIRE(fp != nullptr, "cannot open image file: ", path);

  png_byte sig[8];
  MCD_REQUIRE(std::fread(sig, 1, 8, fp.get()) == 8 && !png_sig_cmp(sig, 0, 8),
              "not a PNG file: ", path);

  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  MCD_REQUIRE(r.png, "png_create_read_struct failed");
  r.info = png_create_info_struct(r.png);
  MCD_REQUIRE(r.info, "png_create_info_struct failed");
  if (setjmp(png_jmpbuf(r.png))) {
    throw RuntimeFailure("PNG decode error: " + path);
  }
  png_init_io(r.png, fp.get());
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);

  const png_uint_32 w = png_get_image_width(r.png, r.info);
  const png_uint_32 h = png_get_image_height(r.png, r.info);
  const int bit_depth = png_get_bit_depth(r.png, r.info);
  const int color_type = png_get_color_type(r.png, r.info);

  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
    png_set_expand_gray_1_2_4_to_8(r.png);
  if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
  png_set_strip_alpha(r.png);
  if (bit_depth == 16) png_set_swap(r.png);  // little-endian rows
  png_read_update_info(r.png, r.info);

  const int out_depth = png_get_bit_depth(r.png, r.info);
  const int channels = png_get_channels(r.png, r.info);
  MCD_REQUIRE(channels == 1 || channels == 3, "unsupported channel count ",
              channels, " in ", path);

  const size_t rowbytes = png_get_rowbytes(r.png, r.info);
  std::vector<png_byte> buf(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);

  ImagePlane img(int(h), int(w), channels);
  if (out_depth == 8) {
    for (png_uint_32 y = 0; y < h; ++y) {
      const png_bytep row = rows[y];
      for (png_uint_32 x = 0; x < w; ++x) {
        for (int c = 0; c < channels; ++c) {
          img.at(c, int(y), int(x)) = float(row[x * png_uint_32(channels) + png_uint_32(c)]) / 255.f;
        }
      }
    }
  } else if (out_depth == 16) {
    for (png_uint_32 y = 0; y < h; ++y) {
      const uint16_t* row = reinterpret_cast<const uint16_t*>(rows[y]);
      for (png_uint_32 x = 0; x < w; ++x) {
        for (int c = 0; c < channels; ++c) {
          img.at(c, int(y), int(x)) = float(row[x * png_uint_32(channels) + png_uint_32(c)]) / 65535.f;
        }
      }
    }
  } else {
    MCD_REQUIRE(false, "unsupported bit depth ", out_depth, " in ", path);
  }
  return img;
}

namespace {

void write_png(const std::string& path, const ImagePlane& img, int bit_depth) {
  img.check_valid("write_image");
  MCD_CHECK(img.channels == 1 || img.channels == 3,
            "PNG writer supports 1 or 3 channels, got ", img.channels);

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  MCD_REQUIRE(fp != nullptr, "cannot open for writing: ", path);

  PngWriter wtr;
  wtr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  MCD_REQUIRE(wtr.png, "png_create_write_struct failed");
  wtr.info = png_create_info_struct(wtr.png);
  MCD_REQUIRE(wtr.info, "png_create_info_struct failed");
  if (setjmp(png_jmpbuf(wtr.png))) {
    throw RuntimeFailure("PNG encode error: " + path);
  }
  png_init_io(wtr.png, fp.get());

  const int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(wtr.png, wtr.info, png_uint_32(img.width), png_uint_32(img.height),
               bit_depth, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // Fixed encoder settings keep byte output reproducible across runs.
  png_set_compression_level(wtr.png, 6);
  png_write_info(wtr.png, wtr.info);
  if (bit_depth == 16) png_set_swap(wtr.png);

  if (bit_depth == 8) {
    std::vector<png_byte> row(size_t(img.width) * size_t(img.channels));
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        for (int c = 0; c < img.channels; ++c) {
          row[size_t(x * img.channels + c)] =
              png_byte(std::lround(double(img.at(c, y, x)) * 255.0));
        }
      }
      png_write_row(wtr.png, row.data());
    }
  } else {
    std::vector<uint16_t> row(size_t(img.width) * size_t(img.channels));
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        for (int c = 0; c < img.channels; ++c) {
          row[size_t(x * img.channels + c)] =
              uint16_t(std::lround(double(img.at(c, y, x)) * 65535.0));
        }
      }
      png_write_row(wtr.png, reinterpret_cast<png_bytep>(row.data()));
    }
  }
  png_write_end(wtr.png, nullptr);
}

}  // namespace

void write_image8(const std::string& path, const ImagePlane& img) {
  write_png(path, img, 8);
}

void write_image16(const std::string& path, const ImagePlane& img) {
  write_png(path, img, 16);
}

std::vector<uint8_t> read_mask(const std::string& path, int* h, int* w) {
  ImagePlane img = read_image(path);
  MCD_REQUIRE(img.channels == 1, "mask must be single-channel: ", path);
  *h = img.height;
  *w = img.width;
  std::vector<uint8_t> mask(img.plane_size());
  for (size_t i = 0; i < mask.size(); ++i) {
    mask[i] = img.data[i] > (127.f / 255.f) ? 1 : 0;
  }
  return mask;
}

void write_mask(const std::string& path, const std::vector<uint8_t>& mask,
                int h, int w) {
  MCD_CHECK(mask.size() == size_t(h) * size_t(w), "mask size mismatch");
  ImagePlane img(h, w, 1);
  for (size_t i = 0; i < mask.size(); ++i) {
    MCD_CHECK(mask[i] == 0 || mask[i] == 1, "mask must be binary");
    img.data[i] = mask[i] ? 1.f : 0.f;
  }
  write_image8(path, img);
}

}  // namespace mcd
