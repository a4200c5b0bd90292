#pragma once

#include <string>

#include "mcd/image.hpp"

namespace mcd {

// PNG I/O. 8-bit and 16-bit gray / RGB files decode to [0, 1] (x/255 or
// x/65535); palette images expand to RGB, alpha channels are dropped.
ImagePlane read_image(const std::string& path);

// 8-bit encode, round(v * 255).
void write_image8(const std::string& path, const ImagePlane& img);
// 16-bit encode, round(v * 65535).
void write_image16(const std::string& path, const ImagePlane& img);

// Binary masks as single-channel 8-bit files with values {0, 255}.
// Reading thresholds at > 127.
std::vector<uint8_t> read_mask(const std::string& path, int* h, int* w);
void write_mask(const std::string& path, const std::vector<uint8_t>& mask,
                int h, int w);

}  // namespace mcd
