#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mambacsr {

/// 8-bit 3-channel sRGB raster, interleaved row-major.
struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;  // height*width*3

  uint8_t at(int r, int c, int ch) const {
    return data[(static_cast<size_t>(r) * width + c) * 3 + ch];
  }
  uint8_t& at(int r, int c, int ch) {
    return data[(static_cast<size_t>(r) * width + c) * 3 + ch];
  }
  bool same_extents(const ImageU8& o) const {
    return height == o.height && width == o.width;
  }
};

/// Single-channel 8-bit raster (PGM heatmaps).
struct GrayU8 {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;  // height*width
};

ImageU8 make_image(int height, int width, uint8_t fill = 0);

// Binary P6 / P5, maxval 255, bit-exact roundtrip. Writers emit exactly
// "P6\n<w> <h>\n255\n" (or P5) followed by raw samples, via a temp file
// renamed into place on success.
ImageU8 read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageU8& img);
GrayU8 read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayU8& img);

}  // namespace mambacsr
