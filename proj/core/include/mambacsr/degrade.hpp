#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mambacsr/image.hpp"

namespace mambacsr {

/// Downsample factor + JPEG quality factor. qf outside {10, 20, 30} is
/// permitted but warned about on stderr.
struct DegradeSpec {
  int scale = 4;
  int qf = 10;
};

/// Separable Catmull-Rom (a = -0.5) resize, float intermediate, clamped and
/// rounded on write-out.
ImageU8 bicubic_resize(const ImageU8& img, int out_h, int out_w);

// Full-range BT.601 conversions.
void rgb_to_ycbcr(double r, double g, double b, double& y, double& cb, double& cr);
void ycbcr_to_rgb(double y, double cb, double cr, double& r, double& g, double& b);

/// Y plane of an image as doubles in [0, 255].
std::vector<double> luma_plane(const ImageU8& img);

/// 8x8 quantization tables after quality scaling, every entry in [1, 255].
struct QuantTables {
  std::array<int, 64> luma;
  std::array<int, 64> chroma;
};

QuantTables base_quant_tables();
QuantTables quant_tables_for_quality(int qf);

// Orthonormal 8x8 DCT-II pair (row-major 64-element blocks).
void dct8x8_forward(const double* in, double* out);
void dct8x8_inverse(const double* in, double* out);

/// DCT-domain quantization degradation: YCbCr, 4:2:0 mean subsampling, per
/// 8x8 block level shift / DCT / quantize / dequantize / inverse, nearest
/// chroma upsample, back to RGB. No entropy coding; the pixel-domain
/// artifacts are the product.
ImageU8 jpeg_like_compress(const ImageU8& img, int qf);

/// Bicubic 1/scale downsample followed by jpeg_like_compress.
ImageU8 degrade(const ImageU8& hr, const DegradeSpec& spec);

/// One of the 8 dihedral transforms of the square grid
/// (bit 0: mirror columns, bit 1: mirror rows, bit 2: transpose).
ImageU8 dihedral_transform(const ImageU8& img, int which);

/// Seeded deterministic square crop plus one dihedral transform.
ImageU8 crop_and_augment(const ImageU8& img, int size, uint64_t seed);

}  // namespace mambacsr
