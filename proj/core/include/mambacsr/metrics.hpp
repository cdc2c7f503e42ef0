#pragma once

#include "mambacsr/image.hpp"

namespace mambacsr {

/// PSNR over the Y plane in dB; identical images return the documented cap of
/// 100 dB instead of infinity. Throws ShapeError on extent mismatch.
double psnr_y(const ImageU8& a, const ImageU8& b);

inline constexpr double kPsnrCapDb = 100.0;

/// Single-scale SSIM on the Y plane: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, L = 255, averaged over positions where the full
/// window fits.
double ssim(const ImageU8& a, const ImageU8& b);

}  // namespace mambacsr
