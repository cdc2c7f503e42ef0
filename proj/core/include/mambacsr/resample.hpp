#pragma once

#include <vector>

namespace mambacsr {

/// Keys cubic kernel with a = -0.5 (Catmull-Rom).
double cubic_kernel(double s);

/// Four source taps and weights for one output sample along one axis.
/// Source coordinates use the pixel-center convention
/// src = (dst + 0.5) * in/out - 0.5; taps are clamped to [0, in-1].
struct CubicTap {
  int idx[4];
  double w[4];
};

std::vector<CubicTap> cubic_taps(int in_extent, int out_extent);

}  // namespace mambacsr
