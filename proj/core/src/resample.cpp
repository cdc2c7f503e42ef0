#include "mambacsr/resample.hpp"

#include <algorithm>
#include <cmath>

#include "mambacsr/errors.hpp"

namespace mambacsr {

double cubic_kernel(double s) {
  constexpr double a = -0.5;
  const double x = std::fabs(s);
  if (x <= 1.0) {
    return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  }
  if (x < 2.0) {
    return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  }
  return 0.0;
}

std::vector<CubicTap> cubic_taps(int in_extent, int out_extent) {
  if (in_extent <= 0 || out_extent <= 0) {
    throw InvariantError("cubic_taps: extents must be positive");
  }
  std::vector<CubicTap> taps(static_cast<size_t>(out_extent));
  const double ratio = static_cast<double>(in_extent) / out_extent;
  for (int o = 0; o < out_extent; ++o) {
    const double src = (o + 0.5) * ratio - 0.5;
    const double base = std::floor(src);
    const int ib = static_cast<int>(base);
    CubicTap& t = taps[static_cast<size_t>(o)];
    for (int j = 0; j < 4; ++j) {
      const int raw = ib - 1 + j;
      t.idx[j] = std::clamp(raw, 0, in_extent - 1);
      t.w[j] = cubic_kernel(src - raw);
    }
  }
  return taps;
}

}  // namespace mambacsr
