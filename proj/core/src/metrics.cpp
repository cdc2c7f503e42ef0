#include "mambacsr/metrics.hpp"

#include <array>
#include <cmath>
#include <vector>

#include "mambacsr/degrade.hpp"
#include "mambacsr/errors.hpp"

namespace mambacsr {

namespace {

void require_same_extents(const ImageU8& a, const ImageU8& b, const char* op) {
  if (!a.same_extents(b)) {
    throw ShapeError(std::string(op) + ": extents " + std::to_string(a.width) +
                     "x" + std::to_string(a.height) + " vs " +
                     std::to_string(b.width) + "x" + std::to_string(b.height));
  }
}

constexpr int kWin = 11;
constexpr int kHalf = kWin / 2;

const std::array<double, kWin * kWin>& gaussian_window() {
  static const std::array<double, kWin * kWin> w = [] {
    std::array<double, kWin * kWin> g{};
    const double sigma = 1.5;
    double sum = 0.0;
    for (int r = 0; r < kWin; ++r) {
      for (int c = 0; c < kWin; ++c) {
        const double dy = r - kHalf, dx = c - kHalf;
        const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        g[static_cast<size_t>(r * kWin + c)] = v;
        sum += v;
      }
    }
    for (double& v : g) v /= sum;
    return g;
  }();
  return w;
}

}  // namespace

double psnr_y(const ImageU8& a, const ImageU8& b) {
  require_same_extents(a, b, "psnr_y");
  const std::vector<double> ya = luma_plane(a);
  const std::vector<double> yb = luma_plane(b);
  double mse = 0.0;
  for (size_t i = 0; i < ya.size(); ++i) {
    const double d = ya[i] - yb[i];
    mse += d * d;
  }
  mse /= static_cast<double>(ya.size());
  if (mse <= 0.0) return kPsnrCapDb;
  const double psnr = 10.0 * std::log10(255.0 * 255.0 / mse);
  return std::min(psnr, kPsnrCapDb);
}

double ssim(const ImageU8& a, const ImageU8& b) {
  require_same_extents(a, b, "ssim");
  const int h = a.height, w = a.width;
  if (h < kWin || w < kWin) {
    throw ShapeError("ssim: images must be at least 11x11");
  }
  const std::vector<double> ya = luma_plane(a);
  const std::vector<double> yb = luma_plane(b);
  const auto& win = gaussian_window();
  constexpr double kL = 255.0;
  constexpr double c1 = (0.01 * kL) * (0.01 * kL);
  constexpr double c2 = (0.03 * kL) * (0.03 * kL);
  double total = 0.0;
  int64_t count = 0;
  for (int r = kHalf; r < h - kHalf; ++r) {
    for (int c = kHalf; c < w - kHalf; ++c) {
      double mx = 0.0, my = 0.0, mxx = 0.0, myy = 0.0, mxy = 0.0;
      for (int dr = -kHalf; dr <= kHalf; ++dr) {
        const size_t row = static_cast<size_t>(r + dr) * w + (c - kHalf);
        const double* wa = ya.data() + row;
        const double* wb = yb.data() + row;
        const double* wp = win.data() + static_cast<size_t>(dr + kHalf) * kWin;
        for (int dc = 0; dc < kWin; ++dc) {
          const double pa = wa[dc], pb = wb[dc], g = wp[dc];
          mx += g * pa;
          my += g * pb;
          mxx += g * pa * pa;
          myy += g * pb * pb;
          mxy += g * pa * pb;
        }
      }
      const double vx = mxx - mx * mx;
      const double vy = myy - my * my;
      const double cov = mxy - mx * my;
      const double num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
      const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace mambacsr
