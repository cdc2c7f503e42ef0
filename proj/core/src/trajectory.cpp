#include "mambacsr/trajectory.hpp"

#include <algorithm>
#include <numeric>

namespace mambacsr {

namespace {

void check_extents(int h, int w) {
  if (h <= 0 || w <= 0) {
    throw InvariantError("trajectory: grid extents must be positive, got " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
}

Trajectory finalize(int h, int w, std::vector<int64_t> perm) {
  Trajectory t;
  t.height = h;
  t.width = w;
  t.perm = std::move(perm);
  t.inv_perm.assign(t.perm.size(), -1);
  for (int64_t k = 0; k < t.length(); ++k) {
    t.inv_perm[static_cast<size_t>(t.perm[static_cast<size_t>(k)])] = k;
  }
  return t;
}

}  // namespace

Trajectory raster(int h, int w, ScanDirection dir) {
  check_extents(h, w);
  std::vector<int64_t> perm;
  perm.reserve(static_cast<size_t>(h) * w);
  if (dir == ScanDirection::Horizontal) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) perm.push_back(static_cast<int64_t>(r) * w + c);
  } else {
    for (int c = 0; c < w; ++c)
      for (int r = 0; r < h; ++r) perm.push_back(static_cast<int64_t>(r) * w + c);
  }
  return finalize(h, w, std::move(perm));
}

Trajectory window_raster(int h, int w, int win, ScanDirection dir) {
  check_extents(h, w);
  if (win <= 0) {
    throw InvariantError("window_raster: window size must be >= 1, got " +
                         std::to_string(win));
  }
  std::vector<int64_t> perm;
  perm.reserve(static_cast<size_t>(h) * w);
  for (int wr = 0; wr < h; wr += win) {
    const int rend = std::min(wr + win, h);
    for (int wc = 0; wc < w; wc += win) {
      const int cend = std::min(wc + win, w);
      if (dir == ScanDirection::Horizontal) {
        for (int r = wr; r < rend; ++r)
          for (int c = wc; c < cend; ++c)
            perm.push_back(static_cast<int64_t>(r) * w + c);
      } else {
        for (int c = wc; c < cend; ++c)
          for (int r = wr; r < rend; ++r)
            perm.push_back(static_cast<int64_t>(r) * w + c);
      }
    }
  }
  return finalize(h, w, std::move(perm));
}

Trajectory flip(const Trajectory& t) {
  std::vector<int64_t> perm(t.perm.rbegin(), t.perm.rend());
  return finalize(t.height, t.width, std::move(perm));
}

void validate_trajectory(const Trajectory& t) {
  const int64_t n = static_cast<int64_t>(t.height) * t.width;
  if (t.length() != n || static_cast<int64_t>(t.inv_perm.size()) != n) {
    throw InvariantError("trajectory: perm length " + std::to_string(t.length()) +
                         " does not cover " + std::to_string(n) + " tokens");
  }
  std::vector<int64_t> sorted = t.perm;
  std::sort(sorted.begin(), sorted.end());
  for (int64_t i = 0; i < n; ++i) {
    if (sorted[static_cast<size_t>(i)] != i) {
      throw InvariantError("trajectory: perm is not a bijection over 0.." +
                           std::to_string(n - 1));
    }
  }
  for (int64_t k = 0; k < n; ++k) {
    if (t.inv_perm[static_cast<size_t>(t.perm[static_cast<size_t>(k)])] != k) {
      throw InvariantError("trajectory: inv_perm is not the inverse of perm at step " +
                           std::to_string(k));
    }
  }
}

ScanSchedule schedule_for_block(int block_index, int win) {
  if (block_index < 0) {
    throw InvariantError("schedule_for_block: negative block index");
  }
  ScanSchedule s;
  s.block_index = block_index;
  s.window = win;
  s.granularity = ((block_index / 2) % 2 == 0) ? ScanGranularity::Window
                                               : ScanGranularity::Sequential;
  s.direction = (block_index % 2 == 0) ? ScanDirection::Horizontal
                                       : ScanDirection::Vertical;
  return s;
}

Trajectory make_trajectory(const ScanSchedule& s, int h, int w) {
  const int win = (s.granularity == ScanGranularity::Window) ? s.window
                                                             : std::max(h, w);
  return window_raster(h, w, win, s.direction);
}

CrossScaleLayout cross_scale_interleave(int h, int w) {
  check_extents(h, w);
  if (h % 2 != 0 || w % 2 != 0) {
    throw InvariantError("cross_scale_interleave: extents must be even, got " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  CrossScaleLayout layout;
  layout.down_h = h / 2;
  layout.down_w = w / 2;
  const int64_t n_down = static_cast<int64_t>(layout.down_h) * layout.down_w;
  layout.sequence.reserve(static_cast<size_t>(5 * n_down));
  layout.orig_seq_index.assign(static_cast<size_t>(h) * w, -1);
  layout.down_seq_index.assign(static_cast<size_t>(n_down), -1);

  auto push_orig = [&](int r, int c) {
    layout.orig_seq_index[static_cast<size_t>(r) * w + c] =
        static_cast<int64_t>(layout.sequence.size());
    layout.sequence.push_back({CrossPlane::Orig, r, c});
  };
  for (int i = 0; i < layout.down_h; ++i) {
    for (int j = 0; j < layout.down_w; ++j) {
      layout.down_seq_index[static_cast<size_t>(i) * layout.down_w + j] =
          static_cast<int64_t>(layout.sequence.size());
      layout.sequence.push_back({CrossPlane::Down, i, j});
      push_orig(2 * i, 2 * j);
      push_orig(2 * i + 1, 2 * j);
      push_orig(2 * i, 2 * j + 1);
      push_orig(2 * i + 1, 2 * j + 1);
    }
  }
  return layout;
}

}  // namespace mambacsr
