#pragma once

#include <cstdint>
#include <vector>

#include "mambacsr/errors.hpp"

namespace mambacsr {

enum class ScanDirection { Horizontal, Vertical };
enum class ScanGranularity { Window, Sequential };

/// A bijective visiting order over an h*w token grid.
/// perm[k] is the flat row-major index of the k-th visited token,
/// inv_perm[perm[k]] == k.
struct Trajectory {
  int height = 0;
  int width = 0;
  std::vector<int64_t> perm;
  std::vector<int64_t> inv_perm;

  int64_t length() const { return static_cast<int64_t>(perm.size()); }
};

Trajectory raster(int h, int w, ScanDirection dir);

/// Windows are visited in row-major window order; tokens inside each window
/// follow `dir` raster order. Border windows may be truncated, the result is
/// always a bijection over exactly h*w tokens.
Trajectory window_raster(int h, int w, int win, ScanDirection dir);

/// Full-sequence reversal: flip(t).perm[k] == t.perm[n-1-k].
Trajectory flip(const Trajectory& t);

/// Throws InvariantError unless perm is a bijection consistent with inv_perm.
void validate_trajectory(const Trajectory& t);

/// Two scans per block: one trajectory plus its flipped counterpart.
/// Granularity alternates every two blocks (window first), direction
/// alternates every block (horizontal first).
struct ScanSchedule {
  int block_index = 0;
  ScanGranularity granularity = ScanGranularity::Window;
  int window = 8;
  ScanDirection direction = ScanDirection::Horizontal;
};

ScanSchedule schedule_for_block(int block_index, int win);

/// Concrete visiting order for a schedule on an h*w grid. Sequential
/// granularity scans the whole grid as one window.
Trajectory make_trajectory(const ScanSchedule& s, int h, int w);

enum class CrossPlane : uint8_t { Down, Orig };

struct CrossEntry {
  CrossPlane plane;
  int row;
  int col;
};

/// Interleave of a half-scale grid with its full-scale counterpart: each
/// down-sampled token is followed immediately by its four aligned children,
/// giving a 1:4 Down:Orig ratio over a sequence of length 5*(h/2)*(w/2).
struct CrossScaleLayout {
  int down_h = 0;  // half extents
  int down_w = 0;
  std::vector<CrossEntry> sequence;
  // flat row-major original index -> position in sequence
  std::vector<int64_t> orig_seq_index;
  // flat row-major down index -> position in sequence
  std::vector<int64_t> down_seq_index;

  int origHeight() const { return 2 * down_h; }
  int origWidth() const { return 2 * down_w; }
  int64_t length() const { return static_cast<int64_t>(sequence.size()); }
};

/// h, w are the original (full-scale) extents and must be even.
CrossScaleLayout cross_scale_interleave(int h, int w);

}  // namespace mambacsr
