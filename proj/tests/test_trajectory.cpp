#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "mambacsr/ops.hpp"
#include "mambacsr/trajectory.hpp"
#include "testutil.hpp"

using namespace mambacsr;
using namespace mambacsr::testutil;

TEST_CASE("raster orders") {
  CHECK(raster(2, 2, ScanDirection::Horizontal).perm ==
        std::vector<int64_t>{0, 1, 2, 3});
  CHECK(raster(2, 2, ScanDirection::Vertical).perm ==
        std::vector<int64_t>{0, 2, 1, 3});
  CHECK(raster(1, 5, ScanDirection::Horizontal).perm ==
        raster(1, 5, ScanDirection::Vertical).perm);
  CHECK_THROWS_AS(raster(0, 3, ScanDirection::Horizontal), InvariantError);
}

TEST_CASE("window raster matches hand enumeration on 4x4 win 2") {
  const std::vector<int64_t> expected{0, 1, 4,  5,  2,  3,  6,  7,
                                      8, 9, 12, 13, 10, 11, 14, 15};
  CHECK(window_raster(4, 4, 2, ScanDirection::Horizontal).perm == expected);
}

TEST_CASE("vertical window raster transposes the within-window order") {
  CHECK(window_raster(4, 4, 2, ScanDirection::Vertical).perm ==
        std::vector<int64_t>{0, 4, 1,  5,  2,  6,  3,  7,
                             8, 12, 9, 13, 10, 14, 11, 15});
}

TEST_CASE("window raster degenerates to raster for large windows") {
  for (auto dir : {ScanDirection::Horizontal, ScanDirection::Vertical}) {
    CHECK(window_raster(5, 7, 7, dir).perm == raster(5, 7, dir).perm);
    CHECK(window_raster(5, 7, 100, dir).perm == raster(5, 7, dir).perm);
  }
  CHECK_THROWS_AS(window_raster(4, 4, 0, ScanDirection::Horizontal),
                  InvariantError);
}

TEST_CASE("trajectories are bijections with exact inverses") {
  for (int h : {5, 8, 64}) {
    for (int w : {5, 8, 64}) {
      for (int win : {4, 8, 16}) {
        for (auto dir : {ScanDirection::Horizontal, ScanDirection::Vertical}) {
          const Trajectory t = window_raster(h, w, win, dir);
          CHECK_NOTHROW(validate_trajectory(t));
          CHECK_NOTHROW(validate_trajectory(flip(t)));
        }
      }
      CHECK_NOTHROW(validate_trajectory(raster(h, w, ScanDirection::Vertical)));
    }
  }
}

TEST_CASE("flip reverses and is an involution") {
  const Trajectory t = raster(2, 2, ScanDirection::Horizontal);
  CHECK(flip(t).perm == std::vector<int64_t>{3, 2, 1, 0});
  for (int win : {2, 3, 5}) {
    const Trajectory u = window_raster(6, 7, win, ScanDirection::Vertical);
    CHECK(flip(flip(u)).perm == u.perm);
    CHECK(flip(flip(u)).inv_perm == u.inv_perm);
  }
}

TEST_CASE("gather via flipped trajectory reverses the gathered sequence") {
  Rng rng(7);
  const Trajectory t = window_raster(4, 6, 3, ScanDirection::Horizontal);
  const auto x = rand_tensor<double>({24, 5}, rng);
  const auto fwd = gather_tokens(x, t);
  const auto bwd = gather_tokens(x, flip(t));
  for (int64_t k = 0; k < 24; ++k) {
    for (int64_t d = 0; d < 5; ++d) {
      CHECK(bwd.at({k, d}) == fwd.at({23 - k, d}));
    }
  }
}

TEST_CASE("schedule alternates granularity every two blocks and direction every block") {
  const ScanSchedule s0 = schedule_for_block(0, 8);
  CHECK(s0.granularity == ScanGranularity::Window);
  CHECK(s0.direction == ScanDirection::Horizontal);
  const ScanSchedule s1 = schedule_for_block(1, 8);
  CHECK(s1.granularity == ScanGranularity::Window);
  CHECK(s1.direction == ScanDirection::Vertical);
  const ScanSchedule s2 = schedule_for_block(2, 8);
  CHECK(s2.granularity == ScanGranularity::Sequential);
  CHECK(s2.direction == ScanDirection::Horizontal);
  const ScanSchedule s3 = schedule_for_block(3, 8);
  CHECK(s3.granularity == ScanGranularity::Sequential);
  CHECK(s3.direction == ScanDirection::Vertical);
  for (int k = 0; k < 8; ++k) {
    const ScanSchedule a = schedule_for_block(k, 8);
    const ScanSchedule b = schedule_for_block(k + 4, 8);
    CHECK(a.granularity == b.granularity);
    CHECK(a.direction == b.direction);
  }
}

TEST_CASE("sequential granularity scans the whole grid as one window") {
  ScanSchedule s = schedule_for_block(2, 8);
  CHECK(make_trajectory(s, 16, 16).perm ==
        raster(16, 16, ScanDirection::Horizontal).perm);
}

TEST_CASE("cross-scale interleave on 2x2 follows the aligned order") {
  const CrossScaleLayout l = cross_scale_interleave(2, 2);
  REQUIRE(l.length() == 5);
  CHECK(l.sequence[0].plane == CrossPlane::Down);
  CHECK(l.sequence[0].row == 0);
  CHECK(l.sequence[0].col == 0);
  const std::vector<std::pair<int, int>> orig_order{{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (size_t i = 0; i < 4; ++i) {
    CHECK(l.sequence[i + 1].plane == CrossPlane::Orig);
    CHECK(l.sequence[i + 1].row == orig_order[i].first);
    CHECK(l.sequence[i + 1].col == orig_order[i].second);
  }
}

TEST_CASE("cross-scale layout counting and coverage") {
  for (int n : {4, 8, 64}) {
    const CrossScaleLayout l = cross_scale_interleave(n, n);
    CHECK(l.length() == n * n + (n / 2) * (n / 2));
    int64_t down = 0;
    std::set<std::pair<int, int>> seen_orig, seen_down;
    for (const CrossEntry& e : l.sequence) {
      if (e.plane == CrossPlane::Down) {
        ++down;
        CHECK(seen_down.insert({e.row, e.col}).second);
      } else {
        CHECK(seen_orig.insert({e.row, e.col}).second);
      }
    }
    CHECK(down * 4 == static_cast<int64_t>(seen_orig.size()));
    CHECK(static_cast<int64_t>(seen_orig.size()) == n * n);
  }
  CHECK_THROWS_AS(cross_scale_interleave(3, 4), InvariantError);
  CHECK_THROWS_AS(cross_scale_interleave(4, 7), InvariantError);
}

TEST_CASE("each down token immediately precedes its four aligned children") {
  const CrossScaleLayout l = cross_scale_interleave(8, 6);
  for (size_t s = 0; s < l.sequence.size(); ++s) {
    if (l.sequence[s].plane != CrossPlane::Down) continue;
    const int i = l.sequence[s].row, j = l.sequence[s].col;
    const std::vector<std::pair<int, int>> kids{
        {2 * i, 2 * j}, {2 * i + 1, 2 * j}, {2 * i, 2 * j + 1}, {2 * i + 1, 2 * j + 1}};
    for (size_t k = 0; k < 4; ++k) {
      const CrossEntry& e = l.sequence[s + 1 + k];
      CHECK(e.plane == CrossPlane::Orig);
      CHECK(e.row == kids[k].first);
      CHECK(e.col == kids[k].second);
    }
  }
}

TEST_CASE("orig placement index map matches a hand-built table for 4x4") {
  const CrossScaleLayout l = cross_scale_interleave(4, 4);
  // independent reconstruction of the expected sequence position of each
  // original token: group g = (r/2)*W_half + (c/2); the group occupies 5
  // slots; children are visited column-within-pair (r parity fastest)
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      const int64_t g = (r / 2) * 2 + (c / 2);
      const int64_t within = 1 + 2 * (c % 2) + (r % 2);
      CHECK(l.orig_seq_index[static_cast<size_t>(r * 4 + c)] == 5 * g + within);
    }
  }
}

TEST_CASE("interleave then extract restores the original plane bit-exactly") {
  Rng rng(11);
  for (int n : {4, 8}) {
    const CrossScaleLayout l = cross_scale_interleave(n, n);
    const auto down = rand_tensor<double>({(n / 2) * (n / 2), 3}, rng);
    const auto orig = rand_tensor<double>({n * n, 3}, rng);
    const auto seq = cross_scale_sequence(l, down, orig);
    REQUIRE(seq.dim(0) == l.length());
    const auto back = extract_original(l, seq);
    CHECK(back.dim(0) == n * n);
    CHECK(bit_identical(back, orig));
  }
}
