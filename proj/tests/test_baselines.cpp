#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "lookout/baselines.hpp"
#include "lookout/evalkit.hpp"

using namespace lookout;
using namespace lookout::baselines;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::vector<Pose> yaw_walk(double step_m, double yaw_step, std::size_t n) {
  std::vector<Pose> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double k = static_cast<double>(i) - static_cast<double>(n - 1);
    out.emplace_back(Vec3(0, 0, step_m * k), yaw_rotation(yaw_step * k));
  }
  return out;
}

double path_length(const std::vector<Vec3>& pts) {
  double s = 0;
  for (std::size_t i = 1; i < pts.size(); ++i) s += (pts[i] - pts[i - 1]).norm();
  return s;
}

/// Relaxation to a fixed point over the same move set as the planner.
double shortest_oracle(const BlockedRaster& g, Cell s, Cell t) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(g.blocked.size(), inf);
  d[g.index(s)] = 0;
  for (bool changed = true; changed;) {
    changed = false;
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c) {
        if (g.is_blocked({r, c}) || d[g.index({r, c})] == inf) continue;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const Cell n{r + dr, c + dc};
            if ((!dr && !dc) || g.is_blocked(n)) continue;
            if (dr && dc && (g.is_blocked({r + dr, c}) || g.is_blocked({r, c + dc}))) continue;
            const double w = d[g.index({r, c})] + ((dr && dc) ? std::sqrt(2.0) : 1.0);
            if (w < d[g.index(n)] - 1e-12) d[g.index(n)] = w, changed = true;
          }
      }
  }
  return d[g.index(t)];
}

OccupancyGrid empty_occupancy(const VoxelGridSpec& spec) { return build_occupancy({}, spec); }

}  // namespace

TEST(ConstVel, StationaryInputStaysPut) {
  const std::vector<Pose> past(8, Pose(Vec3(0.3, -0.1, 0.2), yaw_rotation(0.4)));
  for (const auto& p : const_vel(past, 8)) {
    EXPECT_LT((p.t - past.back().t).norm(), 1e-12);
    EXPECT_LT((p.rotation() - past.back().rotation()).norm(), 1e-12);
  }
}

TEST(ConstVel, ConstantVelocityAndYawRate) {
  const auto past = yaw_walk(0.1, 0.0, 8);
  const auto pred = const_vel(past, 8);
  for (std::size_t k = 1; k <= 8; ++k) EXPECT_NEAR(pred[k - 1].t.z(), 0.1 * k, 1e-12);
  const auto turning = yaw_walk(0.0, 5 * kDeg, 8);
  const auto out = const_vel(turning, 8);
  for (std::size_t k = 1; k <= 8; ++k) EXPECT_NEAR(heading_of(out[k - 1].rotation()), 5 * kDeg * k, 1e-5);
  EXPECT_THROW(const_vel({Pose()}, 8), Error);
}

TEST(LinExt, LinesAreContinuedExactly) {
  const auto [slope, icpt] = fit_line({0, 1}, {1, 3});
  EXPECT_DOUBLE_EQ(slope * 3 + icpt, 7.0);
  std::vector<Pose> past;
  for (int i = 0; i < 8; ++i) past.emplace_back(Vec3(0.05 * i, 1.0 - 0.01 * i, 0.2 * i), yaw_rotation(0.3));
  const auto pred = lin_ext(past, 8);
  for (int k = 1; k <= 8; ++k) {
    EXPECT_LT((pred[k - 1].t - Vec3(0.05 * (7 + k), 1.0 - 0.01 * (7 + k), 0.2 * (7 + k))).norm(), 1e-6);
    EXPECT_LT((pred[k - 1].rotation() - yaw_rotation(0.3)).norm(), 1e-6);
  }
  EXPECT_THROW(lin_ext({Pose()}, 8), Error);
}

TEST(LinExt, RegressionAveragesNoise) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0.0, 0.05);
  double var = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    std::vector<Pose> past;
    for (int i = 0; i < 8; ++i) past.emplace_back(Vec3(noise(rng), 0, 0), Mat3::Identity());
    // Interpolation at the window center is the mean; predict one step inside.
    const auto [slope, icpt] = [&] {
      std::vector<double> x, y;
      for (int i = 0; i < 8; ++i) x.push_back(i), y.push_back(past[i].t.x());
      return fit_line(x, y);
    }();
    const double mid = slope * 3.5 + icpt;
    var += mid * mid;
  }
  var /= trials;
  EXPECT_LT(var, 0.05 * 0.05);
}

TEST(AStar, FreeSpaceIsAStraightCappedLine) {
  const auto spec = VoxelGridSpec::tiny();
  const std::vector<Pose> past(8, Pose());
  const auto out = astar_lin_ext(empty_occupancy(spec), Vec3(0.1, 0, 0.1), Vec3(0.1, 0, 0.6), past, 8);
  ASSERT_EQ(out.size(), 8u);
  Vec3 prev(0.1, 0, 0.1);
  for (const auto& p : out) {
    EXPECT_NEAR(p.t.x(), 0.1, 1e-9);
    EXPECT_LE((p.t - prev).norm(), 1.5 * 0.05 + 1e-9);
    prev = p.t;
  }
  EXPECT_NEAR(out.back().t.z(), 0.6, 1e-9);
}

TEST(AStar, CenterWallMatchesShortestPathOracle) {
  BlockedRaster g(5, 5);
  for (int r = 0; r < 4; ++r) g.set({r, 2}, true);
  const double oracle = shortest_oracle(g, {0, 0}, {0, 4});
  const GridPath p = astar(g, {0, 0}, {0, 4}, false);
  ASSERT_TRUE(p.reached_goal);
  EXPECT_NEAR(p.cost, oracle, 1e-12);
  double walked = 0;
  for (std::size_t i = 1; i < p.cells.size(); ++i)
    walked += std::hypot(double(p.cells[i].row - p.cells[i - 1].row), double(p.cells[i].col - p.cells[i - 1].col));
  EXPECT_NEAR(walked, oracle, 1e-12);

  // Same wall through the planner on a 5 x 5 occupancy with 1 m cells.
  VoxelGridSpec spec{5, 2, 5, 1.0, Vec3(-2.5, -1.6, -2.5)};
  std::vector<Vec3> pts;
  for (int r = 0; r < 4; ++r) pts.emplace_back(0.0, -0.6, -2.0 + r);
  PlannerConfig cfg;
  cfg.inflation = 0.0;
  cfg.max_speed = 100.0;
  const auto out = astar_lin_ext(build_occupancy(pts, spec), Vec3(-2, 0, -2), Vec3(2, 0, -2), std::vector<Pose>(8, Pose()), 8, cfg);
  std::vector<Vec3> line{Vec3(-2, 0, -2)};
  for (const auto& q : out) line.push_back(q.t);
  // Shortcutting only removes detours: between the straight line and the cell path.
  EXPECT_LE(path_length(line), oracle + 1e-9);
  EXPECT_GT(path_length(line), 4.0 + 1e-6);
  for (const auto& q : out) EXPECT_FALSE(planning_raster(build_occupancy(pts, spec), cfg).is_blocked(bev_cell(spec, q.t)));
}

TEST(AStar, UnreachableGoalFallsBackToNearestFreeCell) {
  VoxelGridSpec spec{9, 2, 9, 1.0, Vec3(-4.5, -1.6, -4.5)};
  std::vector<Vec3> pts;
  // Ring of occupied cells around (row 6, col 6).
  for (int dr = -1; dr <= 1; ++dr)
    for (int dc = -1; dc <= 1; ++dc)
      if (dr || dc) pts.emplace_back(-4.0 + 6 + dc, -0.6, -4.0 + 6 + dr);
  PlannerConfig cfg;
  cfg.inflation = 0.0;
  cfg.max_speed = 100.0;
  const Vec3 goal(-4.0 + 6, 0, -4.0 + 6);
  const auto out = astar_lin_ext(build_occupancy(pts, spec), Vec3(-4, 0, -4), goal, std::vector<Pose>(8, Pose()), 8, cfg);
  const Cell end = bev_cell(spec, out.back().t);
  // Free cells nearest to (6, 6) are at distance 2 (e.g. (4, 6)); this one is first in scan order.
  EXPECT_EQ(std::hypot(end.row - 6.0, end.col - 6.0), 2.0);
  EXPECT_EQ(end, (Cell{4, 6}));
  EXPECT_NEAR(out.back().t.x(), -4.0 + 6, 1e-9);
  EXPECT_NEAR(out.back().t.z(), -4.0 + 4, 1e-9);
}

TEST(AStar, BlockedStartThrows) {
  VoxelGridSpec spec{6, 2, 6, 1.0, Vec3(-3, -1.6, -3)};
  PlannerConfig cfg;
  cfg.inflation = 0.0;
  const auto occ = build_occupancy({Vec3(0.5, -0.6, 0.5)}, spec);
  try {
    astar_lin_ext(occ, Vec3(0.5, 0, 0.5), Vec3(2, 0, 2), std::vector<Pose>(8, Pose()), 8, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kStartBlocked);
  }
  cfg.max_speed = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(AStar, InflationGapAndSpeedBoundOnRandomClouds) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> ux(-4.0, 4.0), uz(-1.3, 6.7), uy(-1.5, 0.5);
  const auto spec = VoxelGridSpec::tiny();
  PlannerConfig cfg;
  cfg.inflation = 0.35;
  cfg.step_dt = 0.3;
  int planned = 0;
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<Vec3> pts;
    for (int b = 0; b < 6; ++b) {
      const Vec3 c(ux(rng), 0, uz(rng));
      for (int i = 0; i < 60; ++i) pts.emplace_back(c.x() + 0.3 * ux(rng) / 4, uy(rng), c.z() + 0.3 * ux(rng) / 4);
    }
    const auto band = band_points(pts, cfg);
    const auto occ = build_occupancy(band, spec);
    const auto raster = planning_raster(occ, cfg);
    try {
      const auto out = astar_lin_ext(occ, Vec3(0.01, 0, 0.01), Vec3(ux(rng), 0.1, uz(rng)), std::vector<Pose>(8, Pose()), 8, cfg);
      ++planned;
      Vec3 prev(0.01, 0, 0.01);
      for (const auto& p : out) {
        EXPECT_FALSE(raster.is_blocked(bev_cell(spec, p.t)));
        EXPECT_LE((p.t - prev).norm(), cfg.max_speed * cfg.step_dt + 0.11);
        const Vec3 flat = Vec3(p.t.x(), 0, p.t.z()) - Vec3(prev.x(), 0, prev.z());
        EXPECT_LE(flat.norm(), cfg.max_speed * cfg.step_dt + 1e-9);
        prev = p.t;
      }
      std::vector<std::vector<Vec3>> pos{{}};
      for (const auto& p : out) pos[0].push_back(p.t);
      if (!band.empty()) {
        EXPECT_EQ(evalkit::col_static(pos, band, 25), 100.0);
        EXPECT_EQ(evalkit::col_static(pos, band, 35), 100.0);
      }
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kStartBlocked);
    }
  }
  EXPECT_GT(planned, 20);
}
