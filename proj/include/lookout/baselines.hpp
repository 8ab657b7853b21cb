#pragma once

// Non-learned comparison methods: constant velocity, linear extrapolation and
// A* over the static occupancy with linearly extrapolated rotations.

#include <algorithm>
#include <cmath>
#include <vector>

#include "lookout/error.hpp"
#include "lookout/geom.hpp"
#include "lookout/grid.hpp"
#include "lookout/planning.hpp"

namespace lookout::baselines {

/// Last-two-step velocity, applied k times. Rotation steps right-multiply the
/// relative rotation R_{T1-1}^T R_{T1}.
inline std::vector<Pose> const_vel(const std::vector<Pose>& past, std::size_t t2) {
  require(past.size() >= 2, ErrorCode::kTooFewSteps, "const_vel needs at least two past poses");
  const Pose& a = past[past.size() - 2];
  const Pose& b = past.back();
  const Vec3 v = b.t - a.t;
  const Mat3 rb = b.rotation();
  const Eigen::AngleAxisd step(Mat3(a.rotation().transpose() * rb));
  std::vector<Pose> out;
  out.reserve(t2);
  for (std::size_t k = 1; k <= t2; ++k) {
    const double kk = static_cast<double>(k);
    const Mat3 r = rb * Eigen::AngleAxisd(kk * step.angle(), step.axis()).toRotationMatrix();
    out.emplace_back(Vec3(b.t + kk * v), r);
  }
  return out;
}

/// Least-squares line through (x_i, y_i); returns {slope, intercept}.
inline std::pair<double, double> fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorCode::kTooFewSteps, "line fit needs two or more points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  require(sxx > 0, ErrorCode::kTooFewSteps, "line fit needs distinct abscissae");
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

/// Per-coordinate OLS over the step index for translation and raw 6D rotation,
/// extrapolated and re-orthonormalized.
inline std::vector<Pose> lin_ext(const std::vector<Pose>& past, std::size_t t2) {
  require(past.size() >= 2, ErrorCode::kTooFewSteps, "lin_ext needs at least two past poses");
  const std::size_t n = past.size();
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<double>(i);
  std::array<std::pair<double, double>, 9> fit;
  for (std::size_t c = 0; c < 9; ++c) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = past[i].flatten()[c];
    fit[c] = fit_line(x, y);
  }
  std::vector<Pose> out;
  out.reserve(t2);
  for (std::size_t k = 1; k <= t2; ++k) {
    const double at = static_cast<double>(n - 1 + k);
    std::array<double, 9> f;
    for (std::size_t c = 0; c < 9; ++c) f[c] = fit[c].first * at + fit[c].second;
    Pose p = Pose::unflatten(f);
    out.emplace_back(p.t, rot6d_to_matrix(p.r));
  }
  return out;
}

struct PlannerConfig {
  double max_speed = 1.5;         // m/s
  double inflation = 0.15;        // m, minimum horizontal gap kept to occupied cells
  double band_min = 0.1;          // traversable band, meters above ground
  double band_max = 2.2;
  double ground_y = -1.6;         // ground height in the planning frame
  double step_dt = 0.05;          // seconds per predicted step

  void validate() const {
    require(max_speed > 0 && std::isfinite(max_speed), ErrorCode::kConfigInvalid, "max_speed must be positive");
    require(inflation >= 0, ErrorCode::kConfigInvalid, "inflation must be >= 0");
    require(band_max > band_min, ErrorCode::kConfigInvalid, "height band is empty");
    require(step_dt > 0, ErrorCode::kConfigInvalid, "step_dt must be positive");
  }
};

/// Points inside the traversable height band, for building the planning occupancy.
inline std::vector<Vec3> band_points(const std::vector<Vec3>& points, const PlannerConfig& cfg) {
  std::vector<Vec3> out;
  for (const auto& p : points) {
    const double h = p.y() - cfg.ground_y;
    if (h >= cfg.band_min && h <= cfg.band_max) out.push_back(p);
  }
  return out;
}

/// BEV raster (rows = Z, cols = X): a column is occupied if any voxel whose
/// vertical extent meets the band is occupied; cells closer than `inflation`
/// (gap between cell squares) to an occupied column are blocked too.
inline BlockedRaster planning_raster(const OccupancyGrid& occ, const PlannerConfig& cfg) {
  const auto& g = occ.spec;
  BlockedRaster hit(static_cast<int>(g.nz), static_cast<int>(g.nx));
  for (std::size_t iy = 0; iy < g.ny; ++iy) {
    const double lo = g.origin.y() + static_cast<double>(iy) * g.spacing - cfg.ground_y;
    if (lo + g.spacing < cfg.band_min || lo > cfg.band_max) continue;
    for (std::size_t iz = 0; iz < g.nz; ++iz)
      for (std::size_t ix = 0; ix < g.nx; ++ix)
        if (occ.is_occupied(iz, iy, ix)) hit.set({int(iz), int(ix)}, true);
  }
  BlockedRaster out = hit;
  const int reach = static_cast<int>(std::floor(cfg.inflation / g.spacing)) + 1;
  auto gap = [&](int dr, int dc) {
    return g.spacing * std::hypot(double(std::max(std::abs(dr) - 1, 0)), double(std::max(std::abs(dc) - 1, 0)));
  };
  for (int r = 0; r < hit.rows; ++r)
    for (int c = 0; c < hit.cols; ++c) {
      if (!hit.blocked[hit.index({r, c})]) continue;
      for (int dr = -reach; dr <= reach; ++dr)
        for (int dc = -reach; dc <= reach; ++dc) {
          const Cell n{r + dr, c + dc};
          if (out.inside(n) && gap(dr, dc) < cfg.inflation) out.set(n, true);
        }
    }
  return out;
}

inline Cell bev_cell(const VoxelGridSpec& g, const Vec3& p) {
  const auto clampi = [](double v, std::size_t n) {
    return std::clamp(static_cast<int>(std::floor(v)), 0, static_cast<int>(n) - 1);
  };
  return {clampi((p.z() - g.origin.z()) / g.spacing, g.nz), clampi((p.x() - g.origin.x()) / g.spacing, g.nx)};
}

/// True if every raster cell whose closed square meets segment a-b is free
/// (grid-plane coordinates x, z).
inline bool segment_free(const BlockedRaster& raster, const VoxelGridSpec& g, const Eigen::Vector2d& a,
                         const Eigen::Vector2d& b) {
  const Eigen::Vector2d lo = a.cwiseMin(b), hi = a.cwiseMax(b);
  const int c0 = static_cast<int>(std::floor((lo.x() - g.origin.x()) / g.spacing)) - 1;
  const int c1 = static_cast<int>(std::floor((hi.x() - g.origin.x()) / g.spacing)) + 1;
  const int r0 = static_cast<int>(std::floor((lo.y() - g.origin.z()) / g.spacing)) - 1;
  const int r1 = static_cast<int>(std::floor((hi.y() - g.origin.z()) / g.spacing)) + 1;
  const Eigen::Vector2d d = b - a;
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      // Liang-Barsky clip of the segment against the closed cell square.
      const double x0 = g.origin.x() + c * g.spacing, z0 = g.origin.z() + r * g.spacing;
      double t0 = 0, t1 = 1;
      bool hit = true;
      auto clip = [&](double p, double q) {
        if (p == 0) {
          if (q < 0) hit = false;
          return;
        }
        const double t = q / p;
        if (p < 0) t0 = std::max(t0, t);
        else t1 = std::min(t1, t);
      };
      clip(-d.x(), a.x() - x0);
      clip(d.x(), x0 + g.spacing - a.x());
      clip(-d.y(), a.y() - z0);
      clip(d.y(), z0 + g.spacing - a.y());
      if (hit && t0 <= t1 && raster.is_blocked({r, c})) return false;
    }
  return true;
}

/// A* translation from `start` toward `goal` on the planning raster, shortcut
/// where the straight segment stays on free cells, resampled
/// into T2 evenly spaced waypoints (capped at max_speed * step_dt per step);
/// rotations from lin_ext. Heights interpolate start -> goal along the path.
inline std::vector<Pose> astar_lin_ext(const OccupancyGrid& occ, const Vec3& start, const Vec3& goal,
                                       const std::vector<Pose>& past, std::size_t t2, const PlannerConfig& cfg = {}) {
  cfg.validate();
  const auto& g = occ.spec;
  if (g.nz == 0 || g.nx == 0) fail(ErrorCode::kEmptyGrid, "occupancy grid has no cells");
  const BlockedRaster raster = planning_raster(occ, cfg);
  const Cell sc = bev_cell(g, start), gc = bev_cell(g, goal);
  if (raster.is_blocked(sc)) fail(ErrorCode::kStartBlocked, "start cell is blocked after inflation");
  const GridPath path = astar(raster, sc, gc, false);

  auto center = [&](Cell c) {
    return Eigen::Vector2d(g.origin.x() + (c.col + 0.5) * g.spacing, g.origin.z() + (c.row + 0.5) * g.spacing);
  };
  // Goal kept inside its cell so the last leg never leaves the path.
  auto inside_cell = [&](Cell c, const Vec3& p) {
    const Eigen::Vector2d lo(g.origin.x() + c.col * g.spacing, g.origin.z() + c.row * g.spacing);
    return Eigen::Vector2d(std::clamp(p.x(), lo.x(), lo.x() + g.spacing), std::clamp(p.z(), lo.y(), lo.y() + g.spacing));
  };
  std::vector<Eigen::Vector2d> raw{inside_cell(sc, start)};
  for (const Cell& c : path.cells) raw.push_back(center(c));
  if (path.reached_goal) raw.push_back(inside_cell(gc, goal));
  // Greedy line-of-sight shortcutting over the cell path.
  std::vector<Eigen::Vector2d> pts{raw.front()};
  for (std::size_t i = 0; i + 1 < raw.size();) {
    std::size_t j = raw.size() - 1;
    while (j > i + 1 && !segment_free(raster, g, raw[i], raw[j])) --j;
    pts.push_back(raw[j]);
    i = j;
  }
  std::vector<double> arc{0.0};
  for (std::size_t i = 1; i < pts.size(); ++i) arc.push_back(arc.back() + (pts[i] - pts[i - 1]).norm());
  const double length = arc.back();
  const double spacing = std::min(length / static_cast<double>(t2), cfg.max_speed * cfg.step_dt);

  const auto rotations = lin_ext(past, t2);
  std::vector<Pose> out;
  out.reserve(t2);
  std::size_t seg = 1;
  for (std::size_t k = 1; k <= t2; ++k) {
    const double s = std::min(length, spacing * static_cast<double>(k));
    while (seg + 1 < pts.size() && arc[seg] < s) ++seg;
    Eigen::Vector2d q = pts.back();
    if (pts.size() > 1) {
      const double span = arc[seg] - arc[seg - 1];
      const double a = span > 0 ? (s - arc[seg - 1]) / span : 1.0;
      q = pts[seg - 1] + std::clamp(a, 0.0, 1.0) * (pts[seg] - pts[seg - 1]);
    }
    const double frac = length > 0 ? s / length : 1.0;
    const double y = start.y() + frac * (goal.y() - start.y());
    out.emplace_back(Vec3(q.x(), y, q.y()), rotations[k - 1].rotation());
  }
  return out;
}

}  // namespace lookout::baselines
