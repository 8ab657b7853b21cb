#pragma once

// Synthetic navigation scenes: static geometry sampled into a labeled point
// cloud, walking agents, ego head trajectories with information-gathering
// scans, a feature renderer standing in for a frozen image encoder, and the
// sliding-window clip segmentation used for training and evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "lookout/error.hpp"
#include "lookout/geom.hpp"
#include "lookout/planning.hpp"
#include "lookout/tensor.hpp"

namespace lookout::datasim {

using Vec2 = Eigen::Vector2d;  // ground-plane (x, z)

enum Label : int { kGround = 0, kBox = 1, kPole = 2, kCrosswalk = 3, kNumLabels = 4 };

inline constexpr double kAgentHeight = 1.7;
inline constexpr double kMinClearance = 0.35;

struct Obstacle {
  enum class Kind { kBox, kCylinder } kind = Kind::kBox;
  Vec2 center = Vec2::Zero();
  double yaw = 0.0;                   // box orientation about Y
  Vec2 half_extent = Vec2::Zero();    // box half sizes along its local x, z
  double radius = 0.0;                // cylinder radius
  double height = 1.0;

  /// Signed horizontal distance from `p` to the footprint (negative inside).
  double footprint_distance(const Vec2& p) const {
    const Vec2 d = p - center;
    if (kind == Kind::kCylinder) return d.norm() - radius;
    const double c = std::cos(yaw), s = std::sin(yaw);
    const Vec2 local(c * d.x() + s * d.y(), -s * d.x() + c * d.y());
    const Vec2 q = local.cwiseAbs() - half_extent;
    const double outside = q.cwiseMax(0.0).norm();
    return outside > 0 ? outside : std::max(q.x(), q.y());
  }
};

/// Strip of road spanning the scene in X, centered at `z`, `width` meters deep.
struct CrossingZone {
  double z = 0.0;
  double width = 2.0;
  bool contains(const Vec2& p) const { return std::abs(p.y() - z) <= 0.5 * width; }
};

struct AgentTrack {
  std::vector<Vec2> positions;  // one per 20 Hz frame
  std::vector<double> headings;
  double radius = 0.3;
  double speed = 1.2;

  std::size_t size() const { return positions.size(); }
  /// Position at frame `i`, holding the last sample past the end.
  Vec2 at(std::size_t i) const { return positions[std::min(i, positions.size() - 1)]; }
};

struct Scene {
  std::vector<Vec3> static_points;
  std::vector<int> labels;
  std::vector<Obstacle> obstacles;
  std::vector<CrossingZone> crossings;
  std::vector<AgentTrack> agents;
  double ground_height = 0.0;
  double extent = 20.0;
  std::uint64_t seed = 0;

  double static_clearance(const Vec2& p) const {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& o : obstacles) d = std::min(d, o.footprint_distance(p));
    return d;
  }
  /// Minimum surface distance from `p` to agent bodies at frame `i`.
  double agent_clearance(const Vec2& p, std::size_t frame) const {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& a : agents) d = std::min(d, (a.at(frame) - p).norm() - a.radius);
    return d;
  }
};

struct SceneConfig {
  int n_static_obstacles = 12;
  int n_agents = 4;
  double extent_m = 16.0;
  int n_crossings = 1;
  double point_density = 220.0;  // points per square meter on surfaces
  bool ground_points = true;
  double duration_s = 60.0;      // length of the agent tracks
  double agent_speed_min = 0.8;
  double agent_speed_max = 1.6;
};

namespace detail {

inline constexpr double kSpawnMargin = 1.5;

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline void sample_rect(std::vector<Vec3>& pts, std::vector<int>& labels, const Vec3& origin, const Vec3& u,
                        const Vec3& v, double spacing, int label) {
  const double lu = u.norm(), lv = v.norm();
  const int nu = std::max(1, static_cast<int>(std::ceil(lu / spacing)));
  const int nv = std::max(1, static_cast<int>(std::ceil(lv / spacing)));
  for (int i = 0; i <= nu; ++i)
    for (int j = 0; j <= nv; ++j) {
      pts.push_back(origin + u * (double(i) / nu) + v * (double(j) / nv));
      labels.push_back(label);
    }
}

inline void sample_obstacle(const Obstacle& o, double ground, double spacing, std::vector<Vec3>& pts,
                            std::vector<int>& labels) {
  if (o.kind == Obstacle::Kind::kCylinder) {
    const double circ = 2 * std::numbers::pi * o.radius;
    const int na = std::max(8, static_cast<int>(std::ceil(circ / spacing)));
    const int nh = std::max(1, static_cast<int>(std::ceil(o.height / spacing)));
    for (int a = 0; a < na; ++a) {
      const double th = 2 * std::numbers::pi * a / na;
      for (int h = 0; h <= nh; ++h) {
        pts.emplace_back(o.center.x() + o.radius * std::cos(th), ground + o.height * h / nh,
                         o.center.y() + o.radius * std::sin(th));
        labels.push_back(kPole);
      }
    }
    const int nr = std::max(1, static_cast<int>(std::ceil(o.radius / spacing)));
    for (int r = 1; r <= nr; ++r) {
      const double rr = o.radius * r / nr;
      const int nt = std::max(4, static_cast<int>(std::ceil(2 * std::numbers::pi * rr / spacing)));
      for (int a = 0; a < nt; ++a) {
        const double th = 2 * std::numbers::pi * a / nt;
        pts.emplace_back(o.center.x() + rr * std::cos(th), ground + o.height, o.center.y() + rr * std::sin(th));
        labels.push_back(kPole);
      }
    }
    return;
  }
  const double c = std::cos(o.yaw), s = std::sin(o.yaw);
  const Vec3 ax(c * o.half_extent.x(), 0, s * o.half_extent.x());     // local x in world
  const Vec3 az(-s * o.half_extent.y(), 0, c * o.half_extent.y());    // local z in world
  const Vec3 base(o.center.x(), ground, o.center.y());
  const Vec3 up(0, o.height, 0);
  sample_rect(pts, labels, base - ax - az, 2 * ax, up, spacing, kBox);
  sample_rect(pts, labels, base - ax + az, 2 * ax, up, spacing, kBox);
  sample_rect(pts, labels, base - ax - az, 2 * az, up, spacing, kBox);
  sample_rect(pts, labels, base + ax - az, 2 * az, up, spacing, kBox);
  sample_rect(pts, labels, base - ax - az + up, 2 * ax, 2 * az, spacing, kBox);
}

/// Piecewise-linear walk through `waypoints` (looping back and forth) at `speed`.
inline AgentTrack walk_waypoints(const std::vector<Vec2>& waypoints, double speed, double radius, std::size_t frames) {
  AgentTrack t;
  t.radius = radius;
  t.speed = speed;
  std::vector<Vec2> loop = waypoints;
  for (auto it = waypoints.rbegin() + 1; it != waypoints.rend(); ++it) loop.push_back(*it);
  std::vector<double> cum{0.0};
  for (std::size_t i = 1; i < loop.size(); ++i) cum.push_back(cum.back() + (loop[i] - loop[i - 1]).norm());
  const double total = cum.back();
  for (std::size_t f = 0; f < frames; ++f) {
    double s = total > 0 ? std::fmod(speed * kFramePeriod * static_cast<double>(f), total) : 0.0;
    std::size_t seg = 1;
    while (seg + 1 < cum.size() && cum[seg] < s) ++seg;
    const double len = cum[seg] - cum[seg - 1];
    const double a = len > 0 ? (s - cum[seg - 1]) / len : 0.0;
    const Vec2 dir = len > 0 ? Vec2((loop[seg] - loop[seg - 1]) / len) : Vec2(0, 1);
    t.positions.push_back(loop[seg - 1] + a * (loop[seg] - loop[seg - 1]));
    t.headings.push_back(std::atan2(-dir.x(), dir.y()));
  }
  return t;
}

}  // namespace detail

/// Ego spawn and goal used by `gen_ego_trajectory` for a scene.
inline Vec2 ego_spawn(const Scene& s) { return {0.0, -0.5 * s.extent + detail::kSpawnMargin}; }
inline Vec2 ego_goal(const Scene& s) { return {0.0, 0.5 * s.extent - detail::kSpawnMargin}; }

inline Scene gen_scene(std::uint64_t seed, const SceneConfig& cfg) {
  require(cfg.extent_m >= 10.0, ErrorCode::kConfigInvalid, "scene extent must be >= 10 m");
  require(cfg.n_static_obstacles >= 0 && cfg.n_agents >= 0 && cfg.n_crossings >= 0, ErrorCode::kConfigInvalid,
          "scene counts must be >= 0");
  require(cfg.point_density >= 200.0, ErrorCode::kConfigInvalid, "point density must be >= 200 points/m^2");
  require(cfg.agent_speed_min > 0 && cfg.agent_speed_max >= cfg.agent_speed_min, ErrorCode::kConfigInvalid,
          "agent speed range invalid");
  std::mt19937_64 rng(seed);
  Scene scene;
  scene.seed = seed;
  scene.extent = cfg.extent_m;
  const double half = 0.5 * cfg.extent_m;
  const double spacing = 1.0 / std::sqrt(cfg.point_density);

  // Crossing zones across the ego route, away from spawn and goal.
  for (int i = 0; i < cfg.n_crossings; ++i) {
    const double lo = -half + 4.0, hi = half - 3.0;
    const double z = lo + (hi - lo) * (i + detail::uniform(rng, 0.2, 0.8)) / cfg.n_crossings;
    scene.crossings.push_back({z, detail::uniform(rng, 1.6, 2.4)});
  }

  const Vec2 spawn = ego_spawn(scene), goal = ego_goal(scene);
  auto in_crossing = [&](const Vec2& p, double pad) {
    for (const auto& c : scene.crossings)
      if (std::abs(p.y() - c.z) <= 0.5 * c.width + pad) return true;
    return false;
  };
  for (int i = 0; i < cfg.n_static_obstacles; ++i) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      Obstacle o;
      if (detail::uniform(rng, 0, 1) < 0.65) {
        o.kind = Obstacle::Kind::kBox;
        o.half_extent = Vec2(detail::uniform(rng, 0.25, 1.0), detail::uniform(rng, 0.25, 1.0));
        o.yaw = detail::uniform(rng, -std::numbers::pi, std::numbers::pi);
        o.height = detail::uniform(rng, 0.8, 2.5);
      } else {
        o.kind = Obstacle::Kind::kCylinder;
        o.radius = detail::uniform(rng, 0.1, 0.4);
        o.height = detail::uniform(rng, 1.0, 3.0);
      }
      o.center = Vec2(detail::uniform(rng, -half + 1.0, half - 1.0), detail::uniform(rng, -half + 1.0, half - 1.0));
      const double reach = o.kind == Obstacle::Kind::kBox ? o.half_extent.norm() : o.radius;
      if (in_crossing(o.center, reach + 0.3)) continue;
      if (o.footprint_distance(spawn) < 1.5 || o.footprint_distance(goal) < 1.5) continue;
      bool overlaps = false;
      for (const auto& other : scene.obstacles) {
        const double r2 = other.kind == Obstacle::Kind::kBox ? other.half_extent.norm() : other.radius;
        if ((other.center - o.center).norm() < reach + r2 + 0.9) overlaps = true;
      }
      if (overlaps) continue;
      scene.obstacles.push_back(o);
      break;
    }
  }
  for (const auto& o : scene.obstacles) detail::sample_obstacle(o, scene.ground_height, spacing, scene.static_points, scene.labels);

  if (cfg.ground_points) {
    const double gs = 1.0 / std::sqrt(200.0);  // ground needs only the minimum density
    const int n = static_cast<int>(std::floor(cfg.extent_m / gs));
    for (int i = 0; i <= n; ++i)
      for (int j = 0; j <= n; ++j) {
        const Vec2 p(-half + i * gs, -half + j * gs);
        if (scene.static_clearance(p) < 0) continue;
        scene.static_points.emplace_back(p.x(), scene.ground_height, p.y());
        bool stripe = false;
        for (const auto& c : scene.crossings)
          if (c.contains(p) && std::fmod(p.x() + half, 1.0) < 0.5) stripe = true;
        scene.labels.push_back(stripe ? kCrosswalk : kGround);
      }
  }

  const auto frames = static_cast<std::size_t>(std::llround(cfg.duration_s * kFrameRate));
  for (int i = 0; i < cfg.n_agents; ++i) {
    const double speed = detail::uniform(rng, cfg.agent_speed_min, cfg.agent_speed_max);
    const double radius = detail::uniform(rng, 0.25, 0.32);
    std::vector<Vec2> wps;
    if (!scene.crossings.empty() && i % 2 == 0) {
      // Crossers walk along a road strip.
      const auto& c = scene.crossings[static_cast<std::size_t>(i / 2) % scene.crossings.size()];
      const double z = c.z + detail::uniform(rng, -0.3, 0.3) * c.width;
      const bool leftwards = detail::uniform(rng, 0, 1) < 0.5;
      const double x0 = detail::uniform(rng, -half + 0.5, half - 0.5);
      wps = {Vec2(x0, z), Vec2(leftwards ? -half + 0.5 : half - 0.5, z), Vec2(leftwards ? half - 0.5 : -half + 0.5, z)};
    } else {
      // Wanderers visit random free waypoints; segments avoid obstacle footprints.
      Vec2 cur;
      do {
        cur = Vec2(detail::uniform(rng, -half + 1, half - 1), detail::uniform(rng, -half + 1, half - 1));
      } while (scene.static_clearance(cur) < 0.6 || (cur - spawn).norm() < 3.0);
      wps.push_back(cur);
      for (int k = 0; k < 5; ++k) {
        for (int attempt = 0; attempt < 100; ++attempt) {
          const Vec2 nxt(detail::uniform(rng, -half + 1, half - 1), detail::uniform(rng, -half + 1, half - 1));
          bool ok = true;
          for (int q = 0; q <= 40 && ok; ++q)
            ok = scene.static_clearance(cur + (nxt - cur) * (q / 40.0)) >= radius + 0.1;
          if (!ok) continue;
          wps.push_back(nxt);
          cur = nxt;
          break;
        }
      }
    }
    scene.agents.push_back(detail::walk_waypoints(wps, speed, radius, frames));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Ego trajectory.

struct EgoConfig {
  double speed_min = 1.1;          // nominal walking speed range, m/s
  double speed_max = 1.35;
  double accel = 1.2;              // m/s^2
  double decel = 2.0;
  double block_distance = 1.5;     // wait when an agent blocks the path this close
  double scan_slow_speed = 0.5;
  double planner_cell = 0.2;
  double planner_inflation = 0.6;  // >= kMinClearance plus room for dodging
  double height_min = 1.5;
  double height_max = 1.8;
  double bob_amplitude = 0.015;
  double pitch_down_deg = 12.0;
  double max_duration_s = 40.0;
  bool scans = true;
};

namespace detail {

struct Polyline {
  std::vector<Vec2> pts;
  std::vector<double> cum;

  double length() const { return cum.empty() ? 0.0 : cum.back(); }
  void finish() {
    cum.assign(1, 0.0);
    for (std::size_t i = 1; i < pts.size(); ++i) cum.push_back(cum.back() + (pts[i] - pts[i - 1]).norm());
  }
  Vec2 at(double s) const {
    if (pts.size() == 1) return pts[0];
    s = std::clamp(s, 0.0, length());
    std::size_t i = 1;
    while (i + 1 < cum.size() && cum[i] < s) ++i;
    const double len = cum[i] - cum[i - 1];
    return len > 0 ? Vec2(pts[i - 1] + (pts[i] - pts[i - 1]) * ((s - cum[i - 1]) / len)) : pts[i];
  }
  Vec2 tangent(double s) const {
    if (pts.size() < 2) return Vec2(0, 1);
    const Vec2 a = at(std::max(0.0, s - 0.3)), b = at(std::min(length(), s + 0.3));
    const Vec2 d = b - a;
    return d.norm() > 1e-9 ? Vec2(d.normalized()) : Vec2(0, 1);
  }
};

inline Polyline plan_route(const Scene& scene, const Vec2& start, const Vec2& goal, const EgoConfig& cfg) {
  const double half = 0.5 * scene.extent;
  const int n = static_cast<int>(std::ceil(scene.extent / cfg.planner_cell));
  BlockedRaster grid(n, n);
  auto center = [&](Cell c) { return Vec2(-half + (c.col + 0.5) * cfg.planner_cell, -half + (c.row + 0.5) * cfg.planner_cell); };
  auto cell_of = [&](const Vec2& p) {
    return Cell{std::clamp(static_cast<int>(std::floor((p.y() + half) / cfg.planner_cell)), 0, n - 1),
                std::clamp(static_cast<int>(std::floor((p.x() + half) / cfg.planner_cell)), 0, n - 1)};
  };
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) grid.set({r, c}, scene.static_clearance(center({r, c})) < cfg.planner_inflation);
  const Cell sc = cell_of(start), gc = cell_of(goal);
  if (grid.is_blocked(sc) || grid.is_blocked(gc)) fail(ErrorCode::kNoFreePath, "spawn or goal lacks free space");
  const GridPath path = astar(grid, sc, gc);
  if (!path.reached_goal) fail(ErrorCode::kNoFreePath, "planner cannot reach the goal");
  std::vector<Vec2> raw{start};
  for (std::size_t i = 1; i + 1 < path.cells.size(); ++i) raw.push_back(center(path.cells[i]));
  raw.push_back(goal);
  // Line-of-sight shortcutting keeps the same inflation guarantee.
  auto visible = [&](const Vec2& a, const Vec2& b) {
    const int steps = std::max(2, static_cast<int>(std::ceil((b - a).norm() / 0.05)));
    for (int q = 0; q <= steps; ++q)
      if (scene.static_clearance(a + (b - a) * (double(q) / steps)) < cfg.planner_inflation - 0.5 * cfg.planner_cell)
        return false;
    return true;
  };
  Polyline line;
  line.pts.push_back(raw.front());
  std::size_t i = 0;
  while (i + 1 < raw.size()) {
    std::size_t j = raw.size() - 1;
    while (j > i + 1 && !visible(raw[i], raw[j])) --j;
    line.pts.push_back(raw[j]);
    i = j;
  }
  line.finish();
  return line;
}

/// Smooth zero-mean noise: sum of two sinusoids with random phase.
struct Wobble {
  double a1, f1, p1, a2, f2, p2;
  Wobble(std::mt19937_64& rng, double amp, double freq)
      : a1(amp * uniform(rng, 0.5, 1.0)), f1(freq * uniform(rng, 0.7, 1.3)), p1(uniform(rng, 0, 6.3)),
        a2(amp * uniform(rng, 0.2, 0.5)), f2(freq * uniform(rng, 1.7, 2.9)), p2(uniform(rng, 0, 6.3)) {}
  double operator()(double t) const {
    return a1 * std::sin(2 * std::numbers::pi * f1 * t + p1) + a2 * std::sin(2 * std::numbers::pi * f2 * t + p2);
  }
};

struct Scan {
  double start = 0, duration = 0, amplitude = 0;  // amplitude signed, radians
  double offset(double t) const {
    if (t < start || t > start + duration) return 0.0;
    return amplitude * std::sin(std::numbers::pi * (t - start) / duration);
  }
};

}  // namespace detail

/// Head heading for ground direction `d` = (x, z) under the frame yaw convention.
inline double heading_of_direction(const Vec2& d) { return std::atan2(-d.x(), d.y()); }

inline Mat3 head_rotation(double yaw, double pitch_down, double roll) {
  return yaw_rotation(yaw) * rotation_about(Vec3::UnitX(), pitch_down) * rotation_about(Vec3::UnitZ(), roll);
}

inline Trajectory gen_ego_trajectory(const Scene& scene, std::uint64_t seed, const EgoConfig& cfg = {}) {
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
  const Vec2 start = ego_spawn(scene), goal = ego_goal(scene);
  if (scene.static_clearance(start) < 1.0) fail(ErrorCode::kNoFreePath, "spawn has less than 1 m free space");
  const detail::Polyline route = detail::plan_route(scene, start, goal, cfg);

  const double v_nom = detail::uniform(rng, cfg.speed_min, cfg.speed_max);
  const double head_h = detail::uniform(rng, cfg.height_min, cfg.height_max);
  const double pitch0 = cfg.pitch_down_deg * std::numbers::pi / 180.0 + detail::uniform(rng, -0.05, 0.05);
  const detail::Wobble yaw_noise(rng, 0.04, 0.25), pitch_noise(rng, 0.03, 0.3), roll_noise(rng, 0.02, 0.35);
  const double bob_phase = detail::uniform(rng, 0, 6.3);

  // Arc length at which the route enters each crossing zone.
  std::vector<double> entries;
  for (const auto& c : scene.crossings) {
    for (double s = 0; s < route.length(); s += 0.05)
      if (c.contains(route.at(s))) {
        entries.push_back(s);
        break;
      }
  }
  std::vector<bool> scanned(entries.size(), false);
  std::vector<detail::Scan> scans;

  const auto max_frames = static_cast<std::size_t>(cfg.max_duration_s * kFrameRate);
  double s = 0, v = 0, lateral = 0, yaw_walk = heading_of_direction(route.tangent(0));
  double bob_time = 0;
  Trajectory traj;
  for (std::size_t f = 0; f < max_frames; ++f) {
    const double t = static_cast<double>(f) * kFramePeriod;
    const Vec2 tan = route.tangent(s);
    const Vec2 normal(tan.y(), -tan.x());
    const Vec2 pos = route.at(s) + lateral * normal;

    // Head pose for this frame.
    yaw_walk += 0.25 * std::remainder(heading_of_direction(tan) - yaw_walk, 2 * std::numbers::pi);
    double scan = 0;
    for (const auto& sc : scans) scan += sc.offset(t);
    const double yaw = yaw_walk + scan + yaw_noise(t);
    const double speed_ratio = std::min(1.0, v / 1.2);
    bob_time += kFramePeriod * (0.4 + 0.6 * speed_ratio);
    const double bob = cfg.bob_amplitude * speed_ratio * std::sin(2 * std::numbers::pi * 1.8 * bob_time + bob_phase);
    const Vec3 head(pos.x(), scene.ground_height + head_h + bob, pos.y());
    traj.push_back(t, Pose(head, head_rotation(yaw, pitch0 + pitch_noise(t), roll_noise(t))));
    if (s >= route.length() - 1e-6) break;

    // Speed target: nominal, slowed while scanning, zero when an agent blocks.
    double target = v_nom;
    bool scanning = false;
    for (const auto& sc : scans)
      if (t >= sc.start - 0.2 && t <= sc.start + sc.duration) scanning = true;
    for (std::size_t z = 0; z < entries.size(); ++z) {
      if (!cfg.scans || scanned[z]) continue;
      if (s >= entries[z] - 2.5 && s < entries[z]) {
        scanned[z] = true;
        const double side = detail::uniform(rng, 0, 1) < 0.5 ? 1.0 : -1.0;
        const double amp1 = detail::uniform(rng, 45.0, 80.0) * std::numbers::pi / 180.0;
        const double amp2 = detail::uniform(rng, 45.0, 80.0) * std::numbers::pi / 180.0;
        const double d1 = detail::uniform(rng, 0.5, 1.0), d2 = detail::uniform(rng, 0.5, 1.0);
        scans.push_back({t + 0.1, d1, side * amp1});
        scans.push_back({t + 0.1 + d1 + 0.1, d2, -side * amp2});
        scanning = true;
      }
    }
    if (scanning) target = std::min(target, cfg.scan_slow_speed);
    for (std::size_t ai = 0; ai < scene.agents.size(); ++ai) {
      const auto& a = scene.agents[ai];
      const Vec2 rel = a.at(f) - pos;
      const double ahead = rel.dot(tan);
      const double side = std::abs(rel.dot(normal));
      const double surface = rel.norm() - a.radius;
      const bool in_front = ahead > -0.2;
      if (in_front && surface < cfg.block_distance && side < a.radius + 0.9) target = 0.0;
      // Waiting at a crossing for an approaching agent inside the road.
      for (std::size_t z = 0; z < entries.size(); ++z) {
        const bool near_entry = s > entries[z] - 0.8 && s < entries[z] + 0.2;
        if (!near_entry || !scene.crossings[z].contains(a.at(f))) continue;
        const Vec2 vel = a.at(f + 1) - a.at(f);
        const bool approaching = vel.dot(-rel) > 0;
        if (approaching && std::abs(rel.x()) < 4.0) target = 0.0;
      }
    }
    const double dv = std::clamp(target - v, -cfg.decel * kFramePeriod, cfg.accel * kFramePeriod);
    double v_next = v + dv;

    // Advance with clearance checks against agents at the next frame; dodge sideways if needed.
    auto clearance_ok = [&](double s_next, double lat_next) {
      const Vec2 tn = route.tangent(s_next);
      const Vec2 p = route.at(s_next) + lat_next * Vec2(tn.y(), -tn.x());
      return scene.agent_clearance(p, f + 1) >= kMinClearance + 0.05 &&
             scene.static_clearance(p) >= kMinClearance + 0.05;
    };
    const double lat_relax = lateral - std::clamp(lateral, -0.02, 0.02);
    struct Move {
      double ds, lat;
    };
    const double step = v_next * kFramePeriod;
    const Move candidates[] = {{step, lat_relax},
                               {0.5 * step, lat_relax},
                               {0.0, lateral},
                               {0.0, lateral + 0.05},
                               {0.0, lateral - 0.05},
                               {-0.04, lateral},
                               {-0.04, lateral + 0.04},
                               {-0.04, lateral - 0.04}};
    bool moved = false;
    for (const auto& m : candidates) {
      const double sn = std::clamp(s + m.ds, 0.0, route.length());
      if (std::abs(m.lat) > 0.6) continue;
      if (!clearance_ok(sn, m.lat)) continue;
      if (m.ds < step) v_next = std::max(0.0, m.ds) / kFramePeriod;
      s = sn;
      lateral = m.lat;
      moved = true;
      break;
    }
    if (!moved) fail(ErrorCode::kNoFreePath, "ego cannot keep clearance from agents");
    v = v_next;
  }
  return traj;
}

struct EgoClearance {
  double static_m = std::numeric_limits<double>::infinity();
  double dynamic_m = std::numeric_limits<double>::infinity();
  bool ok() const { return static_m >= kMinClearance && dynamic_m >= kMinClearance; }
};

/// Minimum horizontal clearance of an ego walk to obstacle footprints and agent bodies.
inline EgoClearance ego_clearance(const Scene& scene, const Trajectory& ego) {
  EgoClearance c;
  for (std::size_t f = 0; f < ego.size(); ++f) {
    const Vec2 p(ego.poses[f].t.x(), ego.poses[f].t.z());
    c.static_m = std::min(c.static_m, scene.static_clearance(p));
    c.dynamic_m = std::min(c.dynamic_m, scene.agent_clearance(p, f));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Feature rendering.

struct Intrinsics {
  double fx = 8.0, fy = 8.0, cx = 8.0, cy = 8.0;
};

struct RenderConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 8;
  double focal_per_width = 0.5;  // 90 degree horizontal field of view
  double near = 0.1;
  double agent_point_spacing = 0.07;

  Intrinsics intrinsics() const {
    const double f = focal_per_width * static_cast<double>(width);
    return {f, f, 0.5 * static_cast<double>(width), 0.5 * static_cast<double>(height)};
  }
};

struct FrameObservation {
  Tensor<float> feature_map;  // H x W x C
  Intrinsics intrinsics;
  Pose pose;                  // world frame camera (head) pose
};

/// Base channels written by the renderer. Channels beyond these are fixed
/// random mixtures of the base channels.
enum Channel : std::size_t {
  kInverseDepth = 0,
  kStaticHit = 1,
  kDynamicHit = 2,
  kHitHeight = 3,
  kSemanticBase = 4,  // one-hot over Label
  kNumBaseChannels = 4 + kNumLabels,
};

/// Pixel-space projection: u right, v down, pixel (row, col) covers
/// [col, col + 1) x [row, row + 1). Camera frame is X right, Y up, Z forward.
struct Projection {
  double u, v, depth;
};

inline Projection project(const Vec3& cam, const Intrinsics& k) {
  return {k.cx + k.fx * cam.x() / cam.z(), k.cy - k.fy * cam.y() / cam.z(), cam.z()};
}

/// Surface samples of each agent body at `frame`.
inline std::vector<Vec3> agent_points(const Scene& scene, std::size_t frame, double spacing) {
  std::vector<Vec3> pts;
  for (const auto& a : scene.agents) {
    const Vec2 c = a.at(frame);
    const int na = std::max(8, static_cast<int>(std::ceil(2 * std::numbers::pi * a.radius / spacing)));
    const int nh = std::max(2, static_cast<int>(std::ceil(kAgentHeight / spacing)));
    for (int i = 0; i < na; ++i) {
      const double th = 2 * std::numbers::pi * i / na;
      for (int h = 0; h <= nh; ++h)
        pts.emplace_back(c.x() + a.radius * std::cos(th), scene.ground_height + kAgentHeight * h / nh,
                         c.y() + a.radius * std::sin(th));
    }
  }
  return pts;
}

namespace detail {

inline std::vector<float> channel_mixer(std::size_t channels) {
  std::vector<float> m;
  if (channels <= kNumBaseChannels) return m;
  std::mt19937_64 rng(0x10F7);
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(double(kNumBaseChannels)));
  m.resize((channels - kNumBaseChannels) * kNumBaseChannels);
  for (auto& v : m) v = static_cast<float>(n(rng));
  return m;
}

}  // namespace detail

/// Z-buffered point splatting of the static cloud and agent bodies at `frame`.
inline FrameObservation render_features(const Scene& scene, std::size_t frame, const Pose& pose,
                                        const RenderConfig& cfg = {}) {
  require(cfg.height > 0 && cfg.width > 0 && cfg.channels > 0, ErrorCode::kConfigInvalid, "empty render target");
  FrameObservation obs;
  obs.intrinsics = cfg.intrinsics();
  obs.pose = pose;
  const std::size_t hw = cfg.height * cfg.width;
  std::vector<double> depth(hw, std::numeric_limits<double>::infinity());
  std::vector<float> height(hw, 0.0f);
  std::vector<int> label(hw, -1);  // -1 empty, kNumLabels dynamic
  const Mat3 rt = pose.rotation().transpose();
  auto splat = [&](const Vec3& p, int lab) {
    const Vec3 cam = rt * (p - pose.t);
    if (!(cam.z() > cfg.near)) return;
    const Projection pr = project(cam, obs.intrinsics);
    if (!(pr.u >= 0 && pr.u < double(cfg.width) && pr.v >= 0 && pr.v < double(cfg.height))) return;
    const std::size_t idx = static_cast<std::size_t>(pr.v) * cfg.width + static_cast<std::size_t>(pr.u);
    if (pr.depth < depth[idx]) {
      depth[idx] = pr.depth;
      label[idx] = lab;
      height[idx] = static_cast<float>(p.y() - scene.ground_height);
    }
  };
  for (std::size_t i = 0; i < scene.static_points.size(); ++i) splat(scene.static_points[i], scene.labels[i]);
  for (const auto& p : agent_points(scene, frame, cfg.agent_point_spacing)) splat(p, kNumLabels);

  const std::size_t c = cfg.channels;
  obs.feature_map = Tensor<float>(Shape{cfg.height, cfg.width, c});
  const auto mixer = detail::channel_mixer(c);
  std::array<float, kNumBaseChannels> base{};
  for (std::size_t i = 0; i < hw; ++i) {
    if (label[i] < 0) continue;
    base.fill(0.0f);
    base[kInverseDepth] = static_cast<float>(1.0 / depth[i]);
    base[label[i] == kNumLabels ? kDynamicHit : kStaticHit] = 1.0f;
    base[kHitHeight] = height[i];
    if (label[i] < kNumLabels) base[kSemanticBase + static_cast<std::size_t>(label[i])] = 1.0f;
    float* out = obs.feature_map.data() + i * c;
    for (std::size_t k = 0; k < std::min<std::size_t>(c, kNumBaseChannels); ++k) out[k] = base[k];
    for (std::size_t k = kNumBaseChannels; k < c; ++k) {
      float acc = 0;
      for (std::size_t j = 0; j < kNumBaseChannels; ++j) acc += mixer[(k - kNumBaseChannels) * kNumBaseChannels + j] * base[j];
      out[k] = acc;
    }
  }
  return obs;
}

/// A recorded sequence: world poses plus one rendered observation per frame.
struct Sequence {
  std::string id;
  Trajectory poses;
  std::vector<Tensor<float>> features;  // per frame, H x W x C
  Intrinsics intrinsics;
  double fps = kFrameRate;
};

/// Renders every frame of an ego trajectory into a sequence.
inline Sequence render_sequence(const Scene& scene, const Trajectory& ego, const RenderConfig& cfg, std::string id) {
  Sequence seq;
  seq.id = std::move(id);
  seq.poses = ego;
  seq.intrinsics = cfg.intrinsics();
  for (std::size_t f = 0; f < ego.size(); ++f) seq.features.push_back(render_features(scene, f, ego.poses[f], cfg).feature_map);
  return seq;
}

// ---------------------------------------------------------------------------
// Clip segmentation.

struct WindowConfig {
  std::size_t t1 = 8;
  std::size_t t2 = 8;
  std::size_t stride = 6;
  std::size_t dilation = 6;

  std::size_t span() const { return (t1 + t2 - 1) * dilation + 1; }
  double span_seconds(double fps = kFrameRate) const { return static_cast<double>((t1 + t2 - 1) * dilation) / fps; }
};

/// Frame indices of every clip: clip i uses i*stride + j*dilation, j < T1+T2.
inline std::vector<std::vector<std::size_t>> window_indices(std::size_t length, const WindowConfig& w) {
  require(w.t1 >= 1 && w.t2 >= 1 && w.stride >= 1 && w.dilation >= 1, ErrorCode::kConfigInvalid,
          "window parameters must be >= 1");
  if (length < w.span())
    fail(ErrorCode::kSequenceTooShort,
         "sequence of " + std::to_string(length) + " frames is shorter than clip span " + std::to_string(w.span()));
  const std::size_t count = (length - 1 - (w.t1 + w.t2 - 1) * w.dilation) / w.stride + 1;
  std::vector<std::vector<std::size_t>> out(count);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < w.t1 + w.t2; ++j) out[i].push_back(i * w.stride + j * w.dilation);
  return out;
}

struct Clip {
  std::vector<FrameObservation> observations;  // T1
  std::vector<Pose> past_poses;                // T1, world
  std::vector<Pose> future_poses;              // T2, world
  std::vector<std::size_t> frame_indices;      // T1 + T2
  std::string sequence_id;
  std::size_t start = 0;
  std::size_t t1 = 8, t2 = 8;
};

inline std::vector<Clip> window_clips(const Sequence& seq, const WindowConfig& w) {
  require(seq.features.size() == seq.poses.size(), ErrorCode::kConfigInvalid, "sequence features and poses differ in length");
  std::vector<Clip> clips;
  for (const auto& idx : window_indices(seq.poses.size(), w)) {
    Clip c;
    c.sequence_id = seq.id;
    c.start = idx.front();
    c.frame_indices = idx;
    c.t1 = w.t1;
    c.t2 = w.t2;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Pose& p = seq.poses.poses[idx[j]];
      if (j < w.t1) {
        c.past_poses.push_back(p);
        c.observations.push_back({seq.features[idx[j]], seq.intrinsics, p});
      } else {
        c.future_poses.push_back(p);
      }
    }
    clips.push_back(std::move(c));
  }
  return clips;
}

// ---------------------------------------------------------------------------
// Point-cloud cleanup.

struct FilterConfig {
  double voxel_size = 0.15;
  int min_support = 3;        // other points required in the 3x3x3 voxel neighborhood
  double height_min = -0.5;   // band relative to ground
  double height_max = 4.0;
  double ground_height = 0.0;
};

struct LabeledCloud {
  std::vector<Vec3> points;
  std::vector<int> labels;
};

/// Removes out-of-band points then repeatedly removes points with fewer than
/// `min_support` neighbors until none change, so the filter is idempotent.
inline LabeledCloud filter_pointcloud(const LabeledCloud& in, const FilterConfig& cfg = {}) {
  require(cfg.voxel_size > 0, ErrorCode::kConfigInvalid, "voxel size must be positive");
  LabeledCloud cur;
  for (std::size_t i = 0; i < in.points.size(); ++i) {
    const double h = in.points[i].y() - cfg.ground_height;
    if (h < cfg.height_min || h > cfg.height_max) continue;
    cur.points.push_back(in.points[i]);
    cur.labels.push_back(in.labels.empty() ? 0 : in.labels[i]);
  }
  auto key = [&](long x, long y, long z) {
    return (static_cast<std::uint64_t>(x & 0x1FFFFF) << 42) | (static_cast<std::uint64_t>(y & 0x1FFFFF) << 21) |
           static_cast<std::uint64_t>(z & 0x1FFFFF);
  };
  while (true) {
    std::unordered_map<std::uint64_t, int> counts;
    std::vector<std::array<long, 3>> vox(cur.points.size());
    for (std::size_t i = 0; i < cur.points.size(); ++i) {
      for (int a = 0; a < 3; ++a) vox[i][a] = static_cast<long>(std::floor(cur.points[i][a] / cfg.voxel_size));
      ++counts[key(vox[i][0], vox[i][1], vox[i][2])];
    }
    LabeledCloud next;
    for (std::size_t i = 0; i < cur.points.size(); ++i) {
      int support = -1;  // exclude the point itself
      for (long dx = -1; dx <= 1; ++dx)
        for (long dy = -1; dy <= 1; ++dy)
          for (long dz = -1; dz <= 1; ++dz) {
            auto it = counts.find(key(vox[i][0] + dx, vox[i][1] + dy, vox[i][2] + dz));
            if (it != counts.end()) support += it->second;
          }
      if (support >= cfg.min_support) {
        next.points.push_back(cur.points[i]);
        next.labels.push_back(cur.labels[i]);
      }
    }
    if (next.points.size() == cur.points.size()) return next;
    cur = std::move(next);
  }
}

}  // namespace lookout::datasim
