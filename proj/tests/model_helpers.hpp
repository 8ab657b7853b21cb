#pragma once

#include <random>

#include "lookout/datasim.hpp"
#include "lookout/model.hpp"

namespace lookout::testing {

/// Per-voxel scalar oracle for the lift: direct transform, projection and
/// bilinear sampling of one voxel center.
inline std::vector<float> oracle_voxel(const datasim::FrameObservation& obs, const CanonicalFrame& frame,
                                       const VoxelGridSpec& g, std::size_t iz, std::size_t iy, std::size_t ix,
                                       bool* visible) {
  const auto& map = obs.feature_map;
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2);
  std::vector<float> out(c, 0.0f);
  *visible = false;
  const double px = g.origin.x() + (static_cast<double>(ix) + 0.5) * g.spacing;
  const double py = g.origin.y() + (static_cast<double>(iy) + 0.5) * g.spacing;
  const double pz = g.origin.z() + (static_cast<double>(iz) + 0.5) * g.spacing;
  const Mat3 r = obs.pose.rotation();
  double m[3][3], t[3];
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double a = 0;
      for (int k = 0; k < 3; ++k) a += r(k, i) * frame.axes(k, j);
      m[i][j] = a;
    }
    double a = 0;
    for (int k = 0; k < 3; ++k) a += r(k, i) * (frame.origin(k) - obs.pose.t(k));
    t[i] = a;
  }
  const double x = m[0][0] * px + m[0][1] * py + m[0][2] * pz + t[0];
  const double y = m[1][0] * px + m[1][1] * py + m[1][2] * pz + t[1];
  const double z = m[2][0] * px + m[2][1] * py + m[2][2] * pz + t[2];
  if (!(z > 1e-4)) return out;
  const auto& k = obs.intrinsics;
  const double u = k.cx + k.fx * x / z, v = k.cy - k.fy * y / z;
  if (!(u >= 0 && u < double(w) && v >= 0 && v < double(h))) return out;
  *visible = true;
  const double su = u - 0.5, sv = v - 0.5;
  const long c0 = static_cast<long>(std::floor(su)), r0 = static_cast<long>(std::floor(sv));
  const double au = su - std::floor(su), av = sv - std::floor(sv);
  auto clampi = [](long q, long hi) { return q < 0 ? 0 : (q > hi ? hi : q); };
  const long xs[2] = {clampi(c0, long(w) - 1), clampi(c0 + 1, long(w) - 1)};
  const long ys[2] = {clampi(r0, long(h) - 1), clampi(r0 + 1, long(h) - 1)};
  const float wts[4] = {static_cast<float>((1.0 - av) * (1.0 - au)), static_cast<float>((1.0 - av) * au),
                        static_cast<float>(av * (1.0 - au)), static_cast<float>(av * au)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float f00 = map[(std::size_t(ys[0]) * w + std::size_t(xs[0])) * c + ch];
    const float f01 = map[(std::size_t(ys[0]) * w + std::size_t(xs[1])) * c + ch];
    const float f10 = map[(std::size_t(ys[1]) * w + std::size_t(xs[0])) * c + ch];
    const float f11 = map[(std::size_t(ys[1]) * w + std::size_t(xs[1])) * c + ch];
    out[ch] = wts[0] * f00 + wts[1] * f01 + wts[2] * f10 + wts[3] * f11;
  }
  return out;
}

/// Small scene + ego walk rendered into a sequence, retrying ego seeds on NoFreePath.
inline datasim::Sequence simulated_sequence(std::uint64_t seed, std::size_t channels = 8, int agents = 3) {
  datasim::SceneConfig sc;
  sc.n_agents = agents;
  sc.n_static_obstacles = 8;
  const auto scene = datasim::gen_scene(seed, sc);
  for (std::uint64_t k = 0;; ++k) {
    try {
      const auto ego = datasim::gen_ego_trajectory(scene, seed + 1000 * k);
      datasim::RenderConfig rc;
      rc.channels = channels;
      return datasim::render_sequence(scene, ego, rc, "sim" + std::to_string(seed));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNoFreePath || k > 20) throw;
    }
  }
}

/// Applies a world rotation about +Y by `yaw` followed by translation `b` to every pose of a clip.
inline datasim::Clip transformed_clip(const datasim::Clip& c, double yaw, const Vec3& b) {
  const Mat3 q = rotation_about(Vec3::UnitY(), yaw);
  auto move = [&](const Pose& p) { return Pose(Vec3(q * p.t + b), Mat3(q * p.rotation())); };
  datasim::Clip out = c;
  for (auto& p : out.past_poses) p = move(p);
  for (auto& p : out.future_poses) p = move(p);
  for (auto& o : out.observations) o.pose = move(o.pose);
  return out;
}

}  // namespace lookout::testing
