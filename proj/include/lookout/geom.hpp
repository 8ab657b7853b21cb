#pragma once

// Rigid-body pose algebra, the 6D rotation representation and the
// head-centered canonical frame.
//
// Axis convention shared by every module: Y up, Z forward, X right. The
// forward axis of a head pose is the third column of its rotation matrix.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lookout/error.hpp"

namespace lookout {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kFrameRate = 20.0;
inline constexpr double kFramePeriod = 1.0 / kFrameRate;
inline constexpr double kDegenerateNorm = 1e-8;
inline constexpr double kGimbalAngle = 1e-3;
inline constexpr double kRotationTol = 1e-5;

/// World gravity axis under the Y-up convention.
inline Vec3 world_up() { return Vec3::UnitY(); }

/// First two columns of a rotation matrix, column-major: (a1 | a2).
struct Rot6D {
  std::array<double, 6> v{1, 0, 0, 0, 1, 0};

  Vec3 first() const { return {v[0], v[1], v[2]}; }
  Vec3 second() const { return {v[3], v[4], v[5]}; }
  friend bool operator==(const Rot6D&, const Rot6D&) = default;
};

inline bool is_rotation(const Mat3& r, double tol = kRotationTol) {
  if (!r.allFinite()) return false;
  const Mat3 err = r.transpose() * r - Mat3::Identity();
  return err.cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

/// Gram-Schmidt: b1 = normalize(a1), b2 = normalize(a2 - (b1.a2) b1), b3 = b1 x b2.
inline Mat3 rot6d_to_matrix(const Rot6D& r) {
  const Vec3 a1 = r.first();
  const Vec3 a2 = r.second();
  const double n1 = a1.norm();
  if (!(n1 > kDegenerateNorm)) fail(ErrorCode::kDegenerateRotation, "first column norm below 1e-8");
  if (!(a2.norm() > kDegenerateNorm)) fail(ErrorCode::kDegenerateRotation, "second column norm below 1e-8");
  const Vec3 b1 = a1 / n1;
  const Vec3 resid = a2 - b1.dot(a2) * b1;
  const double n2 = resid.norm();
  if (!(n2 > kDegenerateNorm)) fail(ErrorCode::kDegenerateRotation, "columns are parallel");
  const Vec3 b2 = resid / n2;
  Mat3 m;
  m.col(0) = b1;
  m.col(1) = b2;
  m.col(2) = b1.cross(b2);
  return m;
}

inline Rot6D matrix_to_rot6d(const Mat3& r) {
  if (!is_rotation(r)) fail(ErrorCode::kInvalidRotation, "matrix is not orthonormal with det +1");
  return Rot6D{{r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)}};
}

inline Mat3 rotation_about(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

/// Heading rotation for `yaw` under the frame convention: yaw 0 faces +Z,
/// yaw -90 degrees faces +X (positive yaw turns toward -X).
inline Mat3 yaw_rotation(double yaw) { return rotation_about(Vec3::UnitY(), -yaw); }

struct Pose {
  Vec3 t = Vec3::Zero();
  Rot6D r;

  Pose() = default;
  Pose(const Vec3& translation, const Rot6D& rotation) : t(translation), r(rotation) {}
  Pose(const Vec3& translation, const Mat3& rotation) : t(translation), r(matrix_to_rot6d(rotation)) {}

  Mat3 rotation() const { return rot6d_to_matrix(r); }
  Vec3 forward() const { return rotation().col(2); }

  /// [t_x, t_y, t_z, r_1..r_6]
  std::array<double, 9> flatten() const {
    return {t.x(), t.y(), t.z(), r.v[0], r.v[1], r.v[2], r.v[3], r.v[4], r.v[5]};
  }
  static Pose unflatten(const std::array<double, 9>& h) {
    Pose p;
    p.t = Vec3(h[0], h[1], h[2]);
    for (int i = 0; i < 6; ++i) p.r.v[i] = h[3 + i];
    return p;
  }
};

enum class FrameLabel { kWorld, kCanonical };

struct Trajectory {
  std::vector<double> timestamps;
  std::vector<Pose> poses;
  FrameLabel frame = FrameLabel::kWorld;

  std::size_t size() const { return poses.size(); }
  bool empty() const { return poses.empty(); }
  void push_back(double stamp, const Pose& pose) {
    timestamps.push_back(stamp);
    poses.push_back(pose);
  }
};

/// Strictly increasing stamps with uniform spacing `period` (default 50 ms).
inline bool has_uniform_timing(const Trajectory& traj, double period = kFramePeriod, double tol = 1e-6) {
  if (traj.timestamps.size() != traj.poses.size()) return false;
  for (std::size_t i = 1; i < traj.timestamps.size(); ++i) {
    const double dt = traj.timestamps[i] - traj.timestamps[i - 1];
    if (!(dt > 0.0) || std::abs(dt - period) > tol) return false;
  }
  return true;
}

/// Ground-parallel frame centered on the head at the last observed step.
struct CanonicalFrame {
  Vec3 origin = Vec3::Zero();
  double yaw = 0.0;
  Vec3 up = Vec3::UnitY();
  /// Columns are the frame's X, Y, Z axes expressed in world coordinates.
  Mat3 axes = Mat3::Identity();

  Vec3 to_local(const Vec3& p) const { return axes.transpose() * (p - origin); }
  Vec3 to_world(const Vec3& p) const { return axes * p + origin; }
};

inline CanonicalFrame canonical_frame_of(const Pose& head, const Vec3& gravity_up = world_up()) {
  const Vec3 up = gravity_up.normalized();
  const Vec3 fwd = head.forward();
  const double cos_angle = std::clamp(fwd.dot(up), -1.0, 1.0);
  const double angle = std::acos(cos_angle);
  if (angle < kGimbalAngle || angle > std::numbers::pi - kGimbalAngle)
    fail(ErrorCode::kGimbalDegenerate, "forward axis within 1e-3 rad of gravity axis");
  const Vec3 z = (fwd - fwd.dot(up) * up).normalized();
  const Vec3 x = up.cross(z);
  CanonicalFrame frame;
  frame.origin = head.t;
  frame.up = up;
  frame.axes.col(0) = x;
  frame.axes.col(1) = up;
  frame.axes.col(2) = z;
  // Heading relative to the world Z axis projected onto the ground plane.
  Vec3 ref = Vec3::UnitZ() - Vec3::UnitZ().dot(up) * up;
  if (ref.norm() < kDegenerateNorm) ref = Vec3::UnitX() - Vec3::UnitX().dot(up) * up;
  ref.normalize();
  const Vec3 ref_x = up.cross(ref);
  frame.yaw = std::atan2(-z.dot(ref_x), z.dot(ref));
  return frame;
}

inline Pose to_canonical(const Pose& p, const CanonicalFrame& frame) {
  const Mat3 r = frame.axes.transpose() * p.rotation();
  return Pose(frame.to_local(p.t), Rot6D{{r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)}});
}

inline Pose from_canonical(const Pose& p, const CanonicalFrame& frame) {
  const Mat3 r = frame.axes * p.rotation();
  return Pose(frame.to_world(p.t), Rot6D{{r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)}});
}

inline Trajectory to_canonical(const Trajectory& traj, const CanonicalFrame& frame) {
  require(traj.frame == FrameLabel::kWorld, ErrorCode::kFrameMismatch, "trajectory is already canonical");
  Trajectory out;
  out.frame = FrameLabel::kCanonical;
  out.timestamps = traj.timestamps;
  out.poses.reserve(traj.size());
  for (const auto& p : traj.poses) out.poses.push_back(to_canonical(p, frame));
  return out;
}

inline Trajectory from_canonical(const Trajectory& traj, const CanonicalFrame& frame) {
  require(traj.frame == FrameLabel::kCanonical, ErrorCode::kFrameMismatch, "trajectory is not canonical");
  Trajectory out;
  out.frame = FrameLabel::kWorld;
  out.timestamps = traj.timestamps;
  out.poses.reserve(traj.size());
  for (const auto& p : traj.poses) out.poses.push_back(from_canonical(p, frame));
  return out;
}

/// Heading of a rotation's forward axis about world Y, in the frame yaw convention.
inline double heading_of(const Mat3& r) {
  const Vec3 f = r.col(2);
  return std::atan2(-f.x(), f.z());
}

// ---------------------------------------------------------------------------
// Text format: `timestamp_s tx ty tz r1 r2 r3 r4 r5 r6` per line, `#` comments.

inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_trajectory(std::ostream& os, const Trajectory& traj) {
  os << "# frame " << (traj.frame == FrameLabel::kWorld ? "world" : "canonical") << "\n";
  os << "# timestamp_s tx ty tz r1 r2 r3 r4 r5 r6\n";
  for (std::size_t i = 0; i < traj.size(); ++i) {
    os << format_number(traj.timestamps[i]);
    for (double v : traj.poses[i].flatten()) os << ' ' << format_number(v);
    os << '\n';
  }
}

inline Trajectory read_trajectory(std::istream& is) {
  Trajectory traj;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) {
      const std::string comment = line.substr(hash + 1);
      if (comment.find("frame canonical") != std::string::npos) traj.frame = FrameLabel::kCanonical;
      line.resize(hash);
    }
    std::istringstream ss(line);
    double stamp = 0;
    if (!(ss >> stamp)) continue;
    std::array<double, 9> h{};
    for (auto& v : h)
      if (!(ss >> v)) fail(ErrorCode::kParse, "trajectory line " + std::to_string(lineno) + ": expected 10 values");
    traj.push_back(stamp, Pose::unflatten(h));
  }
  return traj;
}

}  // namespace lookout
