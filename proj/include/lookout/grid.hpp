#pragma once

// Voxel grid placement in the canonical frame and point-cloud occupancy on it.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "lookout/error.hpp"
#include "lookout/geom.hpp"

namespace lookout {

/// Z x Y x X grid of cubic voxels. `origin` is the minimum corner (x, y, z) in
/// the frame the grid lives in; voxel (iz, iy, ix) spans
/// [origin + (ix, iy, iz) * spacing, origin + (ix + 1, iy + 1, iz + 1) * spacing).
struct VoxelGridSpec {
  std::size_t nz = 96, ny = 32, nx = 96;
  double spacing = 0.0843;
  Vec3 origin = Vec3(-4.05, -1.8, -1.35);

  static VoxelGridSpec tiny() { return {24, 8, 24, 0.3375, Vec3(-4.05, -1.8, -1.35)}; }

  void validate() const {
    require(nz >= 2 && ny >= 2 && nx >= 2, ErrorCode::kConfigInvalid, "voxel counts must be >= 2");
    require(spacing > 0 && std::isfinite(spacing), ErrorCode::kConfigInvalid, "voxel spacing must be positive");
  }
  std::size_t voxels() const { return nz * ny * nx; }
  std::size_t index(std::size_t iz, std::size_t iy, std::size_t ix) const { return (iz * ny + iy) * nx + ix; }
  Vec3 center(std::size_t iz, std::size_t iy, std::size_t ix) const {
    return {origin.x() + (static_cast<double>(ix) + 0.5) * spacing, origin.y() + (static_cast<double>(iy) + 0.5) * spacing,
            origin.z() + (static_cast<double>(iz) + 0.5) * spacing};
  }
  /// Floor binning; points on a boundary go to the cell above it.
  std::optional<std::array<std::size_t, 3>> cell_of(const Vec3& p) const {
    const double fx = std::floor((p.x() - origin.x()) / spacing);
    const double fy = std::floor((p.y() - origin.y()) / spacing);
    const double fz = std::floor((p.z() - origin.z()) / spacing);
    if (!(fx >= 0 && fy >= 0 && fz >= 0 && fx < double(nx) && fy < double(ny) && fz < double(nz))) return std::nullopt;
    return std::array<std::size_t, 3>{static_cast<std::size_t>(fz), static_cast<std::size_t>(fy),
                                      static_cast<std::size_t>(fx)};
  }
  bool operator==(const VoxelGridSpec&) const = default;
};

struct OccupancyGrid {
  VoxelGridSpec spec;
  std::vector<std::uint32_t> counts;  // per voxel, Z-Y-X order
  std::vector<std::uint8_t> occupied;
  std::uint32_t min_points = 1;

  bool is_occupied(std::size_t iz, std::size_t iy, std::size_t ix) const { return occupied[spec.index(iz, iy, ix)] != 0; }
};

/// Bins `points` (already expressed in the grid's frame) into `spec`.
inline OccupancyGrid build_occupancy(const std::vector<Vec3>& points, const VoxelGridSpec& spec,
                                     std::uint32_t min_points = 1) {
  spec.validate();
  require(min_points >= 1, ErrorCode::kConfigInvalid, "min_points must be >= 1");
  OccupancyGrid g{spec, std::vector<std::uint32_t>(spec.voxels(), 0), std::vector<std::uint8_t>(spec.voxels(), 0),
                  min_points};
  for (const auto& p : points)
    if (auto c = spec.cell_of(p)) ++g.counts[spec.index((*c)[0], (*c)[1], (*c)[2])];
  for (std::size_t i = 0; i < g.counts.size(); ++i) g.occupied[i] = g.counts[i] >= min_points ? 1 : 0;
  return g;
}

/// World points mapped into a canonical frame.
inline std::vector<Vec3> to_canonical_points(const std::vector<Vec3>& world, const CanonicalFrame& frame) {
  std::vector<Vec3> out;
  out.reserve(world.size());
  for (const auto& p : world) out.push_back(frame.to_local(p));
  return out;
}

}  // namespace lookout
