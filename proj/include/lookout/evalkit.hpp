#pragma once

// Collision and accuracy metrics, height maps and the comparison report.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>

#include "lookout/datasim.hpp"
#include "lookout/error.hpp"
#include "lookout/geom.hpp"
#include "lookout/grid.hpp"
#include "lookout/io.hpp"

namespace lookout::evalkit {

// ---------------------------------------------------------------------------
// Height map.

struct HeightMap {
  static constexpr double kNoData = -std::numeric_limits<double>::infinity();
  std::size_t nz = 0, nx = 0;
  std::vector<double> values;  // row-major over (z, x)

  double at(std::size_t iz, std::size_t ix) const { return values[iz * nx + ix]; }
  bool has_data(std::size_t iz, std::size_t ix) const { return at(iz, ix) != kNoData; }
};

/// Per (z, x) column, the highest occupied voxel center height.
inline HeightMap heightmap(const OccupancyGrid& occ) {
  const auto& g = occ.spec;
  HeightMap h{g.nz, g.nx, std::vector<double>(g.nz * g.nx, HeightMap::kNoData)};
  for (std::size_t iz = 0; iz < g.nz; ++iz)
    for (std::size_t iy = 0; iy < g.ny; ++iy)
      for (std::size_t ix = 0; ix < g.nx; ++ix)
        if (occ.is_occupied(iz, iy, ix)) h.values[iz * g.nx + ix] = g.center(iz, iy, ix).y();
  return h;
}

/// 8-bit rendering: 0 for empty columns, 1..255 linear between the lowest and
/// highest column heights.
inline std::vector<std::uint8_t> heightmap_gray(const HeightMap& h) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : h.values)
    if (v != HeightMap::kNoData) lo = std::min(lo, v), hi = std::max(hi, v);
  std::vector<std::uint8_t> out(h.values.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = h.values[i];
    if (v == HeightMap::kNoData) continue;
    const double a = hi > lo ? (v - lo) / (hi - lo) : 1.0;
    out[i] = static_cast<std::uint8_t>(1 + std::lround(254.0 * a));
  }
  return out;
}

/// Binary PGM (P5), one pixel per column, row 0 = lowest Z.
inline void write_pgm(const std::filesystem::path& path, const HeightMap& h) {
  auto os = io::open_out(path);
  os << "P5\n" << h.nx << ' ' << h.nz << "\n255\n";
  const auto gray = heightmap_gray(h);
  os.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

// ---------------------------------------------------------------------------
// Static distances.

/// Exact nearest-neighbour distance over a fixed cloud (R-tree index).
class StaticIndex {
 public:
  StaticIndex() = default;
  explicit StaticIndex(const std::vector<Vec3>& points) {
    require(!points.empty(), ErrorCode::kEmptyCloud, "static cloud is empty");
    std::vector<BPoint> pts;
    pts.reserve(points.size());
    for (const auto& p : points) pts.emplace_back(p.x(), p.y(), p.z());
    tree_ = std::make_shared<Tree>(pts.begin(), pts.end());
  }

  bool empty() const { return !tree_ || tree_->empty(); }

  double nearest(const Vec3& p) const {
    require(!empty(), ErrorCode::kEmptyCloud, "static cloud is empty");
    const BPoint q(p.x(), p.y(), p.z());
    BPoint hit;
    tree_->query(boost::geometry::index::nearest(q, 1), &hit);
    const double dx = hit.get<0>() - p.x(), dy = hit.get<1>() - p.y(), dz = hit.get<2>() - p.z();
    return std::sqrt(dx * dx + dy * dy + dz * dz);
  }

 private:
  using BPoint = boost::geometry::model::point<double, 3, boost::geometry::cs::cartesian>;
  using Tree = boost::geometry::index::rtree<BPoint, boost::geometry::index::rstar<16>>;
  std::shared_ptr<const Tree> tree_;
};

inline double nearest_static_distance(const Vec3& p, const std::vector<Vec3>& points) {
  return StaticIndex(points).nearest(p);
}

/// Step-level pass counts, pooled over clips.
struct PassCount {
  std::size_t pass = 0, total = 0;
  double percent() const { return total ? 100.0 * static_cast<double>(pass) / static_cast<double>(total) : 100.0; }
  PassCount& operator+=(const PassCount& o) {
    pass += o.pass;
    total += o.total;
    return *this;
  }
};

inline PassCount count_static(const std::vector<Vec3>& positions, const StaticIndex& index, double k_cm) {
  PassCount c;
  for (const auto& p : positions) {
    c.total += 1;
    c.pass += index.nearest(p) >= k_cm / 100.0 ? 1 : 0;
  }
  return c;
}

/// Percentage of predicted steps (world positions, pooled over clips) at least
/// k cm from the nearest cloud point.
inline double col_static(const std::vector<std::vector<Vec3>>& predictions, const std::vector<Vec3>& cloud, double k_cm) {
  const StaticIndex index(cloud);
  PassCount c;
  for (const auto& traj : predictions) c += count_static(traj, index, k_cm);
  return c.percent();
}

// ---------------------------------------------------------------------------
// Dynamic distances.

/// Either simulator agent tracks, or per-frame precomputed distances.
struct DynamicSource {
  enum class Mode { kTracks, kFile };
  Mode mode = Mode::kTracks;
  std::vector<datasim::AgentTrack> agents;
  std::map<std::size_t, double> distances;

  static DynamicSource from_tracks(std::vector<datasim::AgentTrack> a) { return {Mode::kTracks, std::move(a), {}}; }
  static DynamicSource from_file(std::map<std::size_t, double> d) { return {Mode::kFile, {}, std::move(d)}; }

  /// Clearance of `p` (world) at sequence frame `frame`: horizontal distance
  /// to the nearest agent axis minus its radius; +inf with no agents.
  double distance(const Vec3& p, std::size_t frame) const {
    if (mode == Mode::kFile) {
      const auto it = distances.find(frame);
      if (it == distances.end())
        fail(ErrorCode::kMissingDynamicData, "no dynamic distance for frame " + std::to_string(frame));
      return it->second;
    }
    double d = std::numeric_limits<double>::infinity();
    for (const auto& a : agents) {
      if (a.positions.empty()) fail(ErrorCode::kMissingDynamicData, "agent track has no samples");
      const datasim::Vec2 q = a.at(frame);
      d = std::min(d, std::hypot(p.x() - q.x(), p.z() - q.y()) - a.radius);
    }
    return d;
  }
};

/// Per-frame clearances of a sequence's recorded camera, for the file mode.
inline std::map<std::size_t, double> camera_dynamic_distances(const std::vector<Pose>& camera,
                                                              const std::vector<datasim::AgentTrack>& agents) {
  const auto src = DynamicSource::from_tracks(agents);
  std::map<std::size_t, double> out;
  for (std::size_t i = 0; i < camera.size(); ++i) {
    const double d = src.distance(camera[i].t, i);
    out[i] = std::isfinite(d) ? d : 1e9;
  }
  return out;
}

inline PassCount count_dynamic(const std::vector<Vec3>& positions, const std::vector<std::size_t>& frames,
                               const DynamicSource& src, double k_cm) {
  require(positions.size() == frames.size(), ErrorCode::kLengthMismatch, "positions and frame indices differ in length");
  PassCount c;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    c.total += 1;
    c.pass += src.distance(positions[i], frames[i]) >= k_cm / 100.0 ? 1 : 0;
  }
  return c;
}

inline double col_dynamic(const std::vector<std::vector<Vec3>>& predictions,
                          const std::vector<std::vector<std::size_t>>& frames, const DynamicSource& src, double k_cm) {
  require(predictions.size() == frames.size(), ErrorCode::kLengthMismatch, "one frame list per prediction is needed");
  PassCount c;
  for (std::size_t i = 0; i < predictions.size(); ++i) c += count_dynamic(predictions[i], frames[i], src, k_cm);
  return c.percent();
}

// ---------------------------------------------------------------------------
// Accuracy.

struct L1 {
  double trans = 0, rot = 0;
};

/// Mean over steps of the L1 translation error and of |R_gt^T R_pred - I|_1.
inline L1 l1_metrics(const std::vector<Pose>& pred, const std::vector<Pose>& gt) {
  require(pred.size() == gt.size() && !gt.empty(), ErrorCode::kLengthMismatch, "prediction and ground truth lengths differ");
  L1 out;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    out.trans += (gt[i].t - pred[i].t).cwiseAbs().sum();
    out.rot += (gt[i].rotation().transpose() * pred[i].rotation() - Mat3::Identity()).cwiseAbs().sum();
  }
  out.trans /= static_cast<double>(gt.size());
  out.rot /= static_cast<double>(gt.size());
  return out;
}

// ---------------------------------------------------------------------------
// Report.

inline constexpr std::array<int, 3> kThresholdsCm{15, 25, 35};

/// One evaluated clip: canonical ground truth, its frame and the sequence
/// frames of the future steps. `scene` indexes the scene context list.
struct EvalClip {
  std::string key;
  std::size_t scene = 0;
  CanonicalFrame frame;
  std::vector<Pose> gt;  // canonical
  std::vector<std::size_t> future_frames;
};

struct SceneContext {
  StaticIndex statics;
  DynamicSource dynamics;
};

struct MethodPredictions {
  std::string name;
  std::vector<std::string> keys;
  std::vector<std::vector<Pose>> poses;  // canonical, one list per key
};

struct ReportRow {
  std::string method;
  double l1_trans = 0, l1_rot = 0;
  std::array<double, 3> col_stt{}, col_dyn{};
  double stt_avg() const { return (col_stt[0] + col_stt[1] + col_stt[2]) / 3.0; }
  double dyn_avg() const { return (col_dyn[0] + col_dyn[1] + col_dyn[2]) / 3.0; }
};

struct MetricsReport {
  std::vector<ReportRow> rows;
  std::size_t clips = 0;

  const ReportRow& row(const std::string& method) const {
    for (const auto& r : rows)
      if (r.method == method) return r;
    fail(ErrorCode::kConfigInvalid, "report has no method '" + method + "'");
  }
};

inline ReportRow evaluate_method(const std::string& name, const std::vector<EvalClip>& clips,
                                 const std::vector<std::vector<Pose>>& preds, const std::vector<SceneContext>& scenes) {
  ReportRow row;
  row.method = name;
  std::array<PassCount, 3> stt, dyn;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& c = clips[i];
    const L1 l = l1_metrics(preds[i], c.gt);
    row.l1_trans += l.trans;
    row.l1_rot += l.rot;
    std::vector<Vec3> world;
    for (const auto& p : preds[i]) world.push_back(c.frame.to_world(p.t));
    const auto& sc = scenes.at(c.scene);
    for (std::size_t k = 0; k < 3; ++k) {
      stt[k] += count_static(world, sc.statics, kThresholdsCm[k]);
      dyn[k] += count_dynamic(world, c.future_frames, sc.dynamics, kThresholdsCm[k]);
    }
  }
  if (!clips.empty()) {
    row.l1_trans /= static_cast<double>(clips.size());
    row.l1_rot /= static_cast<double>(clips.size());
  }
  for (std::size_t k = 0; k < 3; ++k) {
    row.col_stt[k] = stt[k].percent();
    row.col_dyn[k] = dyn[k].percent();
  }
  return row;
}

/// GT row first, then methods in the given order.
inline MetricsReport make_report(const std::vector<EvalClip>& clips, const std::vector<MethodPredictions>& methods,
                                 const std::vector<SceneContext>& scenes) {
  std::vector<std::string> keys;
  for (const auto& c : clips) keys.push_back(c.key);
  MetricsReport report;
  report.clips = clips.size();
  std::vector<std::vector<Pose>> gt;
  for (const auto& c : clips) gt.push_back(c.gt);
  report.rows.push_back(evaluate_method("GT", clips, gt, scenes));
  for (const auto& m : methods) {
    if (m.keys != keys || m.poses.size() != keys.size())
      fail(ErrorCode::kInconsistentClipSets, "method '" + m.name + "' was evaluated on a different clip set");
    report.rows.push_back(evaluate_method(m.name, clips, m.poses, scenes));
  }
  return report;
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline std::string csv_header() {
  return "Method,L1_trans,L1_rot,Col_stt_15,Col_dyn_15,Col_stt_25,Col_dyn_25,Col_stt_35,Col_dyn_35";
}

inline std::string to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << csv_header() << '\n';
  for (const auto& row : r.rows) {
    os << row.method << ',' << fixed(row.l1_trans, 6) << ',' << fixed(row.l1_rot, 6);
    for (std::size_t k = 0; k < 3; ++k) os << ',' << fixed(row.col_stt[k], 2) << ',' << fixed(row.col_dyn[k], 2);
    os << '\n';
  }
  return os.str();
}

inline std::string to_table(const MetricsReport& r) {
  const std::vector<std::string> head{"Method",    "L1_trans",  "L1_rot",    "Col_stt_15", "Col_dyn_15", "Col_stt_25",
                                      "Col_dyn_25", "Col_stt_35", "Col_dyn_35", "Col_stt_avg", "Col_dyn_avg"};
  std::vector<std::vector<std::string>> cells{head};
  for (const auto& row : r.rows) {
    std::vector<std::string> line{row.method, fixed(row.l1_trans, 4), fixed(row.l1_rot, 4)};
    for (std::size_t k = 0; k < 3; ++k) {
      line.push_back(fixed(row.col_stt[k], 1));
      line.push_back(fixed(row.col_dyn[k], 1));
    }
    line.push_back(fixed(row.stt_avg(), 1));
    line.push_back(fixed(row.dyn_avg(), 1));
    cells.push_back(line);
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::ostringstream os;
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i == 0) os << line[i] << std::string(width[i] - line[i].size(), ' ');
      else os << "  " << std::string(width[i] - line[i].size(), ' ') << line[i];
    }
    os << '\n';
  }
  os << "clips: " << r.clips << '\n';
  return os.str();
}

}  // namespace lookout::evalkit
