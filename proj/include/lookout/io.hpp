#pragma once

// On-disk formats: labeled ASCII PLY clouds, LOFT float tensors, agent track
// and dynamic-distance text files, and JSON sequence / dataset manifests.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lookout/datasim.hpp"
#include "lookout/error.hpp"
#include "lookout/geom.hpp"
#include "lookout/tensor.hpp"

namespace lookout::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::ifstream open_in(const fs::path& p, bool binary = false) {
  std::ifstream is(p, binary ? std::ios::binary : std::ios::in);
  if (!is) fail(ErrorCode::kIo, "cannot open " + p.string());
  return is;
}

inline std::ofstream open_out(const fs::path& p, bool binary = false) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot write " + p.string());
  return os;
}

inline std::string read_text(const fs::path& p) {
  auto is = open_in(p, true);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// 64-bit FNV-1a over the bytes of a file.
inline std::uint64_t file_hash(const fs::path& p) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : read_text(p)) h = (h ^ c) * 0x100000001b3ull;
  return h;
}

// ---------------------------------------------------------------------------
// PLY

inline void write_ply(const fs::path& path, const datasim::LabeledCloud& cloud) {
  require(cloud.labels.size() == cloud.points.size(), ErrorCode::kShapeMismatch, "one label per point required");
  auto os = open_out(path);
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.points.size()
     << "\nproperty float x\nproperty float y\nproperty float z\nproperty int label\nend_header\n";
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const auto& p = cloud.points[i];
    os << format_number(p.x()) << ' ' << format_number(p.y()) << ' ' << format_number(p.z()) << ' ' << cloud.labels[i]
       << '\n';
  }
  if (!os) fail(ErrorCode::kIo, "failed writing " + path.string());
}

inline datasim::LabeledCloud read_ply(const fs::path& path) {
  auto is = open_in(path);
  std::string line;
  std::getline(is, line);
  if (line != "ply") fail(ErrorCode::kParse, path.string() + " is not a PLY file");
  std::size_t n = 0;
  bool has_label = false;
  while (std::getline(is, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string a, b, c;
    ls >> a >> b >> c;
    if (a == "format" && b != "ascii") fail(ErrorCode::kParse, "only ASCII PLY is supported");
    if (a == "element" && b == "vertex") n = std::stoull(c);
    if (a == "property" && c == "label") has_label = true;
  }
  if (line != "end_header") fail(ErrorCode::kParse, path.string() + ": missing end_header");
  datasim::LabeledCloud cloud;
  for (std::size_t i = 0; i < n; ++i) {
    double x, y, z;
    int label = 0;
    if (!(is >> x >> y >> z) || (has_label && !(is >> label)))
      fail(ErrorCode::kParse, path.string() + ": truncated vertex list");
    cloud.points.emplace_back(x, y, z);
    cloud.labels.push_back(label);
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// LOFT tensors: "LOFT", u32 rank, u32 element size (4), u32 flags (0),
// u32 dims[rank], little-endian f32 data in row-major order.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail(ErrorCode::kParse, "truncated tensor file");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

}  // namespace detail

inline void write_loft(const fs::path& path, const Tensor<float>& t) {
  auto os = open_out(path, true);
  os.write("LOFT", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  detail::put_u32(os, 4);
  detail::put_u32(os, 0);
  for (auto d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (float v : t.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    detail::put_u32(os, bits);
  }
  if (!os) fail(ErrorCode::kIo, "failed writing " + path.string());
}

inline Tensor<float> read_loft(const fs::path& path) {
  auto is = open_in(path, true);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "LOFT", 4) != 0)
    fail(ErrorCode::kParse, path.string() + " is not a LOFT tensor");
  const auto rank = detail::get_u32(is);
  if (detail::get_u32(is) != 4) fail(ErrorCode::kParse, path.string() + ": only 4-byte floats are supported");
  detail::get_u32(is);
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_u32(is);
  Tensor<float> t(shape);
  for (auto& v : t.values()) {
    const std::uint32_t bits = detail::get_u32(is);
    std::memcpy(&v, &bits, 4);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Agent tracks: per agent a line "agent <id> <radius> <frames>" followed by
// <frames> lines "x z heading".

inline void write_agent_tracks(const fs::path& path, const std::vector<datasim::AgentTrack>& agents) {
  auto os = open_out(path);
  os << "# agent <id> <radius_m> <frames>, then per frame: x z heading\n";
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const auto& a = agents[i];
    os << "agent " << i << ' ' << format_number(a.radius) << ' ' << a.size() << '\n';
    for (std::size_t f = 0; f < a.size(); ++f)
      os << format_number(a.positions[f].x()) << ' ' << format_number(a.positions[f].y()) << ' '
         << format_number(a.headings[f]) << '\n';
  }
}

inline std::vector<datasim::AgentTrack> read_agent_tracks(const fs::path& path) {
  auto is = open_in(path);
  std::vector<datasim::AgentTrack> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    std::size_t id, frames;
    datasim::AgentTrack a;
    if (!(ls >> tag >> id >> a.radius >> frames) || tag != "agent")
      fail(ErrorCode::kParse, path.string() + ": bad agent header '" + line + "'");
    for (std::size_t f = 0; f < frames; ++f) {
      double x, z, h;
      if (!(is >> x >> z >> h)) fail(ErrorCode::kParse, path.string() + ": truncated agent track");
      a.positions.emplace_back(x, z);
      a.headings.push_back(h);
    }
    std::getline(is, line);
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-frame nearest dynamic obstacle distances: "frame_index distance_m" lines.

inline void write_dynamic_distances(const fs::path& path, const std::map<std::size_t, double>& d) {
  auto os = open_out(path);
  for (const auto& [frame, dist] : d) os << frame << ' ' << format_number(dist) << '\n';
}

inline std::map<std::size_t, double> read_dynamic_distances(const fs::path& path) {
  auto is = open_in(path);
  std::map<std::size_t, double> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t f;
    double d;
    if (!(ls >> f >> d)) fail(ErrorCode::kParse, path.string() + ": bad line '" + line + "'");
    out[f] = d;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests.

/// Paths inside a sequence manifest are relative to the manifest's directory.
struct SequenceManifest {
  std::string id;
  double fps = kFrameRate;
  std::size_t frames = 0;
  std::string poses = "poses.txt";
  std::string features = "features.loft";  // frames x H x W x C
  std::string pointcloud = "cloud.ply";
  std::string agents = "agents.txt";
  std::string dynamic_distances;            // optional
  datasim::Intrinsics intrinsics;
  std::uint64_t scene_seed = 0;
  double ground_height = 0.0;
};

inline json to_json(const SequenceManifest& m) {
  json j;
  j["id"] = m.id;
  j["fps"] = m.fps;
  j["frames"] = m.frames;
  j["poses"] = m.poses;
  j["features"] = json::array({m.features});
  j["pointcloud"] = m.pointcloud;
  j["agents"] = m.agents;
  if (!m.dynamic_distances.empty()) j["dynamic_distances"] = m.dynamic_distances;
  j["intrinsics"] = {{"fx", m.intrinsics.fx}, {"fy", m.intrinsics.fy}, {"cx", m.intrinsics.cx}, {"cy", m.intrinsics.cy}};
  j["scene_seed"] = m.scene_seed;
  j["ground_height"] = m.ground_height;
  return j;
}

inline SequenceManifest sequence_manifest_from_json(const json& j) {
  try {
    SequenceManifest m;
    m.id = j.at("id").get<std::string>();
    m.fps = j.at("fps").get<double>();
    m.frames = j.at("frames").get<std::size_t>();
    m.poses = j.at("poses").get<std::string>();
    const auto& f = j.at("features");
    m.features = f.is_array() ? f.at(0).get<std::string>() : f.get<std::string>();
    m.pointcloud = j.at("pointcloud").get<std::string>();
    m.agents = j.value("agents", std::string());
    m.dynamic_distances = j.value("dynamic_distances", std::string());
    const auto& k = j.at("intrinsics");
    m.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(), k.at("cy").get<double>()};
    m.scene_seed = j.value("scene_seed", std::uint64_t{0});
    m.ground_height = j.value("ground_height", 0.0);
    return m;
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("bad sequence manifest: ") + e.what());
  }
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const json& j) {
  auto os = open_out(p);
  os << dump(j);
}

/// Everything stored for one recorded sequence.
struct SequenceData {
  SequenceManifest manifest;
  datasim::Sequence sequence;
  datasim::LabeledCloud cloud;
  std::vector<datasim::AgentTrack> agents;
  std::map<std::size_t, double> dynamic_distances;
};

inline void write_sequence(const fs::path& dir, const SequenceData& s) {
  fs::create_directories(dir);
  const auto& m = s.manifest;
  {
    auto os = open_out(dir / m.poses);
    write_trajectory(os, s.sequence.poses);
  }
  const auto& feats = s.sequence.features;
  require(!feats.empty(), ErrorCode::kConfigInvalid, "sequence has no frames");
  Shape shape{feats.size()};
  for (auto d : feats[0].shape()) shape.push_back(d);
  Tensor<float> stacked(shape);
  const std::size_t per = feats[0].size();
  for (std::size_t i = 0; i < feats.size(); ++i) {
    require(feats[i].shape() == feats[0].shape(), ErrorCode::kShapeMismatch, "frame feature shapes differ");
    std::copy(feats[i].data(), feats[i].data() + per, stacked.data() + i * per);
  }
  write_loft(dir / m.features, stacked);
  write_ply(dir / m.pointcloud, s.cloud);
  if (!m.agents.empty()) write_agent_tracks(dir / m.agents, s.agents);
  if (!m.dynamic_distances.empty()) write_dynamic_distances(dir / m.dynamic_distances, s.dynamic_distances);
  write_json(dir / "sequence.json", to_json(m));
}

inline SequenceData read_sequence(const fs::path& manifest_path) {
  SequenceData s;
  s.manifest = sequence_manifest_from_json(read_json(manifest_path));
  const fs::path dir = manifest_path.parent_path();
  const auto& m = s.manifest;
  {
    auto is = open_in(dir / m.poses);
    s.sequence.poses = read_trajectory(is);
  }
  const Tensor<float> stacked = read_loft(dir / m.features);
  require(stacked.rank() == 4 && stacked.dim(0) == s.sequence.poses.size(), ErrorCode::kShapeMismatch,
          "feature tensor does not hold one H x W x C map per pose");
  const Shape frame{stacked.dim(1), stacked.dim(2), stacked.dim(3)};
  const std::size_t per = shape_size(frame);
  for (std::size_t i = 0; i < stacked.dim(0); ++i)
    s.sequence.features.emplace_back(
        frame, std::vector<float>(stacked.data() + i * per, stacked.data() + (i + 1) * per));
  s.sequence.id = m.id;
  s.sequence.fps = m.fps;
  s.sequence.intrinsics = m.intrinsics;
  s.cloud = read_ply(dir / m.pointcloud);
  if (!m.agents.empty()) s.agents = read_agent_tracks(dir / m.agents);
  if (!m.dynamic_distances.empty()) s.dynamic_distances = read_dynamic_distances(dir / m.dynamic_distances);
  return s;
}

/// Top-level dataset listing: sequence manifest paths relative to the dataset root.
struct DatasetManifest {
  std::vector<std::string> sequences;
  std::vector<std::string> splits;  // "train" / "test" per sequence; may be empty
  json config = json::object();
};

inline void write_dataset_manifest(const fs::path& root, const DatasetManifest& d) {
  require(d.splits.empty() || d.splits.size() == d.sequences.size(), ErrorCode::kConfigInvalid,
          "dataset splits must match the sequence list");
  json j{{"sequences", d.sequences}, {"config", d.config}};
  if (!d.splits.empty()) j["splits"] = d.splits;
  write_json(root / "dataset.json", j);
}

inline DatasetManifest read_dataset_manifest(const fs::path& root) {
  const fs::path p = fs::is_directory(root) ? root / "dataset.json" : root;
  if (!fs::exists(p)) fail(ErrorCode::kIo, "missing dataset manifest " + p.string());
  const json j = read_json(p);
  DatasetManifest d;
  try {
    d.sequences = j.at("sequences").get<std::vector<std::string>>();
    d.config = j.value("config", json::object());
    if (j.contains("splits")) d.splits = j.at("splits").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, p.string() + ": " + e.what());
  }
  return d;
}

}  // namespace lookout::io
