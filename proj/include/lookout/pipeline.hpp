#pragma once

// Experiment plumbing behind the CLI: dataset simulation, training,
// evaluation against the baselines, and BEV plots.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lookout/baselines.hpp"
#include "lookout/datasim.hpp"
#include "lookout/error.hpp"
#include "lookout/evalkit.hpp"
#include "lookout/io.hpp"
#include "lookout/model.hpp"
#include "lookout/train.hpp"

namespace lookout::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "lookout 0.1.0";

/// --threads value, else LOOKOUT_THREADS, else 1.
inline std::size_t resolve_threads(std::optional<std::size_t> flag) {
  if (flag && *flag > 0) return *flag;
  if (const char* env = std::getenv("LOOKOUT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

/// Runs fn(i) for i < n on up to `threads` workers. Results must be written to
/// per-index slots; the first failing index (lowest i) is rethrown.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t w, std::size_t stride) {
    for (std::size_t i = w; i < n; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t t = std::max<std::size_t>(1, std::min(threads, n));
  if (t == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < t; ++w) pool.emplace_back(work, w, t);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E5ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Records what a subcommand did; every artifact it lists exists.
inline void write_run_manifest(const fs::path& dir, const std::string& command, const json& config, std::uint64_t seed,
                               const std::map<std::string, std::string>& artifacts, double wall_clock_s) {
  json a = json::object();
  for (const auto& [k, v] : artifacts) {
    require(fs::exists(v), ErrorCode::kIo, "run artifact " + v + " was not written");
    a[k] = v;
  }
  io::write_json(dir / "run_manifest.json", json{{"command", command},
                                                 {"config", config},
                                                 {"seed", seed},
                                                 {"artifacts", a},
                                                 {"tool_version", kToolVersion},
                                                 {"wall_clock_s", wall_clock_s}});
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline json to_json(const datasim::WindowConfig& w) {
  return {{"t1", w.t1}, {"t2", w.t2}, {"stride", w.stride}, {"dilation", w.dilation}};
}

inline datasim::WindowConfig window_from_json(const json& j) {
  datasim::WindowConfig w;
  w.t1 = j.value("t1", w.t1);
  w.t2 = j.value("t2", w.t2);
  w.stride = j.value("stride", w.stride);
  w.dilation = j.value("dilation", w.dilation);
  return w;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
  std::uint64_t seed = 0;
  int scenes = 4;
  int test_scenes = -1;  // -1: one in five, at least one when scenes > 1
  int agents = 4;
  int obstacles = 12;
  std::size_t channels = 8;
  datasim::WindowConfig window;
  fs::path out;
  std::size_t threads = 1;

  int resolved_test_scenes() const {
    if (test_scenes >= 0) return std::min(test_scenes, scenes);
    return scenes > 1 ? std::max(1, scenes / 5) : 0;
  }
};

inline json to_json(const SimulateOptions& o) {
  return {{"seed", o.seed},         {"scenes", o.scenes},     {"test_scenes", o.resolved_test_scenes()},
          {"agents", o.agents},     {"obstacles", o.obstacles}, {"channels", o.channels},
          {"window", to_json(o.window)}};
}

/// One scene and ego walk; scene and ego seeds are retried deterministically
/// until a walk keeps clearance and covers at least one clip.
inline io::SequenceData simulate_sequence(const SimulateOptions& o, int index) {
  datasim::SceneConfig sc;
  sc.n_agents = o.agents;
  sc.n_static_obstacles = o.obstacles;
  datasim::RenderConfig rc;
  rc.channels = o.channels;
  char id[32];
  std::snprintf(id, sizeof(id), "seq_%03d", index);
  for (std::uint64_t attempt = 0; attempt < 20; ++attempt) {
    const std::uint64_t scene_seed = mix_seed(o.seed, static_cast<std::uint64_t>(index) * 64 + attempt);
    const datasim::Scene scene = datasim::gen_scene(scene_seed, sc);
    for (std::uint64_t k = 0; k < 10; ++k) {
      Trajectory ego;
      try {
        ego = datasim::gen_ego_trajectory(scene, mix_seed(scene_seed, k));
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kNoFreePath) continue;
        throw;
      }
      if (!datasim::ego_clearance(scene, ego).ok() || ego.size() < o.window.span()) continue;
      io::SequenceData s;
      s.sequence = datasim::render_sequence(scene, ego, rc, id);
      s.cloud = datasim::filter_pointcloud({scene.static_points, scene.labels}, {.ground_height = scene.ground_height});
      s.agents = scene.agents;
      s.dynamic_distances = evalkit::camera_dynamic_distances(ego.poses, scene.agents);
      auto& m = s.manifest;
      m.id = id;
      m.frames = ego.size();
      m.intrinsics = s.sequence.intrinsics;
      m.scene_seed = scene_seed;
      m.ground_height = scene.ground_height;
      m.dynamic_distances = "dynamic_distances.txt";
      return s;
    }
  }
  fail(ErrorCode::kNoFreePath, std::string("could not simulate a valid walk for ") + id);
}

inline io::DatasetManifest run_simulate(const SimulateOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  require(o.scenes >= 1, ErrorCode::kConfigInvalid, "--scenes must be >= 1");
  require(o.agents >= 0 && o.obstacles >= 0, ErrorCode::kConfigInvalid, "--agents and obstacles must be >= 0");
  require(o.channels >= 1, ErrorCode::kConfigInvalid, "channels must be >= 1");
  require(!o.out.empty(), ErrorCode::kConfigInvalid, "--out is required");
  fs::create_directories(o.out);
  io::DatasetManifest d;
  d.sequences.resize(static_cast<std::size_t>(o.scenes));
  d.splits.resize(d.sequences.size());
  const int first_test = o.scenes - o.resolved_test_scenes();
  parallel_for(d.sequences.size(), o.threads, [&](std::size_t i) {
    const auto s = simulate_sequence(o, static_cast<int>(i));
    io::write_sequence(o.out / s.manifest.id, s);
    d.sequences[i] = s.manifest.id + "/sequence.json";
    d.splits[i] = static_cast<int>(i) >= first_test ? "test" : "train";
  });
  d.config = to_json(o);
  io::write_dataset_manifest(o.out, d);
  write_run_manifest(o.out, "simulate", d.config, o.seed, {{"dataset", (o.out / "dataset.json").string()}},
                     seconds_since(t0));
  return d;
}

// ---------------------------------------------------------------------------
// Dataset access

struct Dataset {
  fs::path root;
  io::DatasetManifest manifest;
  std::vector<io::SequenceData> sequences;
  datasim::WindowConfig window;

  std::size_t channels() const {
    return sequences.empty() || sequences[0].sequence.features.empty() ? 0 : sequences[0].sequence.features[0].dim(2);
  }
};

inline Dataset load_dataset(const fs::path& root, std::size_t threads = 1) {
  Dataset ds;
  ds.root = fs::is_directory(root) ? root : root.parent_path();
  ds.manifest = io::read_dataset_manifest(root);
  ds.window = window_from_json(ds.manifest.config.value("window", json::object()));
  ds.sequences.resize(ds.manifest.sequences.size());
  parallel_for(ds.sequences.size(), threads,
               [&](std::size_t i) { ds.sequences[i] = io::read_sequence(ds.root / ds.manifest.sequences[i]); });
  return ds;
}

/// Sequences of a split; all sequences when the dataset has none marked.
inline std::vector<std::size_t> split_sequences(const Dataset& ds, const std::string& split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.sequences.size(); ++i)
    if (i < ds.manifest.splits.size() && ds.manifest.splits[i] == split) out.push_back(i);
  if (out.empty())
    for (std::size_t i = 0; i < ds.sequences.size(); ++i) out.push_back(i);
  return out;
}

struct ClipRef {
  std::size_t sequence = 0;
  datasim::Clip clip;
};

/// Clips of a split in sequence order; `max_clips` > 0 truncates.
inline std::vector<ClipRef> split_clips(const Dataset& ds, const std::string& split, std::size_t max_clips = 0) {
  std::vector<ClipRef> out;
  for (std::size_t s : split_sequences(ds, split)) {
    const auto& seq = ds.sequences[s].sequence;
    if (seq.poses.size() < ds.window.span()) continue;
    for (auto& c : datasim::window_clips(seq, ds.window)) {
      if (max_clips && out.size() >= max_clips) return out;
      out.push_back({s, std::move(c)});
    }
  }
  return out;
}

inline std::vector<model::ClipSample> prepare_samples(const Dataset& ds, const std::vector<ClipRef>& clips,
                                                      const model::ModelConfig& cfg, std::size_t threads) {
  std::vector<model::ClipSample> out(clips.size());
  parallel_for(clips.size(), threads, [&](std::size_t i) {
    out[i] = model::prepare_sample(clips[i].clip, cfg, &ds.sequences[clips[i].sequence].cloud.points);
  });
  return out;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  fs::path data;
  fs::path config;  // optional JSON with "model" and "train" sections
  fs::path out;
  std::optional<std::int64_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<bool> goal;
  std::size_t max_clips = 0;
  bool resume = false;
  std::int64_t stop_after = -1;  // end early at this step, leaving a resumable checkpoint
  std::size_t threads = 1;
};

struct TrainArtifacts {
  fs::path checkpoint, log, config;
  model::TrainResult result;
  std::size_t clips = 0;
};

/// Model and training configs: tiny defaults (channels from the dataset),
/// then the config file, then flags.
inline std::pair<model::ModelConfig, model::TrainConfig> resolve_train_config(const TrainOptions& o, const Dataset& ds,
                                                                              std::size_t* max_clips) {
  model::ModelConfig base = model::ModelConfig::tiny();
  base.channels = ds.channels();
  base.t1 = ds.window.t1;
  base.t2 = ds.window.t2;
  json j = json::object();
  if (!o.config.empty()) j = io::read_json(o.config);
  model::ModelConfig mc = model::model_config_from_json(j.value("model", json::object()), base);
  model::TrainConfig tc = model::train_config_from_json(j.value("train", json::object()));
  *max_clips = j.value("max_train_clips", o.max_clips);
  if (o.max_clips) *max_clips = o.max_clips;
  if (o.steps) tc.steps = *o.steps;
  if (o.seed) tc.seed = *o.seed;
  if (o.goal) mc.goal_conditioned = *o.goal;
  tc.threads = o.threads;
  require(mc.t1 == ds.window.t1 && mc.t2 == ds.window.t2, ErrorCode::kConfigInvalid,
          "model T1/T2 do not match the dataset window");
  require(mc.channels == ds.channels(), ErrorCode::kConfigInvalid, "model channels do not match the dataset features");
  model::validate(mc);
  tc.schedule().validate();
  return {mc, tc};
}

inline TrainArtifacts run_train(const TrainOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  require(!o.data.empty() && !o.out.empty(), ErrorCode::kConfigInvalid, "--data and --out are required");
  const Dataset ds = load_dataset(o.data, o.threads);
  std::size_t max_clips = 0;
  const auto [mc, tc] = resolve_train_config(o, ds, &max_clips);
  const auto clips = split_clips(ds, "train", max_clips);
  require(!clips.empty(), ErrorCode::kConfigInvalid, "dataset has no training clips");
  const auto samples = prepare_samples(ds, clips, mc, o.threads);
  fs::create_directories(o.out);
  TrainArtifacts a;
  a.checkpoint = o.out / "checkpoint.bin";
  a.log = o.out / "train_log.csv";
  a.config = o.out / "config.json";
  json resolved{{"model", model::to_json(mc)}, {"train", model::to_json(tc)}, {"max_train_clips", max_clips}};
  io::write_json(a.config, resolved);
  model::TrainPaths paths{a.checkpoint, a.log, o.resume, o.stop_after};
  a.result = model::train(samples, mc, tc, paths);
  a.clips = samples.size();
  write_run_manifest(o.out, "train", resolved, tc.seed,
                     {{"checkpoint", a.checkpoint.string()}, {"log", a.log.string()}, {"config", a.config.string()},
                      {"dataset", (ds.root / "dataset.json").string()}},
                     seconds_since(t0));
  return a;
}

inline model::LookOut<float> load_model(const fs::path& checkpoint) {
  require(fs::exists(checkpoint), ErrorCode::kIo, "missing checkpoint " + checkpoint.string());
  const auto ck = ndiff::read_checkpoint(checkpoint.string());
  json meta;
  try {
    meta = json::parse(ck.metadata);
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, "checkpoint metadata is not JSON: " + std::string(e.what()));
  }
  require(meta.contains("model_config"), ErrorCode::kParse, "checkpoint lacks a model config");
  model::LookOut<float> net(model::model_config_from_json(meta["model_config"], model::ModelConfig::tiny()), 0);
  net.load(ck.params);
  return net;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  fs::path data;
  fs::path checkpoint;       // optional: "Ours"
  fs::path goal_checkpoint;  // optional: "Ours(+goal)"
  std::vector<std::string> baselines{"const_vel", "lin_ext", "astar"};
  fs::path report;           // output prefix: <report>.csv and <report>.txt
  fs::path predictions;      // optional directory for per-clip world trajectories
  std::string dynamic_mode = "tracks";
  std::size_t max_clips = 0;
  baselines::PlannerConfig planner;
  bool planner_step_from_window = true;  // step_dt = dilation / fps
  std::size_t threads = 1;
};

inline std::string method_name(const std::string& baseline) {
  if (baseline == "const_vel") return "Const_Vel";
  if (baseline == "lin_ext") return "Lin_Ext";
  if (baseline == "astar") return "A*";
  fail(ErrorCode::kConfigInvalid, "unknown baseline '" + baseline + "' (const_vel, lin_ext, astar)");
}

struct EvalOutput {
  evalkit::MetricsReport report;
  fs::path csv, table;
  std::size_t astar_fallbacks = 0;
};

inline std::string clip_key(const ClipRef& c) { return c.clip.sequence_id + ":" + std::to_string(c.clip.start); }

inline void write_prediction(const fs::path& path, const ClipRef& ref, const Dataset& ds, const CanonicalFrame& frame,
                             const std::vector<Pose>& canonical) {
  Trajectory t;
  for (std::size_t k = 0; k < canonical.size(); ++k) {
    const std::size_t f = ref.clip.frame_indices[ref.clip.t1 + k];
    t.push_back(ds.sequences[ref.sequence].sequence.poses.timestamps[f], from_canonical(canonical[k], frame));
  }
  auto os = io::open_out(path);
  os << "# clip " << ref.clip.sequence_id << " start " << ref.clip.start << " dilation " << ds.window.dilation << " t1 "
     << ref.clip.t1 << '\n';
  write_trajectory(os, t);
}

inline EvalOutput run_eval(const EvalOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  require(!o.data.empty() && !o.report.empty(), ErrorCode::kConfigInvalid, "--data and --report are required");
  require(o.dynamic_mode == "tracks" || o.dynamic_mode == "file", ErrorCode::kConfigInvalid,
          "--dynamic must be 'tracks' or 'file'");
  const Dataset ds = load_dataset(o.data, o.threads);
  const auto refs = split_clips(ds, "test", o.max_clips);
  require(!refs.empty(), ErrorCode::kConfigInvalid, "dataset has no evaluation clips");

  std::vector<evalkit::SceneContext> scenes(ds.sequences.size());
  parallel_for(scenes.size(), o.threads, [&](std::size_t i) {
    const auto& s = ds.sequences[i];
    scenes[i].statics = evalkit::StaticIndex(s.cloud.points);
    if (o.dynamic_mode == "file") {
      require(!s.dynamic_distances.empty(), ErrorCode::kMissingDynamicData, s.manifest.id + " has no dynamic distance file");
      scenes[i].dynamics = evalkit::DynamicSource::from_file(s.dynamic_distances);
    } else {
      scenes[i].dynamics = evalkit::DynamicSource::from_tracks(s.agents);
    }
  });

  std::vector<evalkit::EvalClip> clips(refs.size());
  std::vector<std::vector<Pose>> past(refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& c = refs[i].clip;
    auto& e = clips[i];
    e.key = clip_key(refs[i]);
    e.scene = refs[i].sequence;
    e.frame = canonical_frame_of(c.past_poses.back());
    for (const auto& p : c.future_poses) e.gt.push_back(to_canonical(p, e.frame));
    for (const auto& p : c.past_poses) past[i].push_back(to_canonical(p, e.frame));
    e.future_frames.assign(c.frame_indices.begin() + static_cast<std::ptrdiff_t>(c.t1), c.frame_indices.end());
  }
  auto blank = [&](const std::string& name) {
    evalkit::MethodPredictions m{name, {}, std::vector<std::vector<Pose>>(clips.size())};
    for (const auto& c : clips) m.keys.push_back(c.key);
    return m;
  };

  std::vector<evalkit::MethodPredictions> methods;
  model::ModelConfig grid_source = model::ModelConfig::tiny();
  auto run_model = [&](const fs::path& ckpt, const std::string& name) {
    const model::LookOut<float> net = load_model(ckpt);
    grid_source = net.config;
    require(net.config.t1 == ds.window.t1 && net.config.t2 == ds.window.t2, ErrorCode::kInconsistentClipSets,
            "checkpoint T1/T2 do not match the dataset window");
    auto m = blank(name);
    parallel_for(refs.size(), o.threads, [&](std::size_t i) {
      const auto s = model::prepare_sample(refs[i].clip, net.config, &ds.sequences[refs[i].sequence].cloud.points);
      m.poses[i] = model::predict(net, s);
    });
    methods.push_back(std::move(m));
  };
  if (!o.checkpoint.empty()) run_model(o.checkpoint, "Ours");
  if (!o.goal_checkpoint.empty()) run_model(o.goal_checkpoint, "Ours(+goal)");

  EvalOutput out;
  for (const auto& b : o.baselines) {
    auto m = blank(method_name(b));
    std::vector<int> fallback(refs.size(), 0);
    parallel_for(refs.size(), o.threads, [&](std::size_t i) {
      const std::size_t t2 = ds.window.t2;
      if (b == "const_vel") {
        m.poses[i] = baselines::const_vel(past[i], t2);
      } else if (b == "lin_ext") {
        m.poses[i] = baselines::lin_ext(past[i], t2);
      } else {
        baselines::PlannerConfig pc = o.planner;
        const auto& seq = ds.sequences[refs[i].sequence];
        pc.ground_y = seq.manifest.ground_height - clips[i].frame.origin.y();
        if (o.planner_step_from_window) pc.step_dt = static_cast<double>(ds.window.dilation) / seq.manifest.fps;
        const auto pts = baselines::band_points(to_canonical_points(seq.cloud.points, clips[i].frame), pc);
        const auto occ = build_occupancy(pts, grid_source.grid);
        try {
          m.poses[i] = baselines::astar_lin_ext(occ, past[i].back().t, clips[i].gt.back().t, past[i], t2, pc);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kStartBlocked) throw;
          m.poses[i] = baselines::lin_ext(past[i], t2);
          fallback[i] = 1;
        }
      }
    });
    for (int f : fallback) out.astar_fallbacks += static_cast<std::size_t>(f);
    methods.push_back(std::move(m));
  }

  out.report = evalkit::make_report(clips, methods, scenes);
  if (!o.report.parent_path().empty()) fs::create_directories(o.report.parent_path());
  out.csv = fs::path(o.report.string() + ".csv");
  out.table = fs::path(o.report.string() + ".txt");
  io::open_out(out.csv) << evalkit::to_csv(out.report);
  io::open_out(out.table) << evalkit::to_table(out.report);
  std::map<std::string, std::string> artifacts{{"report_csv", out.csv.string()}, {"report_table", out.table.string()}};
  if (!o.predictions.empty()) {
    fs::create_directories(o.predictions);
    for (const auto& m : methods) {
      std::string tag = m.name;
      for (char& ch : tag)
        if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
      for (std::size_t i = 0; i < refs.size(); ++i)
        write_prediction(o.predictions / (refs[i].clip.sequence_id + "_" + std::to_string(refs[i].clip.start) + "." + tag + ".txt"),
                         refs[i], ds, clips[i].frame, m.poses[i]);
    }
    artifacts["predictions"] = o.predictions.string();
  }
  json cfg{{"data", o.data.string()},
           {"checkpoint", o.checkpoint.string()},
           {"goal_checkpoint", o.goal_checkpoint.string()},
           {"baselines", o.baselines},
           {"dynamic", o.dynamic_mode},
           {"max_clips", o.max_clips},
           {"clips", refs.size()},
           {"astar_fallbacks", out.astar_fallbacks}};
  const fs::path dir = o.report.parent_path().empty() ? fs::path(".") : o.report.parent_path();
  write_run_manifest(dir, "eval", cfg, 0, artifacts, seconds_since(t0));
  return out;
}

// ---------------------------------------------------------------------------
// plot

struct PlotOptions {
  fs::path sequence;  // sequence directory or its sequence.json
  fs::path pred;      // optional world-frame trajectory file
  fs::path out;
  std::optional<std::size_t> start;
  std::size_t dilation = 6, t1 = 8, t2 = 8;
  double cell = 0.2;
};

/// World-aligned grid over the cloud footprint used for the plot raster.
inline VoxelGridSpec plot_grid(const std::vector<Vec3>& cloud, double cell) {
  require(!cloud.empty(), ErrorCode::kEmptyCloud, "sequence point cloud is empty");
  Vec3 lo = cloud[0], hi = cloud[0];
  for (const auto& p : cloud) lo = lo.cwiseMin(p), hi = hi.cwiseMax(p);
  VoxelGridSpec g;
  g.spacing = cell;
  g.origin = lo - Vec3::Constant(0.5 * cell);
  g.nx = static_cast<std::size_t>(std::floor((hi.x() - g.origin.x()) / cell)) + 1;
  g.ny = static_cast<std::size_t>(std::floor((hi.y() - g.origin.y()) / cell)) + 1;
  g.nz = static_cast<std::size_t>(std::floor((hi.z() - g.origin.z()) / cell)) + 1;
  g.nx = std::max<std::size_t>(g.nx, 2), g.ny = std::max<std::size_t>(g.ny, 2), g.nz = std::max<std::size_t>(g.nz, 2);
  return g;
}

inline std::string svg_color(double r, double g, double b) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", int(std::lround(255 * r)), int(std::lround(255 * g)),
                int(std::lround(255 * b)));
  return buf;
}

inline std::string plot_svg(const io::SequenceData& s, const std::vector<Pose>& past, const std::vector<Pose>& future,
                            const std::vector<Pose>& pred, double cell) {
  const VoxelGridSpec g = plot_grid(s.cloud.points, cell);
  const auto hm = evalkit::heightmap(build_occupancy(s.cloud.points, g));
  const auto gray = evalkit::heightmap_gray(hm);
  const double px = 10.0;  // pixels per cell
  const double width = static_cast<double>(g.nx) * px, height = static_cast<double>(g.nz) * px;
  auto sx = [&](double x) { return (x - g.origin.x()) / g.spacing * px; };
  auto sy = [&](double z) { return height - (z - g.origin.z()) / g.spacing * px; };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" viewBox=\"0 0 "
     << width << ' ' << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"#000000\"/>\n<g id=\"heightmap\">\n";
  for (std::size_t iz = 0; iz < g.nz; ++iz)
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
      const int v = gray[iz * g.nx + ix];
      if (!v) continue;
      os << "<rect x=\"" << ix * px << "\" y=\"" << height - (iz + 1) * px << "\" width=\"" << px << "\" height=\"" << px
         << "\" fill=\"rgb(" << v << ',' << v << ',' << v << ")\" data-cell=\"" << iz << ',' << ix << "\" data-value=\"" << v
         << "\"/>\n";
    }
  os << "</g>\n";
  auto gradient = [&](const std::string& id, const std::vector<Pose>& poses, std::array<double, 3> a, std::array<double, 3> b) {
    if (poses.size() < 2) return;
    os << "<linearGradient id=\"" << id << "\" gradientUnits=\"userSpaceOnUse\" x1=\"" << sx(poses.front().t.x())
       << "\" y1=\"" << sy(poses.front().t.z()) << "\" x2=\"" << sx(poses.back().t.x()) << "\" y2=\""
       << sy(poses.back().t.z()) << "\"><stop offset=\"0\" stop-color=\"" << svg_color(a[0], a[1], a[2])
       << "\"/><stop offset=\"1\" stop-color=\"" << svg_color(b[0], b[1], b[2]) << "\"/></linearGradient>\n";
  };
  os << "<defs>\n";
  gradient("gt_grad", future, {0.1, 0.4, 1.0}, {0.1, 0.9, 0.3});
  gradient("pred_grad", pred, {1.0, 0.35, 0.7}, {1.0, 0.6, 0.1});
  os << "</defs>\n";
  auto polyline = [&](const std::string& id, const std::vector<Pose>& poses, const std::string& stroke) {
    if (poses.empty()) return;
    os << "<polyline id=\"" << id << "\" fill=\"none\" stroke-width=\"3\" stroke=\"" << stroke << "\" points=\"";
    for (std::size_t i = 0; i < poses.size(); ++i)
      os << (i ? " " : "") << format_number(sx(poses[i].t.x())) << ',' << format_number(sy(poses[i].t.z()));
    os << "\"/>\n";
  };
  polyline("past", past, "#ffffff");
  polyline("gt_future", future, future.size() < 2 ? "#1a66ff" : "url(#gt_grad)");
  polyline("prediction", pred, pred.size() < 2 ? "#ff59b3" : "url(#pred_grad)");
  os << "</svg>\n";
  return os.str();
}

inline fs::path run_plot(const PlotOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  require(!o.sequence.empty() && !o.out.empty(), ErrorCode::kConfigInvalid, "--sequence and --out are required");
  const fs::path manifest = fs::is_directory(o.sequence) ? o.sequence / "sequence.json" : o.sequence;
  require(fs::exists(manifest), ErrorCode::kIo, "missing sequence " + manifest.string());
  const auto s = io::read_sequence(manifest);
  std::vector<Pose> pred;
  std::size_t start = o.start.value_or(0), dilation = o.dilation, t1 = o.t1;
  if (!o.pred.empty()) {
    require(fs::exists(o.pred), ErrorCode::kIo, "missing prediction file " + o.pred.string());
    const std::string text = io::read_text(o.pred);
    std::istringstream is(text);
    pred = read_trajectory(is).poses;
    // Clip placement from the file header unless given explicitly.
    const auto pos = text.find("# clip ");
    if (pos != std::string::npos) {
      std::istringstream h(text.substr(pos + 7, text.find('\n', pos) - pos - 7));
      std::string id, k1, k2, k3;
      std::size_t st = 0, dl = 0, tt = 0;
      if (h >> id >> k1 >> st >> k2 >> dl >> k3 >> tt) {
        if (!o.start) start = st;
        dilation = dl;
        t1 = tt;
      }
    }
  }
  const auto& poses = s.sequence.poses.poses;
  std::vector<Pose> past, future;
  for (std::size_t k = 0; k < t1 + o.t2; ++k) {
    const std::size_t f = start + k * dilation;
    if (f >= poses.size()) break;
    (k < t1 ? past : future).push_back(poses[f]);
  }
  if (!o.out.parent_path().empty()) fs::create_directories(o.out.parent_path());
  io::open_out(o.out) << plot_svg(s, past, future, pred, o.cell);
  (void)t0;
  return o.out;
}

}  // namespace lookout::pipeline
