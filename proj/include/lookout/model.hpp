#pragma once

// The forecasting network: parameter-free lifting of frame features into a
// canonical voxel volume, temporal averaging, BEV squeeze, BEV Net and the
// pose head, plus the ablation variants and sample preparation from clips.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lookout/datasim.hpp"
#include "lookout/error.hpp"
#include "lookout/geom.hpp"
#include "lookout/grid.hpp"
#include "lookout/ndiff.hpp"
#include "lookout/tensor.hpp"

namespace lookout::model {

using ndiff::Param;

// ---------------------------------------------------------------------------
// Unprojection.

/// Rigid map from canonical coordinates into a camera: cam = m * p + t.
struct CameraFromCanonical {
  std::array<double, 9> m{};  // row-major
  std::array<double, 3> t{};
};

inline CameraFromCanonical camera_from_canonical(const Pose& camera, const CanonicalFrame& frame) {
  const Mat3 rc = camera.rotation();
  const Vec3 d = frame.origin - camera.t;
  CameraFromCanonical out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += rc(k, i) * frame.axes(k, j);
      out.m[i * 3 + j] = acc;
    }
    double acc = 0;
    for (int k = 0; k < 3; ++k) acc += rc(k, i) * d(k);
    out.t[i] = acc;
  }
  return out;
}

inline constexpr double kMinDepth = 1e-4;

/// Per-voxel bilinear taps into one feature map. corner[4v + k] < 0 marks a
/// voxel outside the frustum.
struct LiftPlan {
  std::size_t height = 0, width = 0;
  std::vector<std::int32_t> corner;
  std::vector<float> weight;

  bool visible(std::size_t v) const { return corner[4 * v] >= 0; }
};

inline LiftPlan plan_lift(const datasim::Intrinsics& k, std::size_t height, std::size_t width, const Pose& camera,
                          const CanonicalFrame& frame, const VoxelGridSpec& grid) {
  grid.validate();
  const CameraFromCanonical x = camera_from_canonical(camera, frame);
  LiftPlan plan;
  plan.height = height;
  plan.width = width;
  const std::size_t n = grid.voxels();
  plan.corner.assign(4 * n, -1);
  plan.weight.assign(4 * n, 0.0f);
  const double wd = static_cast<double>(width), hd = static_cast<double>(height);
  const auto wmax = static_cast<std::int64_t>(width) - 1, hmax = static_cast<std::int64_t>(height) - 1;
  // Voxel center coordinates per axis.
  std::vector<double> cx(grid.nx), cy(grid.ny), cz(grid.nz);
  for (std::size_t i = 0; i < grid.nx; ++i) cx[i] = grid.origin.x() + (static_cast<double>(i) + 0.5) * grid.spacing;
  for (std::size_t i = 0; i < grid.ny; ++i) cy[i] = grid.origin.y() + (static_cast<double>(i) + 0.5) * grid.spacing;
  for (std::size_t i = 0; i < grid.nz; ++i) cz[i] = grid.origin.z() + (static_cast<double>(i) + 0.5) * grid.spacing;
  std::size_t v = 0;
  for (std::size_t iz = 0; iz < grid.nz; ++iz)
    for (std::size_t iy = 0; iy < grid.ny; ++iy)
      for (std::size_t ix = 0; ix < grid.nx; ++ix, ++v) {
        const double px = cx[ix], py = cy[iy], pz = cz[iz];
        const double camx = x.m[0] * px + x.m[1] * py + x.m[2] * pz + x.t[0];
        const double camy = x.m[3] * px + x.m[4] * py + x.m[5] * pz + x.t[1];
        const double camz = x.m[6] * px + x.m[7] * py + x.m[8] * pz + x.t[2];
        if (!(camz > kMinDepth)) continue;
        const double u = k.cx + k.fx * camx / camz;
        const double w = k.cy - k.fy * camy / camz;
        if (!(u >= 0.0 && u < wd && w >= 0.0 && w < hd)) continue;
        // Pixel (r, c) has its center at (c + 0.5, r + 0.5).
        const double su = u - 0.5, sv = w - 0.5;
        const double fu = std::floor(su), fv = std::floor(sv);
        const double au = su - fu, av = sv - fv;
        const auto c0 = static_cast<std::int64_t>(fu), r0 = static_cast<std::int64_t>(fv);
        const std::int64_t cl = std::clamp<std::int64_t>(c0, 0, wmax), ch = std::clamp<std::int64_t>(c0 + 1, 0, wmax);
        const std::int64_t rl = std::clamp<std::int64_t>(r0, 0, hmax), rh = std::clamp<std::int64_t>(r0 + 1, 0, hmax);
        std::int32_t* c = plan.corner.data() + 4 * v;
        float* wt = plan.weight.data() + 4 * v;
        c[0] = static_cast<std::int32_t>(rl * static_cast<std::int64_t>(width) + cl);
        c[1] = static_cast<std::int32_t>(rl * static_cast<std::int64_t>(width) + ch);
        c[2] = static_cast<std::int32_t>(rh * static_cast<std::int64_t>(width) + cl);
        c[3] = static_cast<std::int32_t>(rh * static_cast<std::int64_t>(width) + ch);
        wt[0] = static_cast<float>((1.0 - av) * (1.0 - au));
        wt[1] = static_cast<float>((1.0 - av) * au);
        wt[2] = static_cast<float>(av * (1.0 - au));
        wt[3] = static_cast<float>(av * au);
      }
  return plan;
}

template <typename T = float>
struct FeatureVolume {
  Tensor<T> features;    // Z x Y x X x C
  Tensor<T> visibility;  // Z x Y x X, frame-hit counts
};

template <typename T>
FeatureVolume<T> apply_lift(const LiftPlan& plan, const Tensor<T>& map, const VoxelGridSpec& grid) {
  require(map.rank() == 3 && map.dim(0) == plan.height && map.dim(1) == plan.width, ErrorCode::kShapeMismatch,
          "feature map does not match the lift plan");
  const std::size_t c = map.dim(2), n = grid.voxels();
  FeatureVolume<T> out{Tensor<T>(Shape{grid.nz, grid.ny, grid.nx, c}), Tensor<T>(Shape{grid.nz, grid.ny, grid.nx})};
  for (std::size_t v = 0; v < n; ++v) {
    if (!plan.visible(v)) continue;
    out.visibility[v] = T(1);
    const std::int32_t* k = plan.corner.data() + 4 * v;
    const float* w = plan.weight.data() + 4 * v;
    const T* f0 = map.data() + static_cast<std::size_t>(k[0]) * c;
    const T* f1 = map.data() + static_cast<std::size_t>(k[1]) * c;
    const T* f2 = map.data() + static_cast<std::size_t>(k[2]) * c;
    const T* f3 = map.data() + static_cast<std::size_t>(k[3]) * c;
    T* o = out.features.data() + v * c;
    const T w0 = static_cast<T>(w[0]), w1 = static_cast<T>(w[1]), w2 = static_cast<T>(w[2]), w3 = static_cast<T>(w[3]);
    for (std::size_t ch = 0; ch < c; ++ch) o[ch] = w0 * f0[ch] + w1 * f1[ch] + w2 * f2[ch] + w3 * f3[ch];
  }
  return out;
}

/// Gradient of a lifted volume with respect to the feature map it was sampled from.
template <typename T>
Tensor<T> lift_backward(const LiftPlan& plan, const Tensor<T>& dvolume, std::size_t channels) {
  Tensor<T> dmap(Shape{plan.height, plan.width, channels});
  const std::size_t n = plan.corner.size() / 4;
  require(dvolume.size() == n * channels, ErrorCode::kShapeMismatch, "volume gradient does not match the lift plan");
  for (std::size_t v = 0; v < n; ++v) {
    if (!plan.visible(v)) continue;
    const T* g = dvolume.data() + v * channels;
    for (int q = 0; q < 4; ++q) {
      T* d = dmap.data() + static_cast<std::size_t>(plan.corner[4 * v + q]) * channels;
      const T w = static_cast<T>(plan.weight[4 * v + q]);
      for (std::size_t ch = 0; ch < channels; ++ch) d[ch] += w * g[ch];
    }
  }
  return dmap;
}

inline FeatureVolume<float> unproject_frame(const datasim::FrameObservation& obs, const CanonicalFrame& frame,
                                            const VoxelGridSpec& grid) {
  const auto& m = obs.feature_map;
  require(m.rank() == 3, ErrorCode::kShapeMismatch, "feature map must be H x W x C");
  return apply_lift(plan_lift(obs.intrinsics, m.dim(0), m.dim(1), obs.pose, frame, grid), m, grid);
}

enum class TemporalMode { kVisible, kStrict };

template <typename T>
FeatureVolume<T> aggregate_temporal(const std::vector<FeatureVolume<T>>& volumes, TemporalMode mode = TemporalMode::kVisible) {
  require(!volumes.empty(), ErrorCode::kGridMismatch, "no volumes to aggregate");
  const Shape& fs = volumes[0].features.shape();
  for (const auto& v : volumes)
    if (v.features.shape() != fs || v.visibility.shape() != volumes[0].visibility.shape())
      fail(ErrorCode::kGridMismatch, "volumes have different grids");
  FeatureVolume<T> out{Tensor<T>(fs), Tensor<T>(volumes[0].visibility.shape())};
  const std::size_t c = fs.back(), n = out.visibility.size();
  for (const auto& v : volumes) {
    for (std::size_t i = 0; i < out.features.size(); ++i) out.features[i] += v.features[i];
    for (std::size_t i = 0; i < n; ++i) out.visibility[i] += v.visibility[i];
  }
  const T frames = static_cast<T>(volumes.size());
  for (std::size_t i = 0; i < n; ++i) {
    const T div = mode == TemporalMode::kStrict ? frames : out.visibility[i];
    // Never-seen voxels carry no features.
    for (std::size_t ch = 0; ch < c; ++ch) out.features[i * c + ch] = div == T(0) ? T(0) : out.features[i * c + ch] / div;
  }
  return out;
}

/// d(aggregate)/d(each input volume's features); identical for every frame.
template <typename T>
Tensor<T> aggregate_backward(const Tensor<T>& visibility_sum, std::size_t frames, const Tensor<T>& dout,
                             TemporalMode mode = TemporalMode::kVisible) {
  Tensor<T> d(dout.shape());
  const std::size_t n = visibility_sum.size(), c = dout.size() / n;
  for (std::size_t i = 0; i < n; ++i) {
    const T div = mode == TemporalMode::kStrict ? static_cast<T>(frames) : visibility_sum[i];
    if (div == T(0)) continue;
    for (std::size_t ch = 0; ch < c; ++ch) d[i * c + ch] = dout[i * c + ch] / div;
  }
  return d;
}

// ---------------------------------------------------------------------------
// BEV squeeze: each (z, x) column's Y x C values through one linear map.

template <typename T>
Tensor<T> columns_of(const Tensor<T>& volume) {
  require(volume.rank() == 4, ErrorCode::kShapeMismatch, "volume must be Z x Y x X x C");
  const std::size_t nz = volume.dim(0), ny = volume.dim(1), nx = volume.dim(2), c = volume.dim(3);
  Tensor<T> cols(Shape{nz, nx, ny * c});
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x)
        std::copy_n(volume.data() + ((z * ny + y) * nx + x) * c, c, cols.data() + (z * nx + x) * ny * c + y * c);
  return cols;
}

template <typename T>
Tensor<T> columns_backward(const Tensor<T>& dcols, const Shape& volume_shape) {
  const std::size_t nz = volume_shape[0], ny = volume_shape[1], nx = volume_shape[2], c = volume_shape[3];
  Tensor<T> d(volume_shape);
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x)
        std::copy_n(dcols.data() + (z * nx + x) * ny * c + y * c, c, d.data() + ((z * ny + y) * nx + x) * c);
  return d;
}

template <typename T>
Tensor<T> bev_squeeze(const Tensor<T>& volume, const Tensor<T>& w, const Tensor<T>& b) {
  require(volume.rank() == 4, ErrorCode::kShapeMismatch, "volume must be Z x Y x X x C");
  require(w.rank() == 2 && w.dim(0) == volume.dim(1) * volume.dim(3), ErrorCode::kShapeMismatch,
          "squeeze weights must be (Y*C) x C'");
  return ndiff::linear(columns_of(volume), w, b);
}

// ---------------------------------------------------------------------------
// Configuration.

enum class Variant { kFull, kPooling2DOnly, kConv3D };

struct ModelConfig {
  VoxelGridSpec grid;
  std::size_t image_height = 16, image_width = 16;
  std::size_t channels = 384;          // feature channels per frame
  std::size_t t1 = 8, t2 = 8;
  std::size_t bev_modules = 11;
  std::size_t base_width = 384;        // doubles twice across the modules
  std::size_t final_width = 0;         // override for the last stage (0 keeps 4 x base)
  std::size_t mlp_ratio = 2;           // hidden expansion of the module MLP
  std::size_t squeeze_width = 0;       // BEV channels after squeeze (0 keeps the volume channels)
  std::array<std::size_t, 2> head_hidden{512, 512};
  bool goal_conditioned = false;
  bool concat_occupancy = false;
  bool raw_features = false;           // documents the encoder-free variant; features are already raw
  bool visibility_channel = true;      // append the visible-frame fraction as a channel
  Variant variant = Variant::kFull;
  TemporalMode temporal = TemporalMode::kVisible;
  ndiff::PoseLossWeights loss;

  /// Desk-scale configuration trained by the tests and the default CLI run.
  static ModelConfig tiny() {
    ModelConfig c;
    c.grid = VoxelGridSpec::tiny();
    c.channels = 8;
    c.base_width = 16;
    c.squeeze_width = 16;
    c.head_hidden = {64, 64};
    return c;
  }

  std::size_t volume_channels() const {
    return channels + (visibility_channel ? 1 : 0) + (concat_occupancy ? 1 : 0);
  }
  std::size_t bev_channels() const {
    if (variant == Variant::kPooling2DOnly) return channels;
    return squeeze_width ? squeeze_width : volume_channels();
  }
  std::size_t module_width(std::size_t i) const {
    const std::size_t stage = (3 * i) / bev_modules;
    if (stage >= 2 && final_width) return final_width;
    return base_width << stage;
  }
  std::size_t head_input() const { return module_width(bev_modules - 1) + (goal_conditioned ? 3 : 0); }
  /// BEV Net input side length for the active variant.
  std::pair<std::size_t, std::size_t> bev_input_dims() const {
    if (variant == Variant::kPooling2DOnly) return {image_height, image_width};
    return {grid.nz, grid.nx};
  }
};

/// Number of stride-2 modules needed to reach a side length <= 3.
inline std::size_t stride_count(std::size_t side) {
  std::size_t h = 0;
  while (side > 3) side = (side - 1) / 2 + 1, ++h;
  return h;
}

/// Modules that downsample, spread evenly through the stack.
inline std::vector<std::size_t> stride_positions(std::size_t modules, std::size_t strides) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < strides; ++j) out.push_back(((2 * j + 1) * modules) / (2 * strides));
  return out;
}

inline void validate(const ModelConfig& c) {
  c.grid.validate();
  require(c.channels > 0 && c.base_width > 0 && c.mlp_ratio > 0 && c.head_hidden[0] > 0 && c.head_hidden[1] > 0,
          ErrorCode::kConfigInvalid, "model widths must be positive");
  require(c.t1 >= 1 && c.t2 >= 1, ErrorCode::kConfigInvalid, "T1 and T2 must be >= 1");
  require(c.bev_modules >= 1, ErrorCode::kConfigInvalid, "BEV Net needs at least one module");
  const auto [h, w] = c.bev_input_dims();
  require(h == w, ErrorCode::kConfigInvalid, "BEV input must be square");
  require(stride_count(h) <= c.bev_modules, ErrorCode::kConfigInvalid, "too few BEV modules for the spatial reduction");
  if (c.variant != Variant::kPooling2DOnly) {
    std::size_t s = h;
    for (std::size_t k = 0; k < stride_count(h); ++k) s = (s - 1) / 2 + 1;
    require(s == 3, ErrorCode::kConfigInvalid, "grid Z/X must reduce to exactly 3 x 3 (use 3 * 2^k voxels)");
  }
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kPooling2DOnly: return "pooling_2d_only";
    case Variant::kConv3D: return "conv3d";
  }
  return "full";
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"grid",
           {{"nz", c.grid.nz},
            {"ny", c.grid.ny},
            {"nx", c.grid.nx},
            {"spacing", c.grid.spacing},
            {"origin", {c.grid.origin.x(), c.grid.origin.y(), c.grid.origin.z()}}}},
          {"image_height", c.image_height},
          {"image_width", c.image_width},
          {"channels", c.channels},
          {"t1", c.t1},
          {"t2", c.t2},
          {"bev_modules", c.bev_modules},
          {"base_width", c.base_width},
          {"final_width", c.final_width},
          {"mlp_ratio", c.mlp_ratio},
          {"squeeze_width", c.squeeze_width},
          {"head_hidden", {c.head_hidden[0], c.head_hidden[1]}},
          {"goal_conditioned", c.goal_conditioned},
          {"concat_occupancy", c.concat_occupancy},
          {"raw_features", c.raw_features},
          {"visibility_channel", c.visibility_channel},
          {"variant", to_string(c.variant)},
          {"temporal", c.temporal == TemporalMode::kStrict ? "strict_paper" : "visible"},
          {"lambda_trans", c.loss.trans},
          {"lambda_rot", c.loss.rot},
          {"rotation_loss", c.loss.form == ndiff::RotationLossForm::kLiteral ? "literal" : "relative"}};
}

/// Reads a config JSON; missing keys keep the values of `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = ModelConfig::tiny()) {
  try {
    ModelConfig c = base;
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      c.grid.nz = g.value("nz", c.grid.nz);
      c.grid.ny = g.value("ny", c.grid.ny);
      c.grid.nx = g.value("nx", c.grid.nx);
      c.grid.spacing = g.value("spacing", c.grid.spacing);
      if (g.contains("origin")) c.grid.origin = Vec3(g["origin"][0], g["origin"][1], g["origin"][2]);
    }
    c.image_height = j.value("image_height", c.image_height);
    c.image_width = j.value("image_width", c.image_width);
    c.channels = j.value("channels", c.channels);
    c.t1 = j.value("t1", c.t1);
    c.t2 = j.value("t2", c.t2);
    c.bev_modules = j.value("bev_modules", c.bev_modules);
    c.base_width = j.value("base_width", c.base_width);
    c.final_width = j.value("final_width", c.final_width);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.squeeze_width = j.value("squeeze_width", c.squeeze_width);
    if (j.contains("head_hidden")) c.head_hidden = {j["head_hidden"][0], j["head_hidden"][1]};
    c.goal_conditioned = j.value("goal_conditioned", c.goal_conditioned);
    c.concat_occupancy = j.value("concat_occupancy", c.concat_occupancy);
    c.raw_features = j.value("raw_features", c.raw_features);
    c.visibility_channel = j.value("visibility_channel", c.visibility_channel);
    const std::string variant = j.value("variant", to_string(c.variant));
    if (variant == "full") c.variant = Variant::kFull;
    else if (variant == "pooling_2d_only") c.variant = Variant::kPooling2DOnly;
    else if (variant == "conv3d") c.variant = Variant::kConv3D;
    else fail(ErrorCode::kConfigInvalid, "unknown variant '" + variant + "'");
    const std::string temporal = j.value("temporal", std::string(c.temporal == TemporalMode::kStrict ? "strict_paper" : "visible"));
    if (temporal != "visible" && temporal != "strict_paper") fail(ErrorCode::kConfigInvalid, "unknown temporal mode '" + temporal + "'");
    c.temporal = temporal == "strict_paper" ? TemporalMode::kStrict : TemporalMode::kVisible;
    c.loss.trans = j.value("lambda_trans", c.loss.trans);
    c.loss.rot = j.value("lambda_rot", c.loss.rot);
    const std::string form = j.value("rotation_loss", std::string("relative"));
    if (form != "relative" && form != "literal") fail(ErrorCode::kConfigInvalid, "unknown rotation_loss '" + form + "'");
    c.loss.form = form == "literal" ? ndiff::RotationLossForm::kLiteral : ndiff::RotationLossForm::kRelative;
    validate(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfigInvalid, std::string("bad model config: ") + e.what());
  }
}

/// Symbolic shape trace of the forward pass, without allocating the volume.
inline std::vector<std::pair<std::string, Shape>> infer_shapes(const ModelConfig& c) {
  validate(c);
  std::vector<std::pair<std::string, Shape>> trace;
  trace.push_back({"frames", {c.t1, c.image_height, c.image_width, c.channels}});
  std::size_t side;
  if (c.variant == Variant::kPooling2DOnly) {
    trace.push_back({"pooled_frames", {c.image_height, c.image_width, c.channels}});
    side = c.image_height;
  } else {
    trace.push_back({"volume", {c.grid.nz, c.grid.ny, c.grid.nx, c.volume_channels()}});
    if (c.variant == Variant::kConv3D) {
      std::size_t y = c.grid.ny;
      while (y > 1) {
        y = (y - 1) / 2 + 1;
        trace.push_back({"conv3d", {c.grid.nz, y, c.grid.nx, c.bev_channels()}});
      }
    }
    trace.push_back({"bev", {c.grid.nz, c.grid.nx, c.bev_channels()}});
    side = c.grid.nz;
  }
  const auto strides = stride_positions(c.bev_modules, stride_count(side));
  for (std::size_t i = 0; i < c.bev_modules; ++i) {
    if (std::find(strides.begin(), strides.end(), i) != strides.end()) side = (side - 1) / 2 + 1;
    trace.push_back({"bev_module_" + std::to_string(i), {side, side, c.module_width(i)}});
  }
  trace.push_back({"pooled", {c.head_input()}});
  trace.push_back({"poses", {c.t2, 9}});
  return trace;
}

// ---------------------------------------------------------------------------
// Network.

/// Inputs for one clip. `volume` holds the aggregated (and optionally
/// augmented) features; `frames_mean` feeds the 2D-only variant.
template <typename T = float>
struct ModelInput {
  Tensor<T> volume;       // Z x Y x X x C_volume
  Tensor<T> frames_mean;  // H x W x C
  std::array<T, 3> goal{};
};

template <typename T>
struct BevModuleCache {
  Tensor<T> x, conv, ln, hidden, act;
};

template <typename T>
struct ForwardCache {
  Tensor<T> bev_in;  // input of the squeeze (columns) or of the first 3D conv
  std::vector<Tensor<T>> conv3d_in, conv3d_pre;
  Tensor<T> bev;
  std::vector<BevModuleCache<T>> modules;
  Tensor<T> bev_out, pooled, h1, l1, g1, h2, l2, g2;
};

template <typename T = float>
class LookOut {
 public:
  ModelConfig config;
  std::vector<Param<T>> params;

  LookOut() = default;
  LookOut(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
    validate(cfg);
    build(seed);
  }

  /// Rebinds to parameters loaded from a checkpoint, checking names and shapes.
  void load(const std::vector<Param<float>>& stored) {
    require(stored.size() == params.size(), ErrorCode::kShapeMismatch, "checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      require(stored[i].name == params[i].name && stored[i].value.shape() == params[i].value.shape(),
              ErrorCode::kShapeMismatch, "checkpoint parameter " + stored[i].name + " does not match " + params[i].name);
      params[i].value = stored[i].value.template cast<T>();
    }
  }

  void zero_grad() {
    for (auto& p : params) p.zero_grad();
  }

  const std::vector<std::size_t>& strides() const { return strides_; }

  Tensor<T> forward(const ModelInput<T>& in, ForwardCache<T>* cache = nullptr) const {
    using namespace ndiff;
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    const auto& cfg = config;
    if (cfg.variant == Variant::kPooling2DOnly) {
      require(in.frames_mean.shape() == Shape{cfg.image_height, cfg.image_width, cfg.channels}, ErrorCode::kShapeMismatch,
              "pooled frame features have the wrong shape");
      c.bev = in.frames_mean;
    } else {
      require(in.volume.shape() == Shape{cfg.grid.nz, cfg.grid.ny, cfg.grid.nx, cfg.volume_channels()},
              ErrorCode::kShapeMismatch, "feature volume has shape " + shape_string(in.volume.shape()));
      if (cfg.variant == Variant::kConv3D) {
        Tensor<T> x = in.volume;
        c.conv3d_in.clear();
        c.conv3d_pre.clear();
        for (std::size_t l = 0; l < conv3d_.size(); ++l) {
          c.conv3d_in.push_back(x);
          Tensor<T> pre = conv3d(x, p(conv3d_[l].first), p(conv3d_[l].second), kYStride);
          c.conv3d_pre.push_back(pre);
          x = gelu(pre);
        }
        c.bev = x.reshaped(Shape{cfg.grid.nz, cfg.grid.nx, x.dim(3)});
      } else {
        c.bev_in = columns_of(in.volume);
        c.bev = linear(c.bev_in, p(squeeze_w_), p(squeeze_b_));
      }
    }
    return predict_poses(bev_net(c.bev, &c), in.goal, &c);
  }

  /// BEV Net: the module stack from a Z x X x C' map to the final 3 x 3 map.
  Tensor<T> bev_net(const Tensor<T>& bev, ForwardCache<T>* cache = nullptr) const {
    using namespace ndiff;
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    Tensor<T> x = bev;
    c.modules.assign(modules_.size(), {});
    for (std::size_t i = 0; i < modules_.size(); ++i) {
      const auto& m = modules_[i];
      auto& mc = c.modules[i];
      mc.x = x;
      mc.conv = conv2d(x, p(m.conv_w), p(m.conv_b), Conv2dSpec{m.stride, 1});
      mc.ln = layernorm(mc.conv, p(m.ln_g), p(m.ln_b));
      mc.hidden = linear(mc.ln, p(m.fc1_w), p(m.fc1_b));
      mc.act = gelu(mc.hidden);
      x = linear(mc.act, p(m.fc2_w), p(m.fc2_b));
      x += mc.ln;
    }
    return x;
  }

  /// Head: spatial average of the BEV Net output, optional goal, 3-layer MLP.
  Tensor<T> predict_poses(const Tensor<T>& bev_out, const std::array<T, 3>& goal, ForwardCache<T>* cache = nullptr) const {
    using namespace ndiff;
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    const auto& cfg = config;
    c.bev_out = bev_out;
    std::vector<T> pooled = avg_pool_spatial(bev_out).storage();
    if (cfg.goal_conditioned) pooled.insert(pooled.end(), goal.begin(), goal.end());
    require(pooled.size() == cfg.head_input(), ErrorCode::kShapeMismatch, "head input width mismatch");
    const std::size_t width = pooled.size();
    c.pooled = Tensor<T>(Shape{1, width}, std::move(pooled));
    c.h1 = linear(c.pooled, p(head_[0]), p(head_[1]));
    c.l1 = layernorm(c.h1, p(head_[2]), p(head_[3]));
    c.g1 = gelu(c.l1);
    c.h2 = linear(c.g1, p(head_[4]), p(head_[5]));
    c.l2 = layernorm(c.h2, p(head_[6]), p(head_[7]));
    c.g2 = gelu(c.l2);
    return linear(c.g2, p(head_[8]), p(head_[9])).reshaped(Shape{cfg.t2, 9});
  }

  /// Accumulates parameter gradients for upstream gradient `dpred` (T2 x 9).
  /// Returns the gradient with respect to the network input (volume, or
  /// pooled frames for the 2D-only variant).
  Tensor<T> backward(const ForwardCache<T>& c, const Tensor<T>& dpred) {
    using namespace ndiff;
    const auto& cfg = config;
    Tensor<T> d = dpred.reshaped(Shape{1, cfg.t2 * 9});
    d = backprop_linear(c.g2, head_[8], head_[9], d);
    d = gelu_backward(c.l2, d);
    d = backprop_layernorm(c.h2, head_[6], head_[7], d);
    d = backprop_linear(c.g1, head_[4], head_[5], d);
    d = gelu_backward(c.l1, d);
    d = backprop_layernorm(c.h1, head_[2], head_[3], d);
    d = backprop_linear(c.pooled, head_[0], head_[1], d);
    const std::size_t width = c.bev_out.shape().back();
    Tensor<T> dpool(Shape{width}, std::vector<T>(d.data(), d.data() + width));
    Tensor<T> dx = avg_pool_spatial_backward(c.bev_out.shape(), dpool);
    for (std::size_t i = modules_.size(); i-- > 0;) {
      const auto& m = modules_[i];
      const auto& mc = c.modules[i];
      Tensor<T> dln = dx;  // residual branch
      Tensor<T> dact = backprop_linear(mc.act, m.fc2_w, m.fc2_b, dx);
      Tensor<T> dhidden = gelu_backward(mc.hidden, dact);
      dln += backprop_linear(mc.ln, m.fc1_w, m.fc1_b, dhidden);
      Tensor<T> dconv = backprop_layernorm(mc.conv, m.ln_g, m.ln_b, dln);
      auto g = conv2d_backward(mc.x, p(m.conv_w), dconv, Conv2dSpec{m.stride, 1});
      params[m.conv_w].grad += g.dk;
      params[m.conv_b].grad += g.db;
      dx = std::move(g.dx);
    }
    if (cfg.variant == Variant::kPooling2DOnly) return dx;
    if (cfg.variant == Variant::kConv3D) {
      Tensor<T> d3 = dx.reshaped(c.conv3d_pre.back().shape());
      for (std::size_t l = conv3d_.size(); l-- > 0;) {
        d3 = gelu_backward(c.conv3d_pre[l], d3);
        auto g = conv3d_backward(c.conv3d_in[l], p(conv3d_[l].first), d3, kYStride);
        params[conv3d_[l].first].grad += g.dk;
        params[conv3d_[l].second].grad += g.db;
        d3 = std::move(g.dx);
      }
      return d3;
    }
    Tensor<T> dcols = backprop_linear(c.bev_in, squeeze_w_, squeeze_b_, dx);
    return columns_backward(dcols, {cfg.grid.nz, cfg.grid.ny, cfg.grid.nx, cfg.volume_channels()});
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& q : params) n += q.value.size();
    return n;
  }

 private:
  struct ModuleIdx {
    std::size_t conv_w, conv_b, ln_g, ln_b, fc1_w, fc1_b, fc2_w, fc2_b, stride;
  };
  static constexpr ndiff::Conv3dSpec kYStride{{1, 2, 1}, {1, 1, 1}};

  std::size_t squeeze_w_ = 0, squeeze_b_ = 0;
  std::vector<std::pair<std::size_t, std::size_t>> conv3d_;
  std::vector<ModuleIdx> modules_;
  std::array<std::size_t, 10> head_{};
  std::vector<std::size_t> strides_;

  const Tensor<T>& p(std::size_t i) const { return params[i].value; }

  Tensor<T> backprop_linear(const Tensor<T>& x, std::size_t w, std::size_t b, const Tensor<T>& dy) {
    auto g = ndiff::linear_backward(x, params[w].value, dy);
    params[w].grad += g.dw;
    params[b].grad += g.db;
    return std::move(g.dx);
  }

  Tensor<T> backprop_layernorm(const Tensor<T>& x, std::size_t gamma, std::size_t beta, const Tensor<T>& dy) {
    auto g = ndiff::layernorm_backward(x, params[gamma].value, dy);
    params[gamma].grad += g.dgamma;
    params[beta].grad += g.dbeta;
    return std::move(g.dx);
  }

  void build(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto trunc = [&]() {
      double v;
      do v = normal(rng);
      while (std::abs(v) > 2.0);
      return static_cast<T>(0.02 * v);
    };
    auto weight = [&](const std::string& name, Shape shape) {
      Tensor<T> t(std::move(shape));
      for (auto& v : t.values()) v = trunc();
      params.emplace_back(name, std::move(t), false);
      return params.size() - 1;
    };
    auto constant = [&](const std::string& name, std::size_t n, T value, bool bias) {
      params.emplace_back(name, Tensor<T>(Shape{n}, value), bias);
      return params.size() - 1;
    };
    const auto& cfg = config;
    const std::size_t cb = cfg.bev_channels();
    if (cfg.variant == Variant::kFull) {
      squeeze_w_ = weight("squeeze.w", {cfg.grid.ny * cfg.volume_channels(), cb});
      squeeze_b_ = constant("squeeze.b", cb, T(0), true);
    } else if (cfg.variant == Variant::kConv3D) {
      std::size_t y = cfg.grid.ny, cin = cfg.volume_channels();
      for (std::size_t l = 0; y > 1; ++l) {
        y = (y - 1) / 2 + 1;
        const std::string n = "conv3d." + std::to_string(l);
        const auto w = weight(n + ".w", {3, 3, 3, cin, cb});
        conv3d_.push_back({w, constant(n + ".b", cb, T(0), true)});
        cin = cb;
      }
    }
    const auto [side, unused] = cfg.bev_input_dims();
    strides_ = stride_positions(cfg.bev_modules, stride_count(side));
    std::size_t cin = cb;
    for (std::size_t i = 0; i < cfg.bev_modules; ++i) {
      const std::size_t w = cfg.module_width(i), hid = w * cfg.mlp_ratio;
      const std::string n = "bev." + std::to_string(i);
      ModuleIdx m{};
      m.stride = std::find(strides_.begin(), strides_.end(), i) != strides_.end() ? 2 : 1;
      m.conv_w = weight(n + ".conv.w", {3, 3, cin, w});
      m.conv_b = constant(n + ".conv.b", w, T(0), true);
      m.ln_g = constant(n + ".ln.g", w, T(1), false);
      m.ln_b = constant(n + ".ln.b", w, T(0), true);
      m.fc1_w = weight(n + ".fc1.w", {w, hid});
      m.fc1_b = constant(n + ".fc1.b", hid, T(0), true);
      m.fc2_w = weight(n + ".fc2.w", {hid, w});
      m.fc2_b = constant(n + ".fc2.b", w, T(0), true);
      modules_.push_back(m);
      cin = w;
    }
    const std::size_t h1 = cfg.head_hidden[0], h2 = cfg.head_hidden[1], out = cfg.t2 * 9;
    head_[0] = weight("head.fc1.w", {cfg.head_input(), h1});
    head_[1] = constant("head.fc1.b", h1, T(0), true);
    head_[2] = constant("head.ln1.g", h1, T(1), false);
    head_[3] = constant("head.ln1.b", h1, T(0), true);
    head_[4] = weight("head.fc2.w", {h1, h2});
    head_[5] = constant("head.fc2.b", h2, T(0), true);
    head_[6] = constant("head.ln2.g", h2, T(1), false);
    head_[7] = constant("head.ln2.b", h2, T(0), true);
    head_[8] = weight("head.out.w", {h2, out});
    // Start from zero translation and identity rotation at every step.
    Tensor<T> bias(Shape{out});
    for (std::size_t t = 0; t < cfg.t2; ++t) {
      bias[t * 9 + 3] = T(1);
      bias[t * 9 + 7] = T(1);
    }
    params.emplace_back("head.out.b", std::move(bias), true);
    head_[9] = params.size() - 1;
  }
};

// ---------------------------------------------------------------------------
// Sample preparation.

struct ClipSample {
  ModelInput<float> input;
  Tensor<float> target;            // T2 x 9, canonical
  std::vector<Pose> past;          // T1, canonical
  std::vector<Pose> future;        // T2, canonical
  CanonicalFrame frame;
  std::string sequence_id;
  std::size_t start = 0;
  std::vector<std::size_t> frame_indices;
};

inline Tensor<float> poses_to_tensor(const std::vector<Pose>& poses) {
  Tensor<float> t(Shape{poses.size(), 9});
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const auto f = poses[i].flatten();
    for (int k = 0; k < 9; ++k) t[i * 9 + static_cast<std::size_t>(k)] = static_cast<float>(f[static_cast<std::size_t>(k)]);
  }
  return t;
}

inline std::vector<Pose> tensor_to_poses(const Tensor<float>& t) {
  require(t.rank() == 2 && t.dim(1) == 9, ErrorCode::kShapeMismatch, "pose tensor must be T x 9");
  std::vector<Pose> out;
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    std::array<double, 9> f;
    for (int k = 0; k < 9; ++k) f[static_cast<std::size_t>(k)] = t[i * 9 + static_cast<std::size_t>(k)];
    out.push_back(Pose::unflatten(f));
  }
  return out;
}

/// Lifts a clip into model inputs. `static_cloud` (world frame) is needed
/// only for the occupancy-concatenation variant.
inline ClipSample prepare_sample(const datasim::Clip& clip, const ModelConfig& cfg,
                                 const std::vector<Vec3>* static_cloud = nullptr) {
  require(clip.observations.size() == cfg.t1 && clip.future_poses.size() == cfg.t2, ErrorCode::kShapeMismatch,
          "clip step counts do not match the model config");
  ClipSample s;
  s.frame = canonical_frame_of(clip.past_poses.back());
  for (const auto& p : clip.past_poses) s.past.push_back(to_canonical(p, s.frame));
  for (const auto& p : clip.future_poses) s.future.push_back(to_canonical(p, s.frame));
  s.target = poses_to_tensor(s.future);
  s.input.goal = {static_cast<float>(s.future.back().t.x()), static_cast<float>(s.future.back().t.y()),
                  static_cast<float>(s.future.back().t.z())};
  s.sequence_id = clip.sequence_id;
  s.start = clip.start;
  s.frame_indices = clip.frame_indices;

  const auto& first = clip.observations[0].feature_map;
  require(first.shape() == Shape{cfg.image_height, cfg.image_width, cfg.channels}, ErrorCode::kShapeMismatch,
          "frame features " + shape_string(first.shape()) + " do not match the model config");
  Tensor<float> mean(first.shape());
  for (const auto& o : clip.observations) mean += o.feature_map;
  for (auto& v : mean.values()) v /= static_cast<float>(clip.observations.size());
  s.input.frames_mean = std::move(mean);
  if (cfg.variant == Variant::kPooling2DOnly) return s;

  std::vector<FeatureVolume<float>> vols;
  for (const auto& o : clip.observations) vols.push_back(unproject_frame(o, s.frame, cfg.grid));
  const FeatureVolume<float> agg = aggregate_temporal(vols, cfg.temporal);
  const std::size_t c = cfg.channels, cv = cfg.volume_channels(), n = cfg.grid.voxels();
  std::optional<OccupancyGrid> occ;
  if (cfg.concat_occupancy) {
    require(static_cloud != nullptr, ErrorCode::kConfigInvalid, "occupancy variant needs the static point cloud");
    occ = build_occupancy(to_canonical_points(*static_cloud, s.frame), cfg.grid);
  }
  Tensor<float> volume(Shape{cfg.grid.nz, cfg.grid.ny, cfg.grid.nx, cv});
  for (std::size_t v = 0; v < n; ++v) {
    float* o = volume.data() + v * cv;
    std::copy_n(agg.features.data() + v * c, c, o);
    std::size_t k = c;
    if (cfg.visibility_channel) o[k++] = agg.visibility[v] / static_cast<float>(cfg.t1);
    if (occ) o[k++] = occ->occupied[v] ? 1.0f : 0.0f;
  }
  s.input.volume = std::move(volume);
  return s;
}

}  // namespace lookout::model
