#include <gtest/gtest.h>

#include <chrono>
#include <map>

#include "grad_helpers.hpp"
#include "lookout/model.hpp"
#include "lookout/io.hpp"
#include "lookout/train.hpp"
#include "model_helpers.hpp"

using namespace lookout;
using namespace lookout::model;
using lookout::testing::random_tensor;

namespace {

datasim::FrameObservation make_obs(const Tensor<float>& map, const Pose& pose) {
  datasim::FrameObservation o;
  o.feature_map = map;
  o.pose = pose;
  o.intrinsics = datasim::RenderConfig{}.intrinsics();
  o.intrinsics.cx = 0.5 * double(map.dim(1));
  o.intrinsics.cy = 0.5 * double(map.dim(0));
  return o;
}

Pose random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  const Mat3 r = datasim::head_rotation(3.0 * u(rng), 0.3 * u(rng), 0.1 * u(rng));
  return Pose(Vec3(0.5 * u(rng), 1.6 + 0.1 * u(rng), 0.5 * u(rng) - 1.0), r);
}

ModelConfig small_config() {
  ModelConfig c = ModelConfig::tiny();
  c.base_width = 8;
  c.squeeze_width = 8;
  c.head_hidden = {16, 16};
  return c;
}

ModelInput<double> random_input(const ModelConfig& c, std::mt19937_64& rng) {
  ModelInput<double> in;
  in.volume = random_tensor<double>({c.grid.nz, c.grid.ny, c.grid.nx, c.volume_channels()}, rng);
  in.frames_mean = random_tensor<double>({c.image_height, c.image_width, c.channels}, rng);
  in.goal = {0.3, -0.1, 2.0};
  return in;
}

/// Sampled central-difference check of a smooth scalar loss over every
/// parameter tensor (up to `per_tensor` entries each) and the model input.
double check_model_gradients(const ModelConfig& cfg, std::uint64_t seed, std::size_t per_tensor) {
  std::mt19937_64 rng(seed);
  LookOut<double> net(cfg, seed);
  // Perturb parameters away from the init so LayerNorm gains and biases matter.
  for (auto& p : net.params)
    for (auto& v : p.value.values()) v += 0.05 * std::normal_distribution<double>(0, 1)(rng);
  ModelInput<double> in = random_input(cfg, rng);
  const Tensor<double> probe = random_tensor<double>({cfg.t2, 9}, rng);
  auto loss = [&]() { return ndiff::dot(net.forward(in), probe); };
  ForwardCache<double> cache;
  net.zero_grad();
  net.forward(in, &cache);
  const Tensor<double> dinput = net.backward(cache, probe);
  double worst = 0;
  const double h = 1e-6;
  auto probe_entry = [&](double& x, double analytic) {
    const double orig = x;
    x = orig + h;
    const double up = loss();
    x = orig - h;
    const double down = loss();
    x = orig;
    const double num = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(num - analytic) / std::max({std::abs(num), std::abs(analytic), 1e-6}));
  };
  for (auto& p : net.params) {
    std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
    for (std::size_t k = 0; k < std::min(per_tensor, p.value.size()); ++k) {
      const std::size_t i = pick(rng);
      probe_entry(p.value[i], p.grad[i]);
    }
  }
  Tensor<double>& x = cfg.variant == Variant::kPooling2DOnly ? in.frames_mean : in.volume;
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  for (std::size_t k = 0; k < 3 * per_tensor; ++k) {
    const std::size_t i = pick(rng);
    probe_entry(x[i], dinput[i]);
  }
  return worst;
}

}  // namespace

// ----------------------------------------------------------------------------
// Unprojection

TEST(Unproject, ConstantMapFillsFrustumOnly) {
  Tensor<float> map(Shape{16, 16, 2}, 3.0f);
  const Pose cam(Vec3(0, 0, 0), Mat3::Identity());
  const CanonicalFrame frame = canonical_frame_of(cam);
  const auto g = VoxelGridSpec::tiny();
  const auto vol = unproject_frame(make_obs(map, cam), frame, g);
  std::size_t inside = 0;
  for (std::size_t iz = 0; iz < g.nz; ++iz)
    for (std::size_t iy = 0; iy < g.ny; ++iy)
      for (std::size_t ix = 0; ix < g.nx; ++ix) {
        const Vec3 p = g.center(iz, iy, ix);
        const bool in = p.z() > 1e-4 && std::abs(p.x()) < p.z() && std::abs(p.y()) <= p.z();
        const std::size_t v = g.index(iz, iy, ix);
        if (std::abs(std::abs(p.x()) - p.z()) < 1e-9 || std::abs(std::abs(p.y()) - p.z()) < 1e-9) continue;
        EXPECT_EQ(vol.visibility[v], in ? 1.0f : 0.0f);
        if (in) EXPECT_NEAR(vol.features[2 * v], 3.0f, 1e-5);
        else EXPECT_EQ(vol.features[2 * v], 0.0f);
        inside += in;
      }
  EXPECT_GT(inside, 100u);
}

TEST(Unproject, PixelCenterAndMidpoint) {
  // One voxel grid whose single column sits on chosen rays.
  Tensor<float> map(Shape{4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) map[i] = static_cast<float>(i);
  const Pose cam(Vec3(0, 0, 0), Mat3::Identity());
  const CanonicalFrame frame = canonical_frame_of(cam);
  auto obs = make_obs(map, cam);
  obs.intrinsics = {2.0, 2.0, 2.0, 2.0};
  // Voxel at depth 1: u = 2 + 2x, v = 2 - 2y.
  auto sample = [&](double x, double y) {
    VoxelGridSpec g{2, 2, 2, 1e-3, Vec3(x - 0.5e-3, y - 0.5e-3, 1.0 - 0.5e-3)};
    const auto vol = unproject_frame(obs, frame, g);
    return vol.features[0];
  };
  // Pixel (1, 2) center is u = 2.5, v = 1.5.
  EXPECT_FLOAT_EQ(sample(0.25, 0.25), map[1 * 4 + 2]);
  // Midpoint between pixels (1, 1) and (1, 2): u = 2.0.
  EXPECT_FLOAT_EQ(sample(0.0, 0.25), 0.5f * (map[1 * 4 + 1] + map[1 * 4 + 2]));
}

TEST(Unproject, MatchesScalarOracleBitExactly) {
  std::mt19937_64 rng(17);
  const auto g = VoxelGridSpec::tiny();
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor<float> map = random_tensor<float>({16, 16, 5}, rng);
    const Pose last = random_pose(rng);
    const CanonicalFrame frame = canonical_frame_of(last);
    const auto obs = make_obs(map, random_pose(rng));
    const auto vol = unproject_frame(obs, frame, g);
    for (std::size_t iz = 0; iz < g.nz; ++iz)
      for (std::size_t iy = 0; iy < g.ny; ++iy)
        for (std::size_t ix = 0; ix < g.nx; ++ix) {
          bool vis;
          const auto expect = lookout::testing::oracle_voxel(obs, frame, g, iz, iy, ix, &vis);
          const std::size_t v = g.index(iz, iy, ix);
          ASSERT_EQ(vol.visibility[v], vis ? 1.0f : 0.0f);
          for (std::size_t c = 0; c < 5; ++c) ASSERT_EQ(vol.features[v * 5 + c], expect[c]) << trial;
        }
  }
}

TEST(Unproject, BackwardMatchesFiniteDifference) {
  std::mt19937_64 rng(5);
  VoxelGridSpec g{6, 3, 6, 0.5, Vec3(-1.5, -0.75, 0.2)};
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<double> map = random_tensor<double>({8, 8, 2}, rng);
    auto obs = make_obs(map.cast<float>(), random_pose(rng));
    obs.intrinsics = {4, 4, 4, 4};
    const CanonicalFrame frame = canonical_frame_of(Pose(obs.pose.t, Mat3::Identity()));
    const LiftPlan plan = plan_lift(obs.intrinsics, 8, 8, obs.pose, frame, g);
    const Tensor<double> probe = random_tensor<double>({6, 3, 6, 2}, rng);
    const auto dmap = lift_backward(plan, probe, 2);
    const double err = ndiff::grad_check([&](const std::vector<Tensor<double>>& in) {
      return ndiff::dot(apply_lift(plan, in[0], g).features, probe);
    }, {map}, {dmap}, 1e-3);
    EXPECT_LT(err, 1e-6);
  }
}

// ----------------------------------------------------------------------------
// Temporal aggregation

TEST(Aggregate, IdenticalVolumesAreIdempotent) {
  std::mt19937_64 rng(2);
  FeatureVolume<float> v{random_tensor<float>({3, 2, 3, 4}, rng), Tensor<float>(Shape{3, 2, 3}, 1.0f)};
  const auto out = aggregate_temporal(std::vector<FeatureVolume<float>>(8, v));
  for (std::size_t i = 0; i < v.features.size(); ++i) EXPECT_NEAR(out.features[i], v.features[i], 1e-6);
  EXPECT_EQ(out.visibility[0], 8.0f);
}

TEST(Aggregate, VisibleVersusStrictDivision) {
  std::vector<FeatureVolume<float>> vols(8, {Tensor<float>(Shape{1, 1, 1, 1}), Tensor<float>(Shape{1, 1, 1})});
  vols[3].features[0] = 2.0f;
  vols[3].visibility[0] = 1.0f;
  EXPECT_EQ(aggregate_temporal(vols, TemporalMode::kVisible).features[0], 2.0f);
  EXPECT_EQ(aggregate_temporal(vols, TemporalMode::kStrict).features[0], 0.25f);
  std::vector<FeatureVolume<float>> unseen(3, {Tensor<float>(Shape{1, 1, 1, 2}), Tensor<float>(Shape{1, 1, 1})});
  const auto z = aggregate_temporal(unseen);
  EXPECT_EQ(z.features[0], 0.0f);
  EXPECT_EQ(z.visibility[0], 0.0f);
}

TEST(Aggregate, MatchesBruteForceLoop) {
  std::mt19937_64 rng(9);
  std::bernoulli_distribution seen(0.6);
  for (auto mode : {TemporalMode::kVisible, TemporalMode::kStrict}) {
    std::vector<FeatureVolume<float>> vols;
    for (int t = 0; t < 8; ++t) {
      FeatureVolume<float> v{random_tensor<float>({4, 3, 4, 3}, rng), Tensor<float>(Shape{4, 3, 4})};
      for (std::size_t i = 0; i < 48; ++i) {
        v.visibility[i] = seen(rng) ? 1.0f : 0.0f;
        if (v.visibility[i] == 0) std::fill_n(v.features.data() + 3 * i, 3, 0.0f);
      }
      vols.push_back(v);
    }
    const auto out = aggregate_temporal(vols, mode);
    for (std::size_t i = 0; i < 48; ++i) {
      float n = 0;
      for (const auto& v : vols) n += v.visibility[i];
      ASSERT_EQ(out.visibility[i], n);
      for (std::size_t c = 0; c < 3; ++c) {
        float s = 0;
        for (const auto& v : vols) s += v.features[3 * i + c];
        const float div = mode == TemporalMode::kStrict ? 8.0f : n;
        ASSERT_EQ(out.features[3 * i + c], div == 0 ? 0.0f : s / div);
      }
    }
  }
  std::vector<FeatureVolume<float>> bad{{Tensor<float>(Shape{1, 1, 1, 1}), Tensor<float>(Shape{1, 1, 1})},
                                        {Tensor<float>(Shape{1, 1, 2, 1}), Tensor<float>(Shape{1, 1, 2})}};
  try {
    aggregate_temporal(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kGridMismatch);
  }
}

TEST(Aggregate, BackwardMatchesFiniteDifference) {
  std::mt19937_64 rng(4);
  std::bernoulli_distribution seen(0.6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mode = trial % 2 ? TemporalMode::kStrict : TemporalMode::kVisible;
    const std::size_t steps = lookout::testing::rand_dim(rng, 1, 4);
    const Shape cells{lookout::testing::rand_dim(rng, 1, 3), lookout::testing::rand_dim(rng, 1, 3),
                      lookout::testing::rand_dim(rng, 1, 3)};
    const std::size_t c = lookout::testing::rand_dim(rng, 1, 3);
    std::vector<Tensor<double>> feats;
    std::vector<Tensor<double>> vis;
    for (std::size_t t = 0; t < steps; ++t) {
      feats.push_back(random_tensor<double>({cells[0], cells[1], cells[2], c}, rng));
      Tensor<double> v(cells);
      for (auto& x : v.values()) x = seen(rng) ? 1.0 : 0.0;
      vis.push_back(v);
    }
    const Tensor<double> probe = random_tensor<double>({cells[0], cells[1], cells[2], c}, rng);
    auto run = [&](const std::vector<Tensor<double>>& f) {
      std::vector<FeatureVolume<double>> vols;
      for (std::size_t t = 0; t < steps; ++t) vols.push_back({f[t], vis[t]});
      return aggregate_temporal(vols, mode);
    };
    const auto agg = run(feats);
    const auto d = aggregate_backward(agg.visibility, steps, probe, mode);
    const double err = ndiff::grad_check([&](const std::vector<Tensor<double>>& f) { return ndiff::dot(run(f).features, probe); },
                                         feats, std::vector<Tensor<double>>(steps, d), 1e-6);
    EXPECT_LT(err, 1e-6);
  }
}

// ----------------------------------------------------------------------------
// Squeeze, BEV Net, head

TEST(Squeeze, ShapesAndAveragingWeights) {
  std::mt19937_64 rng(1);
  const Tensor<float> vol = random_tensor<float>({6, 4, 5, 3}, rng);
  const Tensor<float> w(Shape{12, 3}), b(Shape{3});
  EXPECT_EQ(bev_squeeze(vol, w, b).shape(), (Shape{6, 5, 3}));
  Tensor<float> avg(Shape{12, 3});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t c = 0; c < 3; ++c) avg[(y * 3 + c) * 3 + c] = 0.25f;
  const Tensor<float> constant(Shape{6, 4, 5, 3}, 1.5f);
  const Tensor<float> squeezed = bev_squeeze(constant, avg, b);
  for (float v : squeezed.values()) EXPECT_FLOAT_EQ(v, 1.5f);
  EXPECT_THROW(bev_squeeze(vol, Tensor<float>(Shape{11, 3}), b), Error);
}

TEST(Squeeze, ColumnLayoutIsYMajor) {
  Tensor<float> vol(Shape{1, 2, 1, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(columns_of(vol).storage(), (std::vector<float>{1, 2, 3, 4}));
  Tensor<float> vol2(Shape{1, 2, 2, 1}, std::vector<float>{1, 2, 3, 4});  // (y, x)
  EXPECT_EQ(columns_of(vol2).storage(), (std::vector<float>{1, 3, 2, 4}));
  EXPECT_EQ(columns_backward(columns_of(vol2), vol2.shape()), vol2);
}

TEST(Squeeze, GradientCheck) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t y = lookout::testing::rand_dim(rng, 1, 4), c = lookout::testing::rand_dim(rng, 1, 3);
    const auto x = random_tensor<double>({3, y, 2, c}, rng);
    const auto w = random_tensor<double>({y * c, 4}, rng);
    const auto b = random_tensor<double>({4}, rng);
    const auto probe = random_tensor<double>({3, 2, 4}, rng);
    auto g = ndiff::linear_backward(columns_of(x), w, probe);
    const auto dx = columns_backward(g.dx, x.shape());
    const double err = ndiff::grad_check(
        [&](const std::vector<Tensor<double>>& in) { return ndiff::dot(bev_squeeze(in[0], in[1], in[2]), probe); },
        {x, w, b}, {dx, g.dw, g.db}, 1e-6);
    EXPECT_LT(err, 1e-3);
  }
}

TEST(Config, DefaultShapeTraceEndsAtThreeByThree) {
  ModelConfig c;  // full-size defaults
  const auto trace = infer_shapes(c);
  std::map<std::string, Shape> at(trace.begin(), trace.end());
  EXPECT_EQ(at["frames"], (Shape{8, 16, 16, 384}));
  EXPECT_EQ(at["volume"], (Shape{96, 32, 96, 385}));
  EXPECT_EQ(at["bev"], (Shape{96, 96, 385}));
  EXPECT_EQ(at["bev_module_10"], (Shape{3, 3, 1536}));
  EXPECT_EQ(at["poses"], (Shape{8, 9}));
  c.visibility_channel = false;
  const auto plain = infer_shapes(c);
  std::map<std::string, Shape> p(plain.begin(), plain.end());
  EXPECT_EQ(p["volume"], (Shape{96, 32, 96, 384}));
  EXPECT_EQ(p["bev"], (Shape{96, 96, 384}));
  EXPECT_EQ(stride_positions(11, 5), (std::vector<std::size_t>{1, 3, 5, 7, 9}));
  EXPECT_EQ(c.module_width(0), 384u);
  EXPECT_EQ(c.module_width(5), 768u);
  EXPECT_EQ(c.module_width(10), 1536u);
  c.final_width = 1540;
  EXPECT_EQ(infer_shapes(c).back().second, (Shape{8, 9}));
  EXPECT_EQ(c.module_width(10), 1540u);
  EXPECT_NEAR(std::pow(VoxelGridSpec{}.spacing * 100, 3), 600.0, 1.0);
}

TEST(Config, TinyTraceAndValidation) {
  const ModelConfig c = ModelConfig::tiny();
  const auto trace = infer_shapes(c);
  std::map<std::string, Shape> at(trace.begin(), trace.end());
  EXPECT_EQ(at["volume"], (Shape{24, 8, 24, 9}));
  EXPECT_EQ(at["bev_module_1"], (Shape{12, 12, 16}));
  EXPECT_EQ(at["bev_module_10"], (Shape{3, 3, 64}));
  ModelConfig bad = c;
  bad.grid.nz = bad.grid.nx = 16;
  EXPECT_THROW(validate(bad), Error);
  ModelConfig two_d = c;
  two_d.variant = Variant::kPooling2DOnly;
  const auto t2 = infer_shapes(two_d);
  EXPECT_EQ(t2[t2.size() - 3].second, (Shape{2, 2, 64}));
}

TEST(Config, JsonRoundTrip) {
  ModelConfig c = ModelConfig::tiny();
  c.goal_conditioned = true;
  c.variant = Variant::kConv3D;
  c.temporal = TemporalMode::kStrict;
  const ModelConfig r = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(r), to_json(c));
  EXPECT_THROW(model_config_from_json({{"variant", "bogus"}}), Error);
}

TEST(BevNet, ZeroInputGivesZeroOutput) {
  const ModelConfig c = ModelConfig::tiny();
  const LookOut<float> net(c, 1);
  const Tensor<float> zero(Shape{24, 24, c.bev_channels()});
  const auto out = net.bev_net(zero);
  EXPECT_EQ(out.shape(), (Shape{3, 3, 64}));
  for (float v : out.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Head, OutputShapeGoalWidthAndIdentityInit) {
  ModelConfig c = ModelConfig::tiny();
  const LookOut<float> plain(c, 1);
  c.goal_conditioned = true;
  const LookOut<float> goal(c, 1);
  EXPECT_EQ(goal.params[goal.params.size() - 10].value.dim(0), plain.params[plain.params.size() - 10].value.dim(0) + 3);
  std::mt19937_64 rng(1);
  ModelInput<float> in;
  in.volume = random_tensor<float>({24, 8, 24, 9}, rng);
  const auto pred = plain.forward(in);
  EXPECT_EQ(pred.shape(), (Shape{8, 9}));
  // Small init weights keep the first prediction near identity rotations.
  for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(pred[t * 9 + 3], 1.0, 0.2);
}

TEST(Gradients, EndToEndFullVariant) {
  EXPECT_LT(check_model_gradients(small_config(), 11, 3), 1e-3);
}

TEST(Gradients, EndToEndTinyConfig) {
  EXPECT_LT(check_model_gradients(ModelConfig::tiny(), 15, 3), 1e-3);
}

TEST(Gradients, GoalConditionedHead) {
  auto c = small_config();
  c.goal_conditioned = true;
  EXPECT_LT(check_model_gradients(c, 12, 3), 1e-3);
}

TEST(Gradients, Conv3DVariant) {
  auto c = small_config();
  c.variant = Variant::kConv3D;
  c.grid = {12, 4, 12, 0.675, Vec3(-4.05, -1.8, -1.35)};
  c.bev_modules = 4;
  EXPECT_LT(check_model_gradients(c, 13, 3), 1e-3);
}

TEST(Gradients, Pooling2DVariant) {
  auto c = small_config();
  c.variant = Variant::kPooling2DOnly;
  EXPECT_LT(check_model_gradients(c, 14, 3), 1e-3);
}

TEST(Gradients, ThroughLiftFromFeatureMaps) {
  // Feature maps -> lift -> aggregate -> network, all in double.
  auto cfg = small_config();
  cfg.visibility_channel = false;
  cfg.channels = 3;
  std::mt19937_64 rng(21);
  LookOut<double> net(cfg, 21);
  std::vector<Tensor<double>> maps;
  std::vector<LiftPlan> plans;
  const Pose last = Pose(Vec3(0, 1.6, 0), datasim::head_rotation(0.2, 0.2, 0));
  const CanonicalFrame frame = canonical_frame_of(last);
  std::vector<Tensor<double>> vis;
  for (std::size_t t = 0; t < cfg.t1; ++t) {
    maps.push_back(random_tensor<double>({16, 16, 3}, rng));
    const Pose cam(Vec3(0, 1.6, -0.1 * double(cfg.t1 - 1 - t)), datasim::head_rotation(0.2 + 0.05 * t, 0.2, 0));
    plans.push_back(plan_lift(datasim::RenderConfig{}.intrinsics(), 16, 16, cam, frame, cfg.grid));
  }
  const Tensor<double> probe = random_tensor<double>({cfg.t2, 9}, rng);
  auto run = [&](const std::vector<Tensor<double>>& m, ForwardCache<double>* cache, FeatureVolume<double>* agg_out) {
    std::vector<FeatureVolume<double>> vols;
    for (std::size_t t = 0; t < m.size(); ++t) vols.push_back(apply_lift(plans[t], m[t], cfg.grid));
    auto agg = aggregate_temporal(vols);
    if (agg_out) *agg_out = agg;
    ModelInput<double> in;
    in.volume = agg.features;
    return net.forward(in, cache);
  };
  ForwardCache<double> cache;
  FeatureVolume<double> agg;
  run(maps, &cache, &agg);
  net.zero_grad();
  const auto dvol = aggregate_backward(agg.visibility, cfg.t1, net.backward(cache, probe));
  double worst = 0;
  for (std::size_t t = 0; t < cfg.t1; ++t) {
    const auto dmap = lift_backward(plans[t], dvol, 3);
    for (int k = 0; k < 6; ++k) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, dmap.size() - 1)(rng);
      auto m = maps;
      m[t][i] += 1e-6;
      const double up = ndiff::dot(run(m, nullptr, nullptr), probe);
      m[t][i] -= 2e-6;
      const double down = ndiff::dot(run(m, nullptr, nullptr), probe);
      const double num = (up - down) / 2e-6;
      worst = std::max(worst, std::abs(num - dmap[i]) / std::max({std::abs(num), std::abs(dmap[i]), 1e-6}));
    }
  }
  EXPECT_LT(worst, 1e-3);
}

// ----------------------------------------------------------------------------
// Clip pipeline

TEST(Pipeline, SampleShapesAndEquivariance) {
  const auto seq = lookout::testing::simulated_sequence(3);
  const auto clips = datasim::window_clips(seq, datasim::WindowConfig{});
  ASSERT_FALSE(clips.empty());
  const ModelConfig cfg = ModelConfig::tiny();
  const LookOut<float> net(cfg, 5);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1, 1);
  double worst = 0;
  for (std::size_t k = 0; k < std::min<std::size_t>(clips.size(), 4); ++k) {
    const ClipSample a = prepare_sample(clips[k], cfg);
    EXPECT_EQ(a.input.volume.shape(), (Shape{24, 8, 24, 9}));
    EXPECT_EQ(a.target.shape(), (Shape{8, 9}));
    EXPECT_NEAR(a.past.back().t.norm(), 0.0, 1e-12);
    const auto moved = lookout::testing::transformed_clip(clips[k], 3.0 * u(rng), Vec3(20 * u(rng), 0.3 * u(rng), 20 * u(rng)));
    const ClipSample b = prepare_sample(moved, cfg);
    const auto pa = net.forward(a.input), pb = net.forward(b.input);
    for (std::size_t i = 0; i < pa.size(); ++i) worst = std::max(worst, double(std::abs(pa[i] - pb[i])));
    for (std::size_t i = 0; i < a.target.size(); ++i) EXPECT_NEAR(a.target[i], b.target[i], 1e-4);
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Train, OverfitsSingleClip) {
  const auto seq = lookout::testing::simulated_sequence(4);
  const auto clips = datasim::window_clips(seq, datasim::WindowConfig{});
  const ModelConfig cfg = ModelConfig::tiny();
  const std::vector<ClipSample> data{prepare_sample(clips[0], cfg)};
  TrainConfig tc;
  tc.steps = 2000;
  tc.batch = 1;
  tc.max_lr = 3e-3;
  tc.checkpoint_every = 0;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train(data, cfg, tc);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto loss = ndiff::pose_loss(res.model.forward(data[0].input), data[0].target, cfg.loss);
  std::printf("single-clip overfit: loss %.3g after %lld steps (%.1f s)\n", loss.total, (long long)tc.steps, secs);
  EXPECT_LT(loss.total, 1e-3);
}

TEST(Train, DeterministicLogsAndExactResume) {
  const auto seq = lookout::testing::simulated_sequence(5);
  const auto clips = datasim::window_clips(seq, datasim::WindowConfig{});
  const ModelConfig cfg = ModelConfig::tiny();
  std::vector<ClipSample> data;
  for (std::size_t i = 0; i < std::min<std::size_t>(clips.size(), 6); ++i) data.push_back(prepare_sample(clips[i], cfg));
  TrainConfig tc;
  tc.steps = 24;
  tc.batch = 2;
  tc.checkpoint_every = 10;
  tc.seed = 3;
  const auto dir = std::filesystem::temp_directory_path() / "lookout_train_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto a = train(data, cfg, tc, {dir / "a.ckpt", dir / "a.csv"});
  const auto b = train(data, cfg, tc);
  ASSERT_EQ(format_log(a.log), format_log(b.log));
  for (const auto& r : a.log) EXPECT_EQ(r.lr, ndiff::onecycle_lr(tc.schedule(), r.step));
  EXPECT_EQ(io::read_text(dir / "a.csv"), format_log(a.log));

  // Interrupted after 15 steps (last checkpoint at 10), resumed with two threads.
  TrainPaths part{dir / "c.ckpt", dir / "c.csv"};
  part.stop_after = 15;
  const auto c1 = train(data, cfg, tc, part);
  EXPECT_EQ(c1.steps_run, 15);
  TrainConfig two = tc;
  two.threads = 2;
  TrainPaths resume{dir / "c.ckpt", dir / "c.csv", true};
  const auto c2 = train(data, cfg, two, resume);
  EXPECT_EQ(c2.steps_run, 14);
  EXPECT_EQ(format_log(c2.log), format_log(a.log));
  for (std::size_t i = 0; i < a.model.params.size(); ++i)
    ASSERT_EQ(a.model.params[i].value, c2.model.params[i].value) << a.model.params[i].name;
  EXPECT_EQ(io::read_text(dir / "c.csv"), format_log(a.log));
  std::filesystem::remove_all(dir);
}
