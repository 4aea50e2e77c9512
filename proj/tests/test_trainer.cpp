#include <cmath>
#include <cstring>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "hemisphere_fixture.hpp"
#include "scanfill/error.hpp"
#include "scanfill/trainer.hpp"

using namespace scanfill;
using scanfill::testing::HemisphereFixture;
using Eigen::VectorXd;

namespace {

const HemisphereFixture& fixture() {
  static const HemisphereFixture f = HemisphereFixture::make();
  return f;
}

TrainConfig small_config(std::uint64_t seed) {
  TrainConfig c = HemisphereFixture::config(seed);
  c.epochs = 2;
  c.iterations_per_epoch = 5;
  c.render_width = 16;
  c.render_height = 16;
  c.sampling.samples_per_ray = 32;
  c.field.sdf_width = 16;
  c.field.color_width = 16;
  c.field.encoding.levels = 3;
  c.pixel_batch = 200;
  c.aux_samples = 100;
  c.mesh_resolution = 16;
  return c;
}

std::shared_ptr<MockDenoiser> mock_for(const TrainConfig& c) {
  return std::make_shared<MockDenoiser>(fixture().references(c));
}

class Unavailable final : public GuidanceProvider {
 public:
  Eigen::Matrix3Xd sds_grad(const GuidanceRequest&, const NoiseSchedule&) override {
    fail(ErrorCode::kGuidanceUnavailable, "service down");
  }
};

}  // namespace

TEST(TrainConfigTest, Defaults) {
  const TrainConfig c;
  EXPECT_EQ(c.epochs, 2000);
  EXPECT_EQ(c.iterations_per_epoch, 100);
  EXPECT_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.render_width, 80);
  EXPECT_EQ(c.render_height, 80);
  EXPECT_EQ(c.pixel_batch, 2000);
  EXPECT_EQ(c.aux_samples, 1000);
  EXPECT_EQ(c.grad_clip, 10.0);
  EXPECT_EQ(c.checkpoint_every, 100);
  EXPECT_EQ(c.effective_init_radius(), 0.5);
  TrainConfig lidar;
  lidar.kind = SensorKind::kLidar;
  EXPECT_EQ(lidar.effective_init_radius(), 0.9);
  EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfigTest, FormatParseRoundTrip) {
  TrainConfig c = small_config(99);
  c.kind = SensorKind::kLidar;
  c.learning_rate = 3.3e-5;
  c.weights.plane = 7.0;
  c.on_guidance_failure = GuidanceFailurePolicy::kContinue;
  c.prompt = "a red chair #2";
  c.roi = Box3{Vec3::Constant(-0.8), Vec3::Constant(0.8)};
  std::istringstream in(format_config(c));
  const TrainConfig back = parse_config(in);
  EXPECT_EQ(format_config(back), format_config(c));
  EXPECT_EQ(back.prompt, "a red chair #2");
  EXPECT_EQ(back.kind, SensorKind::kLidar);
  EXPECT_EQ(back.learning_rate, 3.3e-5);
}

TEST(TrainConfigTest, CommentsAndErrors) {
  std::istringstream ok("# header\n\nepochs = 3   # short run\nweights.mask=2\n");
  const TrainConfig c = parse_config(ok);
  EXPECT_EQ(c.epochs, 3);
  EXPECT_EQ(c.weights.mask, 2.0);

  auto parse_error = [](const std::string& text) -> std::string {
    std::istringstream in(text);
    try {
      parse_config(in, "cfg");
    } catch (const Error& e) {
      return e.what();
    }
    return "";
  };
  EXPECT_NE(parse_error("epochs = 2\nbogus = 1\n").find("cfg:2"), std::string::npos);
  EXPECT_NE(parse_error("epochs = two\n").find("epochs"), std::string::npos);
  EXPECT_NE(parse_error("epochs 2\n").find("cfg:1"), std::string::npos);
  EXPECT_NE(parse_error("kind = radar\n"), "");
  std::istringstream zero("epochs = 0\n");
  EXPECT_THROW(parse_config(zero), Error);
  std::istringstream lr("learning_rate = -1\n");
  EXPECT_THROW(parse_config(lr), Error);
}

TEST(Curriculum, NuBreakpoints) {
  const std::set<double> allowed{0, 30, 45, 60, 90, 180};
  double prev = 0.0;
  for (int e = 0; e < 2000; ++e) {
    const double nu = curriculum_nu(e);
    EXPECT_TRUE(allowed.count(nu)) << e;
    EXPECT_GE(nu, prev);
    prev = nu;
  }
  EXPECT_EQ(curriculum_nu(19), 0.0);
  EXPECT_EQ(curriculum_nu(20), 30.0);
  EXPECT_EQ(curriculum_nu(49), 30.0);
  EXPECT_EQ(curriculum_nu(50), 45.0);
  EXPECT_EQ(curriculum_nu(80), 60.0);
  EXPECT_EQ(curriculum_nu(100), 90.0);
  EXPECT_EQ(curriculum_nu(119), 90.0);
  EXPECT_EQ(curriculum_nu(120), 180.0);
}

TEST(Curriculum, EarlyEpochsUseSensorPose) {
  for (int e : {0, 5, 19}) {
    for (auto kind : {SensorKind::kDepthCamera, SensorKind::kLidar}) {
      const CameraSample s = curriculum_sample(CurriculumState::at(e, 40.0), kind, std::uint64_t{3});
      EXPECT_EQ(s.gamma_azimuth, 0.0);
      EXPECT_EQ(s.gamma_elevation, 0.0);
      EXPECT_EQ(s.distance_scale, 1.0);
    }
  }
}

TEST(Curriculum, RangesByKind) {
  const double xi0 = 35.0;
  std::mt19937_64 rng(8);
  double az_lo = 1e9, az_hi = -1e9, el_lo = 1e9, el_hi = -1e9, d_lo = 1e9, d_hi = -1e9;
  for (int i = 0; i < 5000; ++i) {
    const CameraSample s = curriculum_sample(CurriculumState::at(20, xi0), SensorKind::kDepthCamera, rng);
    az_lo = std::min(az_lo, s.gamma_azimuth);
    az_hi = std::max(az_hi, s.gamma_azimuth);
    el_lo = std::min(el_lo, s.gamma_elevation);
    el_hi = std::max(el_hi, s.gamma_elevation);
    EXPECT_EQ(s.distance_scale, 1.0);
  }
  EXPECT_GE(az_lo, -30.0);
  EXPECT_LE(az_hi, 30.0);
  EXPECT_LT(az_lo, -29.0);
  EXPECT_GT(az_hi, 29.0);
  EXPECT_GE(el_lo, -xi0);
  EXPECT_LE(el_hi, 0.0);
  EXPECT_LT(el_lo, -xi0 + 1.0);

  el_lo = 1e9;
  el_hi = -1e9;
  for (int i = 0; i < 5000; ++i) {
    const CameraSample s = curriculum_sample(CurriculumState::at(150, xi0), SensorKind::kLidar, rng);
    EXPECT_LE(std::abs(s.gamma_azimuth), 180.0);
    el_lo = std::min(el_lo, s.gamma_elevation);
    el_hi = std::max(el_hi, s.gamma_elevation);
    d_lo = std::min(d_lo, s.distance_scale);
    d_hi = std::max(d_hi, s.distance_scale);
  }
  EXPECT_GE(el_lo, -xi0);
  EXPECT_LE(el_hi, xi0);
  EXPECT_GT(el_hi, xi0 - 1.0);
  EXPECT_GE(d_lo, 1.0);
  EXPECT_LE(d_hi, 2.0);
  EXPECT_GT(d_hi, 1.95);
}

TEST(ViewText, Examples) {
  EXPECT_EQ(view_text("a chair", 0, 0, 10), "a chair, front view");
  EXPECT_EQ(view_text("a chair", 0, 90, 10), "a chair, side view");
  EXPECT_EQ(view_text("a chair", 0, 180, 10), "a chair, back view");
  EXPECT_EQ(view_text("a chair", 90, 0, 10), "a chair, side view");
  EXPECT_EQ(view_text("a chair", 90, 90, 10), "a chair, back view");
  EXPECT_EQ(view_text("a chair", 0, 0, 60), "a chair, overhead view");
  EXPECT_EQ(view_text("a chair", 0, 180, -15), "a chair, bottom view");
  EXPECT_EQ(view_suffix(0, 45, 0), "front view");
  EXPECT_EQ(view_suffix(0, 45.001, 0), "side view");
  EXPECT_EQ(view_suffix(0, -135, 0), "side view");
  EXPECT_EQ(view_suffix(0, -135.001, 0), "back view");
  EXPECT_EQ(view_suffix(170, 20, 59.9), "back view");
  EXPECT_EQ(view_suffix(0, 0, -14.9), "front view");
}

TEST(ViewText, AlwaysOneOfFiveSuffixes) {
  const std::set<std::string> suffixes{"front view", "side view", "back view", "overhead view",
                                       "bottom view"};
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> angle(-720.0, 720.0);
  std::uniform_real_distribution<double> elev(-90.0, 90.0);
  for (int i = 0; i < 2000; ++i) {
    const std::string text = view_text("x", angle(rng), angle(rng), elev(rng));
    ASSERT_EQ(text.rfind("x, ", 0), 0u);
    EXPECT_TRUE(suffixes.count(text.substr(3))) << text;
  }
}

TEST(ViewText, WrapDegrees) {
  EXPECT_EQ(wrap_degrees(180.0), 180.0);
  EXPECT_EQ(wrap_degrees(-180.0), 180.0);
  EXPECT_EQ(wrap_degrees(540.0), 180.0);
  EXPECT_EQ(wrap_degrees(-190.0), 170.0);
  EXPECT_EQ(wrap_degrees(45.0), 45.0);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-2000.0, 2000.0);
  for (int i = 0; i < 1000; ++i) {
    const double w = wrap_degrees(u(rng));
    EXPECT_GT(w, -180.0);
    EXPECT_LE(w, 180.0);
  }
}

TEST(CurriculumCamera, ElevationAndDistance) {
  const SensorObservation& obs = fixture().obs;
  const Plane plane = obs.plane->oriented_toward(obs.pose.translation);
  const double xi0 = sensor_elevation(obs);
  EXPECT_NEAR(xi0, HemisphereFixture::kElevationDeg, 0.5);

  const CameraPose same = curriculum_camera(obs.pose, plane, CameraSample{});
  EXPECT_TRUE(same.translation.isApprox(obs.pose.translation, 1e-12));
  for (double gel : {-10.0, -40.0, -80.0}) {
    for (double gaz : {0.0, 70.0, -150.0}) {
      const CameraPose c = curriculum_camera(obs.pose, plane, CameraSample{gaz, gel, 1.0});
      EXPECT_NEAR(elevation_of(c, plane), xi0 + gel, 1e-6);
      EXPECT_NEAR(c.translation.norm(), obs.pose.translation.norm(), 1e-12);
    }
  }
  const CameraPose far = curriculum_camera(obs.pose, plane, CameraSample{10.0, 5.0, 1.5});
  EXPECT_NEAR(far.translation.norm(), 1.5 * obs.pose.translation.norm(), 1e-12);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  VectorXd p = VectorXd::LinSpaced(10, -1.0, 1.0);
  const VectorXd before = p;
  AdamState s = AdamState::zeros(p.size());
  for (int i = 0; i < 5; ++i) adam_step(p, VectorXd::Zero(p.size()), s, 1e-3);
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 5);
}

TEST(Adam, FirstStepIsSignTimesLr) {
  VectorXd p = VectorXd::Zero(4);
  VectorXd g(4);
  g << 3.0, -0.5, 1e-3, -200.0;
  AdamState s = AdamState::zeros(4);
  adam_step(p, g, s, 1e-4);
  for (int i = 0; i < 4; ++i) {
    const double expected = -1e-4 * std::abs(g[i]) / (std::abs(g[i]) + 1e-8) * (g[i] > 0 ? 1 : -1);
    EXPECT_NEAR(p[i], expected, 1e-15);
    EXPECT_NEAR(p[i], -1e-4 * (g[i] > 0 ? 1 : -1), 1e-4 * 1e-5);
  }
}

TEST(Adam, MatchesScalarReference) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  VectorXd p(6);
  for (auto& x : p) x = n(rng);
  VectorXd ref = p;
  std::vector<double> m(6, 0.0), v(6, 0.0);
  AdamState s = AdamState::zeros(6);
  for (int step = 1; step <= 20; ++step) {
    VectorXd g(6);
    for (auto& x : g) x = n(rng);
    adam_step(p, g, s, 0.01);
    for (int i = 0; i < 6; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1.0 - std::pow(0.9, step));
      const double vh = v[i] / (1.0 - std::pow(0.999, step));
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  EXPECT_LT((p - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Adam, ShapeMismatch) {
  VectorXd p = VectorXd::Zero(3);
  AdamState s = AdamState::zeros(3);
  EXPECT_THROW(adam_step(p, VectorXd::Zero(4), s, 1e-3), Error);
  AdamState wrong = AdamState::zeros(2);
  EXPECT_THROW(adam_step(p, VectorXd::Zero(3), wrong, 1e-3), Error);
}

TEST(GradientClip, GlobalNorm) {
  VectorXd g(2);
  g << 30.0, 40.0;
  EXPECT_EQ(clip_global_norm(g, 10.0), 50.0);
  EXPECT_NEAR(g.norm(), 10.0, 1e-12);
  EXPECT_NEAR(g[0] / g[1], 0.75, 1e-15);
  VectorXd small(2);
  small << 0.3, 0.4;
  const VectorXd before = small;
  clip_global_norm(small, 10.0);
  EXPECT_EQ(small, before);
}

TEST(TrainLog, CsvColumns) {
  EXPECT_EQ(log_csv_header(),
            "iteration,epoch,loss_p,loss_m,loss_d,loss_eikonal,loss_plane,total,sds_grad_norm,azimuth,"
            "elevation");
  LogRow r;
  r.sds_grad_norm = std::nan("");
  const std::string line = log_csv_line(r);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 10);
  EXPECT_NE(line.find("nan"), std::string::npos);
}

TEST(Train, SmokeRunWithMockGuidance) {
  const TrainConfig c = small_config(1);
  DenoiserGuidance guidance(mock_for(c));
  std::vector<int> checkpoints;
  TrainCallbacks cb;
  cb.on_checkpoint = [&](int epoch, const FieldParams&) { checkpoints.push_back(epoch); };
  const TrainResult r = train(c, fixture().obs, &guidance, cb);
  ASSERT_EQ(r.log.size(), 10u);
  for (const LogRow& row : r.log) {
    for (double v : {row.losses.point, row.losses.mask, row.losses.depth, row.losses.eikonal,
                     row.losses.plane, row.losses.total, row.sds_grad_norm}) {
      EXPECT_TRUE(std::isfinite(v));
    }
    EXPECT_EQ(row.azimuth, 0.0);
    EXPECT_NEAR(row.elevation, sensor_elevation(fixture().obs), 1e-12);
  }
  EXPECT_EQ(checkpoints, std::vector<int>{2});
  EXPECT_TRUE(r.params.values.allFinite());
  EXPECT_FALSE(r.mesh.empty());
  EXPECT_EQ(r.guidance_failures, 0);
}

TEST(Train, CheckpointCadence) {
  TrainConfig c = small_config(1);
  c.epochs = 5;
  c.iterations_per_epoch = 1;
  c.checkpoint_every = 2;
  std::vector<int> epochs;
  TrainCallbacks cb;
  cb.on_checkpoint = [&](int epoch, const FieldParams&) { epochs.push_back(epoch); };
  train(c, fixture().obs, nullptr, cb);
  EXPECT_EQ(epochs, (std::vector<int>{2, 4, 5}));
}

TEST(Train, DeterministicForSeed) {
  const TrainConfig c = small_config(4);
  DenoiserGuidance guidance(mock_for(c));
  const TrainResult a = train(c, fixture().obs, &guidance);
  const TrainResult b = train(c, fixture().obs, &guidance);
  ASSERT_EQ(a.params.values.size(), b.params.values.size());
  EXPECT_EQ(std::memcmp(a.params.values.data(), b.params.values.data(),
                        sizeof(double) * static_cast<std::size_t>(a.params.values.size())),
            0);
  ASSERT_EQ(a.mesh.vertices.size(), b.mesh.vertices.size());
  for (std::size_t i = 0; i < a.mesh.vertices.size(); ++i) EXPECT_EQ(a.mesh.vertices[i], b.mesh.vertices[i]);
  const TrainResult other = train(small_config(5), fixture().obs, &guidance);
  EXPECT_NE(other.params.values, a.params.values);
}

TEST(Train, GuidanceFailurePolicy) {
  TrainConfig c = small_config(1);
  Unavailable down;
  EXPECT_THROW(train(c, fixture().obs, &down), Error);
  c.on_guidance_failure = GuidanceFailurePolicy::kContinue;
  const TrainResult r = train(c, fixture().obs, &down);
  EXPECT_EQ(r.guidance_failures, 10);
  for (const LogRow& row : r.log) EXPECT_TRUE(std::isnan(row.sds_grad_norm));
}

TEST(Train, RejectsObservationWithoutPlane) {
  SensorObservation obs = fixture().obs;
  obs.plane.reset();
  EXPECT_THROW(train(small_config(1), obs, nullptr), Error);
}

TEST(TrainInvariant, MockGuidanceAloneApproachesTarget) {
  // All loss weights zero; epochs < 20 keep the camera frozen at C0.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig c = small_config(100 + seed);
    c.weights = LossWeights{0, 0, 0, 0, 0};
    c.epochs = 10;
    c.iterations_per_epoch = 10;
    c.learning_rate = 1e-5;
    c.sampling.stratified = false;
    const auto refs = fixture().references(c);
    DenoiserGuidance guidance(std::make_shared<MockDenoiser>(refs));

    const SensorObservation& obs = fixture().obs;
    const MockDenoiser lookup(refs);
    const double xi0 = sensor_elevation(obs);
    const Vec3 bg = Vec3::Constant(0.5);
    const Eigen::Matrix3Xd target = lookup.nearest(c.gamma0_azimuth, xi0, 16, 16).over(bg);
    const CameraIntrinsics intr = sds_intrinsics(c, obs);
    RenderOptions opts;
    opts.clip_box = c.roi;
    auto distance = [&](const FieldParams& p) {
      const NeuralField field(p);
      const RenderOutput v = render_view(field, c.density, obs.pose, intr, 16, 16, bg, c.sampling, 0, opts);
      return (v.rgb - target).squaredNorm();
    };
    std::vector<double> d;
    d.push_back(distance(initial_field(c)));
    TrainCallbacks cb;
    cb.on_iteration = [&](const LogRow&, const FieldParams& p) { d.push_back(distance(p)); };
    train(c, obs, &guidance, cb);
    ASSERT_EQ(d.size(), 101u);
    for (std::size_t i = 1; i < d.size(); ++i) EXPECT_LE(d[i], d[i - 1]) << "seed " << seed << " step " << i;
    EXPECT_LT(d.back(), d.front());
  }
}

TEST(TrainInvariant, PointLossDropsTenfoldWithoutGuidance) {
  TrainConfig c = HemisphereFixture::config(2);
  c.epochs = 20;
  c.iterations_per_epoch = 10;
  c.mesh_resolution = 8;
  const TrainResult r = train(c, fixture().obs, nullptr);
  const double first = r.log.front().losses.point;
  double best_late = r.log.back().losses.point;
  EXPECT_GT(first, 0.0);
  EXPECT_LE(best_late, first / 10.0) << "initial " << first << " final " << best_late;
}
