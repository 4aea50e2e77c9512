#include <atomic>
#include <cmath>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "fd_oracle.hpp"
#include "scanfill/error.hpp"
#include "scanfill/guidance.hpp"
#include "scanfill/renderer.hpp"

// After Eigen: <resolv.h> (pulled in by httplib) defines a `_res` macro.
#include <httplib.h>
#include <json.hpp>

using namespace scanfill;
using Eigen::Matrix3Xd;
using Eigen::VectorXd;
using json = nlohmann::json;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::kIoError;
}

ReferenceView constant_reference(int w, int h, const Vec3& rgb, double coverage, double az = 0.0,
                                 double el = 0.0) {
  ReferenceView r;
  r.azimuth_deg = az;
  r.elevation_deg = el;
  r.width = w;
  r.height = h;
  r.coverage = VectorXd::Constant(w * h, coverage);
  r.color = (coverage * rgb).replicate(1, w * h);
  return r;
}

GuidanceRequest make_request(int w, int h, int t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  GuidanceRequest req;
  req.image.width = w;
  req.image.height = h;
  req.image.rgb.resize(3, w * h);
  for (Eigen::Index i = 0; i < req.image.rgb.size(); ++i) req.image.rgb.data()[i] = u(rng);
  req.epsilon = sample_noise(w * h, rng);
  req.t = t;
  req.prompt = "a chair";
  req.view_suffix = "front view";
  return req;
}

struct EchoDenoiser final : Denoiser {
  // Recovers the exact noise from I_t given the clean image the caller noised.
  Matrix3Xd predict_noise(const Matrix3Xd&, const GuidanceRequest& req, const NoiseSchedule&) const override {
    return req.epsilon;
  }
};

struct ShiftDenoiser final : Denoiser {
  double shift;
  explicit ShiftDenoiser(double s) : shift(s) {}
  Matrix3Xd predict_noise(const Matrix3Xd&, const GuidanceRequest& req, const NoiseSchedule&) const override {
    return (req.epsilon.array() + shift).matrix();
  }
};

}  // namespace

TEST(Schedule, Examples) {
  const auto s = make_schedule(2, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(s.abar(1), 0.9);
  EXPECT_DOUBLE_EQ(s.abar(2), 0.72);
  const auto d = default_schedule();
  EXPECT_EQ(d.steps, 1000);
  EXPECT_EQ(d.abar(1), 1.0 - 8.5e-4);
  EXPECT_DOUBLE_EQ(d.beta.back(), 1.2e-2);
  for (int t = 2; t <= 1000; ++t) {
    EXPECT_LT(d.abar(t), d.abar(t - 1));
    EXPECT_GT(d.abar(t), 0.0);
  }
  EXPECT_THROW(make_schedule(0, 0.1, 0.2), Error);
  EXPECT_THROW(make_schedule(10, 0.0, 0.2), Error);
  EXPECT_THROW(make_schedule(10, 0.3, 0.2), Error);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), Error);
  EXPECT_THROW(d.abar(0), Error);
  EXPECT_THROW(d.abar(1001), Error);
}

TEST(Schedule, TimestepRangeAndCoverage) {
  const auto s = default_schedule();
  std::mt19937_64 rng(3);
  int lo = 100000, hi = 0;
  for (int i = 0; i < 100000; ++i) {
    const int t = sample_timestep(s, rng);
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  EXPECT_EQ(lo, 20);
  EXPECT_EQ(hi, 980);
}

TEST(AddNoise, Examples) {
  const Matrix3Xd ones = Matrix3Xd::Ones(3, 4);
  const Matrix3Xd zeros = Matrix3Xd::Zero(3, 4);
  const auto s = make_schedule(2, 0.1, 0.2);
  const Matrix3Xd it = add_noise(ones, zeros, 2, s);
  EXPECT_NEAR(it(0, 0), 0.848528, 1e-6);
  EXPECT_LT((it.array() - std::sqrt(0.72)).abs().maxCoeff(), 1e-12);

  const auto clean = make_schedule(1, 1e-300, 1e-300);  // abar == 1 in double precision
  std::mt19937_64 rng(1);
  const Matrix3Xd eps = sample_noise(4, rng);
  EXPECT_TRUE((add_noise(ones, eps, 1, clean).array() == ones.array()).all());

  const auto noisy = make_schedule(60, 0.999, 0.999);
  EXPECT_LT((add_noise(ones, eps, 60, noisy) - eps).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(add_noise(ones, Matrix3Xd::Zero(3, 3), 1, s), Error);
}

TEST(Sds, PerfectDenoiserGivesZero) {
  std::mt19937_64 rng(2);
  const auto s = default_schedule();
  const EchoDenoiser echo;
  for (int i = 0; i < 20; ++i) {
    const auto req = make_request(4, 3, sample_timestep(s, rng), rng);
    EXPECT_EQ(sds_gradient(req, echo, s).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Sds, ScalesWithWeight) {
  std::mt19937_64 rng(5);
  const auto s = default_schedule();
  for (int t : {20, 300, 980}) {
    const auto req = make_request(3, 3, t, rng);
    const Matrix3Xd g1 = sds_gradient(req, ShiftDenoiser(0.5), s);
    const Matrix3Xd g2 = sds_gradient(req, ShiftDenoiser(1.0), s);
    EXPECT_NEAR((g1.array() - 0.5 * (1.0 - s.abar(t))).abs().maxCoeff(), 0.0, 1e-12);
    EXPECT_NEAR((g2 - 2.0 * g1).cwiseAbs().maxCoeff(), 0.0, 1e-12);
  }
}

TEST(Sds, InvalidRequestsRejected) {
  std::mt19937_64 rng(5);
  const auto s = default_schedule();
  auto req = make_request(3, 3, 10, rng);
  req.t = 0;
  EXPECT_EQ(code_of([&] { sds_gradient(req, EchoDenoiser{}, s); }), ErrorCode::kInvalidArgument);
  req = make_request(3, 3, 10, rng);
  req.image.rgb(0, 0) = NAN;
  EXPECT_EQ(code_of([&] { sds_gradient(req, EchoDenoiser{}, s); }), ErrorCode::kInvalidArgument);
  req = make_request(3, 3, 10, rng);
  req.epsilon = Matrix3Xd::Zero(3, 2);
  EXPECT_EQ(code_of([&] { sds_gradient(req, EchoDenoiser{}, s); }), ErrorCode::kInvalidArgument);
}

TEST(MockGuidance, TargetEqualsRenderGivesZero) {
  std::mt19937_64 rng(9);
  const auto s = default_schedule();
  for (int trial = 0; trial < 100; ++trial) {
    auto req = make_request(4, 4, 1 + static_cast<int>(rng() % 1000), rng);
    ReferenceView ref;
    ref.width = ref.height = 4;
    ref.color = req.image.rgb;
    ref.coverage = VectorXd::Ones(16);
    const MockDenoiser mock({ref});
    const Matrix3Xd eps_hat = mock.predict_noise(add_noise(req.image.rgb, req.epsilon, req.t, s), req, s);
    EXPECT_LT((eps_hat - req.epsilon).cwiseAbs().maxCoeff(), 1e-9 / std::sqrt(1.0 - s.abar(req.t)) + 1e-12);
  }
}

TEST(MockGuidance, SignAndMagnitudeMatchClosedForm) {
  std::mt19937_64 rng(10);
  const auto s = default_schedule();
  const Vec3 target(0.4, 0.5, 0.6);
  const MockDenoiser mock({constant_reference(5, 4, target, 1.0)});
  const DenoiserGuidance provider(std::make_shared<MockDenoiser>(mock));
  for (int trial = 0; trial < 100; ++trial) {
    const int t = 1 + static_cast<int>(rng() % 1000);
    const auto req = make_request(5, 4, t, rng);
    const Matrix3Xd g = sds_gradient(req, mock, s);
    const double a = s.abar(t);
    const double scale = (1.0 - a) * std::sqrt(a) / std::sqrt(1.0 - a);
    const Matrix3Xd diff = req.image.rgb.colwise() - target;
    EXPECT_LT((g - scale * diff).cwiseAbs().maxCoeff(), 1e-9 * (1.0 + scale));
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      if (std::abs(diff.data()[i]) > 1e-6) {
        EXPECT_EQ(g.data()[i] > 0, diff.data()[i] > 0);
      }
    }
    const Matrix3Xd again = sds_gradient(req, mock, s);
    EXPECT_TRUE((g.array() == again.array()).all());
  }
}

TEST(MockGuidance, BackgroundCompositedUnderReference) {
  const auto s = default_schedule();
  std::mt19937_64 rng(1);
  auto req = make_request(2, 2, 500, rng);
  req.background = Vec3(0.2, 0.3, 0.4);
  const MockDenoiser mock({constant_reference(2, 2, Vec3(1, 1, 1), 0.0)});
  req.image.rgb = req.background.replicate(1, 4);
  EXPECT_LT(sds_gradient(req, mock, s).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(MockGuidance, NearestViewAndMissingView) {
  std::vector<ReferenceView> refs;
  for (int k = 0; k < 12; ++k) refs.push_back(constant_reference(3, 3, Vec3::Constant(k / 12.0), 1.0, 30.0 * k, 20.0));
  const MockDenoiser mock(refs, 20.0);
  EXPECT_EQ(mock.nearest(61.0, 20.0, 3, 3).azimuth_deg, 60.0);
  EXPECT_EQ(mock.nearest(-29.0, 25.0, 3, 3).azimuth_deg, 330.0);
  EXPECT_EQ(code_of([&] { mock.nearest(0.0, 20.0, 4, 4); }), ErrorCode::kGuidanceUnavailable);
  EXPECT_EQ(code_of([&] { mock.nearest(0.0, -60.0, 3, 3); }), ErrorCode::kGuidanceUnavailable);
  const MockDenoiser none({});
  std::mt19937_64 rng(2);
  const auto req = make_request(3, 3, 10, rng);
  EXPECT_EQ(code_of([&] { sds_gradient(req, none, default_schedule()); }), ErrorCode::kGuidanceUnavailable);
}

TEST(MockGuidance, ReferencesRoundTripThroughPng) {
  const auto dir = std::filesystem::temp_directory_path() / "scanfill_refs_test";
  std::filesystem::remove_all(dir);
  std::vector<ReferenceView> refs{constant_reference(4, 3, Vec3(0.2, 0.6, 1.0), 1.0, 30.0, 15.0),
                                  constant_reference(4, 3, Vec3(1.0, 0.0, 0.0), 0.0, -45.5, 0.0)};
  refs[0].coverage[5] = 0.0;
  refs[0].color.col(5).setZero();
  save_references(dir, refs);
  const auto back = load_references(dir);
  ASSERT_EQ(back.size(), 2u);
  // Sorted by file name: az-45.50 sorts before az30.00.
  EXPECT_EQ(back[0].azimuth_deg, -45.5);
  EXPECT_EQ(back[1].azimuth_deg, 30.0);
  EXPECT_EQ(back[1].elevation_deg, 15.0);
  EXPECT_LT((back[1].color - refs[0].color).cwiseAbs().maxCoeff(), 0.5 / 255 + 1e-12);
  EXPECT_EQ(back[1].coverage[5], 0.0);
  EXPECT_EQ(back[0].coverage.maxCoeff(), 0.0);
  EXPECT_THROW(load_references(dir / "missing"), Error);
}

// One small gradient step under mock guidance moves a frozen single view toward its target.
TEST(MockGuidance, StepReducesDistanceToTarget) {
  const auto s = default_schedule();
  const auto cam = look_at(Vec3(0, 0, 2), Vec3::Zero(), Vec3(0, 1, 0));
  CameraIntrinsics intr{5, 5, 2, 2, 5, 5};
  SamplingConfig sampling;
  sampling.near = 1.0;
  sampling.far = 3.0;
  sampling.samples_per_ray = 16;
  const DensityParams dp{100.0, 0.05};
  const Vec3 bg(0.5, 0.5, 0.5);
  const MockDenoiser mock({constant_reference(5, 5, Vec3(0.9, 0.1, 0.2), 0.8)});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    FieldParams p = scanfill::testing::random_field(8, 100 + seed, 2);
    p.values[p.sdf.layers.back().bias_offset] -= 0.5;
    const Matrix3Xd target = mock.references()[0].over(bg);
    auto distance = [&](const FieldParams& q) {
      const NeuralField f(q);
      return (render_view(f, dp, cam, intr, 5, 5, bg, sampling, 0).rgb - target).squaredNorm();
    };
    const NeuralField field(p);
    const auto view = render_view(field, dp, cam, intr, 5, 5, bg, sampling, 0);
    std::mt19937_64 rng(seed);
    GuidanceRequest req;
    req.image = ImageRGB{5, 5, view.rgb};
    req.epsilon = sample_noise(25, rng);
    req.t = sample_timestep(s, rng);
    req.background = bg;
    const Matrix3Xd g = sds_gradient(req, mock, s);
    FieldGradient grad = FieldGradient::Zero(static_cast<Eigen::Index>(p.size()));
    accumulate_field_gradient(p, render_view_backward(view, dp, g), grad);
    ASSERT_GT(grad.norm(), 0.0);
    FieldParams q = p;
    q.values -= 1e-4 / grad.norm() * grad;
    EXPECT_LT(distance(q), distance(p)) << "seed " << seed;
  }
}

// ---- Wire protocol -----------------------------------------------------------------------

TEST(Wire, Float32Base64RoundTrip) {
  Matrix3Xd img(3, 6);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = static_cast<float>(0.1 * i - 0.7);
  const auto text = encode_image_b64(img);
  EXPECT_EQ(text.size(), 4 * ((18 * 4 + 2) / 3));
  EXPECT_TRUE((decode_image_b64(text, 3, 2).array() == img.array()).all());
  EXPECT_EQ(code_of([&] { decode_image_b64(text, 2, 2); }), ErrorCode::kProtocolError);
  EXPECT_EQ(code_of([&] { decode_image_b64("@@@@", 1, 1); }), ErrorCode::kProtocolError);
}

TEST(Wire, LittleEndianLayout) {
  Matrix3Xd one(3, 1);
  one << 1.0, 0.0, -2.0;
  // 1.0f = 00 00 80 3f, 0.0f = 00 00 00 00, -2.0f = 00 00 00 c0 (little-endian bytes).
  EXPECT_EQ(encode_image_b64(one), "AACAPwAAAAAAAADA");
}

TEST(Wire, RequestJsonFields) {
  std::mt19937_64 rng(4);
  auto req = make_request(3, 2, 77, rng);
  req.guidance_scale = 7.5;
  const json body = json::parse(sds_request_json(req));
  EXPECT_EQ(body["height"], 2);
  EXPECT_EQ(body["width"], 3);
  EXPECT_EQ(body["t"], 77);
  EXPECT_EQ(body["prompt"], "a chair");
  EXPECT_EQ(body["view_suffix"], "front view");
  EXPECT_EQ(body["guidance_scale"], 7.5);
  EXPECT_EQ(body["image_b64"], encode_image_b64(req.image.rgb));
  EXPECT_EQ(body["epsilon_b64"], encode_image_b64(req.epsilon));
  EXPECT_FALSE(body.contains("background"));
}

namespace {

// In-process stand-in for the guidance service.
class StubServer {
 public:
  enum class Mode { kEcho, kTarget, kMalformed, kMissingField, kServerError, kBadRequest };

  explicit StubServer(Mode mode, Vec3 target = Vec3::Zero()) : mode_(mode), target_(target) {
    server_.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"status":"ok","model_id":"stub"})", "application/json");
    });
    server_.Post("/v1/sds_grad", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      handle(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int requests() const { return requests_; }

 private:
  void handle(const httplib::Request& req, httplib::Response& res) {
    switch (mode_) {
      case Mode::kMalformed:
        res.set_content("{not json", "application/json");
        return;
      case Mode::kMissingField:
        res.set_content(R"({"model_id":"stub"})", "application/json");
        return;
      case Mode::kServerError:
        res.status = 500;
        return;
      case Mode::kBadRequest:
        res.status = 400;
        res.set_content(R"({"error":"field 't' out of range"})", "application/json");
        return;
      default:
        break;
    }
    const json body = json::parse(req.body);
    const int w = body["width"], h = body["height"], t = body["t"];
    const Matrix3Xd image = decode_image_b64(body["image_b64"], w, h);
    const Matrix3Xd eps = decode_image_b64(body["epsilon_b64"], w, h);
    Matrix3Xd grad = Matrix3Xd::Zero(3, eps.cols());
    if (mode_ == Mode::kTarget) {
      GuidanceRequest r;
      r.image = ImageRGB{w, h, image};
      r.epsilon = eps;
      r.t = t;
      const MockDenoiser mock({constant_reference(w, h, target_, 1.0)});
      grad = sds_gradient(r, mock, default_schedule());
    } else {
      grad = eps - eps;
    }
    res.set_content(json({{"grad_b64", encode_image_b64(grad)}, {"model_id", "stub"}}).dump(),
                    "application/json");
  }

  Mode mode_;
  Vec3 target_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> requests_{0};
};

RemoteGuidanceConfig fast_config(const std::string& url) {
  RemoteGuidanceConfig cfg;
  cfg.url = url;
  cfg.timeout_s = 2.0;
  cfg.max_retries = 2;
  cfg.backoff_initial_s = 0.01;
  return cfg;
}

}  // namespace

TEST(RemoteGuidance, EchoModeGivesZeroGradient) {
  StubServer stub(StubServer::Mode::kEcho);
  RemoteGuidance client(fast_config(stub.url()));
  EXPECT_EQ(client.health(), "stub");
  std::mt19937_64 rng(3);
  const auto req = make_request(8, 6, 400, rng);
  const Matrix3Xd g = client.sds_grad(req, default_schedule());
  EXPECT_EQ(g.cols(), 48);
  EXPECT_EQ(g.cwiseAbs().maxCoeff(), 0.0);
}

TEST(RemoteGuidance, TargetModeMatchesInProcessMock) {
  const Vec3 target(0.3, 0.6, 0.9);
  StubServer stub(StubServer::Mode::kTarget, target);
  RemoteGuidance client(fast_config(stub.url()));
  const auto s = default_schedule();
  const MockDenoiser mock({constant_reference(6, 5, target, 1.0)});
  std::mt19937_64 rng(8);
  for (int i = 0; i < 5; ++i) {
    auto req = make_request(6, 5, sample_timestep(s, rng), rng);
    // Inputs that survive the float32 wire encoding exactly.
    req.image.rgb = req.image.rgb.cast<float>().cast<double>();
    req.epsilon = req.epsilon.cast<float>().cast<double>();
    const Matrix3Xd remote = client.sds_grad(req, s);
    const Matrix3Xd local = sds_gradient(req, mock, s);
    EXPECT_LT((remote - local).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(RemoteGuidance, MalformedResponsesAreProtocolErrors) {
  std::mt19937_64 rng(1);
  const auto req = make_request(2, 2, 5, rng);
  for (auto mode : {StubServer::Mode::kMalformed, StubServer::Mode::kMissingField, StubServer::Mode::kBadRequest}) {
    StubServer stub(mode);
    RemoteGuidance client(fast_config(stub.url()));
    EXPECT_EQ(code_of([&] { client.sds_grad(req, default_schedule()); }), ErrorCode::kProtocolError);
    EXPECT_EQ(stub.requests(), 1);
  }
}

TEST(RemoteGuidance, ServerErrorsRetriedThenUnavailable) {
  StubServer stub(StubServer::Mode::kServerError);
  RemoteGuidance client(fast_config(stub.url()));
  std::mt19937_64 rng(1);
  const auto req = make_request(2, 2, 5, rng);
  EXPECT_EQ(code_of([&] { client.sds_grad(req, default_schedule()); }), ErrorCode::kGuidanceUnavailable);
  EXPECT_EQ(stub.requests(), 3);
}

TEST(RemoteGuidance, UnreachableEndpointIsUnavailable) {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }  // closed again: nothing listens there now
  auto cfg = fast_config("http://127.0.0.1:" + std::to_string(port));
  cfg.timeout_s = 0.3;
  RemoteGuidance client(cfg);
  std::mt19937_64 rng(1);
  const auto req = make_request(2, 2, 5, rng);
  EXPECT_EQ(code_of([&] { client.sds_grad(req, default_schedule()); }), ErrorCode::kGuidanceUnavailable);
  EXPECT_EQ(code_of([&] { client.health(); }), ErrorCode::kGuidanceUnavailable);
}

TEST(RemoteGuidance, OversizeImageRejectedBeforeNetwork) {
  StubServer stub(StubServer::Mode::kEcho);
  auto cfg = fast_config(stub.url());
  cfg.max_width = 4;
  cfg.max_height = 4;
  RemoteGuidance client(cfg);
  std::mt19937_64 rng(1);
  const auto req = make_request(5, 4, 5, rng);
  EXPECT_EQ(code_of([&] { client.sds_grad(req, default_schedule()); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(stub.requests(), 0);
}

TEST(RemoteGuidance, EnvironmentOverridesUrl) {
  RemoteGuidanceConfig cfg;
  cfg.url = "http://example.invalid:1";
  ::setenv("SCANFILL_GUIDANCE_URL", "http://127.0.0.1:9", 1);
  EXPECT_EQ(cfg.with_env_override().url, "http://127.0.0.1:9");
  ::unsetenv("SCANFILL_GUIDANCE_URL");
  EXPECT_EQ(cfg.with_env_override().url, "http://example.invalid:1");
}

TEST(RemoteGuidance, ConcurrentCallersShareTheClient) {
  StubServer stub(StubServer::Mode::kEcho);
  auto cfg = fast_config(stub.url());
  cfg.max_in_flight = 2;
  RemoteGuidance client(cfg);
  std::atomic<int> ok{0};
  std::vector<std::thread> threads;
  for (int i = 0; i < 6; ++i) {
    threads.emplace_back([&, i] {
      std::mt19937_64 rng(i);
      const auto req = make_request(3, 3, 10, rng);
      if (client.sds_grad(req, default_schedule()).cwiseAbs().maxCoeff() == 0.0) ++ok;
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(ok.load(), 6);
  EXPECT_EQ(stub.requests(), 6);
}
