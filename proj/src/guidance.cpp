#include "scanfill/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <regex>
#include <thread>

#include <boost/beast/core/detail/base64.hpp>
#include <httplib.h>
#include <json.hpp>

#include "scanfill/error.hpp"
#include "scanfill/io.hpp"

namespace scanfill {
namespace {

using Eigen::Matrix3Xd;
namespace base64 = boost::beast::detail::base64;
using json = nlohmann::json;

Vec3 view_direction(double azimuth_deg, double elevation_deg) {
  const double az = deg2rad(azimuth_deg);
  const double el = deg2rad(elevation_deg);
  return Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
}

std::string format_angle(double deg) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", deg);
  return buf;
}

// Releases one in-flight slot on scope exit.
struct SlotGuard {
  std::counting_semaphore<1024>& sem;
  ~SlotGuard() { sem.release(); }
};

}  // namespace

double NoiseSchedule::abar(int t) const {
  if (t < 1 || t > steps) fail(ErrorCode::kInvalidArgument, "timestep outside [1, T]");
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1 || !(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    fail(ErrorCode::kInvalidArgument, "schedule needs T >= 1 and 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha_bar.resize(steps);
  double product = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    s.beta[i] = beta_start + frac * (beta_end - beta_start);
    product *= 1.0 - s.beta[i];
    s.alpha_bar[i] = product;
  }
  return s;
}

int sample_timestep(const NoiseSchedule& schedule, std::mt19937_64& rng) {
  const int lo = std::clamp(static_cast<int>(std::lround(0.02 * schedule.steps)), 1, schedule.steps);
  const int hi = std::clamp(static_cast<int>(std::lround(0.98 * schedule.steps)), lo, schedule.steps);
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

Matrix3Xd add_noise(const Matrix3Xd& image, const Matrix3Xd& epsilon, int t,
                    const NoiseSchedule& schedule) {
  if (image.cols() != epsilon.cols()) fail(ErrorCode::kInvalidArgument, "noise shape mismatch");
  const double a = schedule.abar(t);
  return std::sqrt(a) * image + std::sqrt(1.0 - a) * epsilon;
}

Matrix3Xd sample_noise(Eigen::Index pixels, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix3Xd eps(3, pixels);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = n(rng);
  return eps;
}

void GuidanceRequest::validate(const NoiseSchedule& schedule) const {
  if (image.width < 1 || image.height < 1 ||
      static_cast<std::size_t>(image.rgb.cols()) != image.pixels()) {
    fail(ErrorCode::kInvalidArgument, "guidance image does not match its dimensions");
  }
  if (epsilon.cols() != image.rgb.cols()) fail(ErrorCode::kInvalidArgument, "noise shape mismatch");
  if (t < 1 || t > schedule.steps) fail(ErrorCode::kInvalidArgument, "timestep outside [1, T]");
  if (!image.rgb.allFinite() || !epsilon.allFinite()) {
    fail(ErrorCode::kInvalidArgument, "guidance inputs must be finite");
  }
}

Matrix3Xd sds_gradient(const GuidanceRequest& request, const Denoiser& denoiser,
                       const NoiseSchedule& schedule) {
  request.validate(schedule);
  const Matrix3Xd noisy = add_noise(request.image.rgb, request.epsilon, request.t, schedule);
  const Matrix3Xd eps_hat = denoiser.predict_noise(noisy, request, schedule);
  if (eps_hat.cols() != request.epsilon.cols()) {
    fail(ErrorCode::kProtocolError, "denoiser returned the wrong shape");
  }
  return schedule.weight(request.t) * (eps_hat - request.epsilon);
}

Matrix3Xd ReferenceView::over(const Vec3& background) const {
  return color + background * (1.0 - coverage.array()).matrix().transpose();
}

MockDenoiser::MockDenoiser(std::vector<ReferenceView> references, double max_angle_deg)
    : references_(std::move(references)), max_angle_deg_(max_angle_deg) {
  for (const auto& r : references_) {
    const auto n = static_cast<Eigen::Index>(r.width) * r.height;
    if (r.width < 1 || r.height < 1 || r.color.cols() != n || r.coverage.size() != n) {
      fail(ErrorCode::kInvalidArgument, "reference view does not match its dimensions");
    }
  }
}

const ReferenceView& MockDenoiser::nearest(double azimuth_deg, double elevation_deg, int width,
                                           int height) const {
  const Vec3 want = view_direction(azimuth_deg, elevation_deg);
  const ReferenceView* best = nullptr;
  double best_angle = INFINITY;
  for (const auto& r : references_) {
    if (r.width != width || r.height != height) continue;
    const double c = std::clamp(want.dot(view_direction(r.azimuth_deg, r.elevation_deg)), -1.0, 1.0);
    const double angle = rad2deg(std::acos(c));
    if (angle < best_angle) {
      best_angle = angle;
      best = &r;
    }
  }
  if (!best || best_angle > max_angle_deg_) {
    fail(ErrorCode::kGuidanceUnavailable,
         "no " + std::to_string(width) + "x" + std::to_string(height) + " reference near azimuth " +
             format_angle(azimuth_deg) + ", elevation " + format_angle(elevation_deg));
  }
  return *best;
}

Matrix3Xd MockDenoiser::predict_noise(const Matrix3Xd& noisy, const GuidanceRequest& request,
                                      const NoiseSchedule& schedule) const {
  const auto& ref = nearest(request.azimuth_deg, request.elevation_deg, request.image.width,
                            request.image.height);
  const double a = schedule.abar(request.t);
  return (noisy - std::sqrt(a) * ref.over(request.background)) / std::sqrt(1.0 - a);
}

void save_references(const std::filesystem::path& dir, const std::vector<ReferenceView>& views) {
  std::filesystem::create_directories(dir);
  for (const auto& v : views) {
    std::vector<std::uint8_t> px(4 * static_cast<std::size_t>(v.width) * v.height);
    for (Eigen::Index p = 0; p < v.coverage.size(); ++p) {
      const double a = std::clamp(v.coverage[p], 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        const double straight = a > 0.0 ? v.color(c, p) / a : 0.0;
        px[4 * p + c] = static_cast<std::uint8_t>(std::lround(std::clamp(straight, 0.0, 1.0) * 255.0));
      }
      px[4 * p + 3] = static_cast<std::uint8_t>(std::lround(a * 255.0));
    }
    write_png_rgba8(dir / ("az" + format_angle(v.azimuth_deg) + "_el" + format_angle(v.elevation_deg) + ".png"),
                    v.width, v.height, px);
  }
}

std::vector<ReferenceView> load_references(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    fail(ErrorCode::kIoError, "reference directory not found: " + dir.string());
  }
  static const std::regex name(R"(az(-?[0-9.]+)_el(-?[0-9.]+)\.png)");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (std::regex_match(entry.path().filename().string(), name)) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ReferenceView> views;
  for (const auto& f : files) {
    std::smatch m;
    const std::string fname = f.filename().string();
    std::regex_match(fname, m, name);
    const Image8 img = read_png8(f);
    ReferenceView v;
    v.azimuth_deg = std::stod(m[1]);
    v.elevation_deg = std::stod(m[2]);
    v.width = img.width;
    v.height = img.height;
    const auto n = static_cast<Eigen::Index>(img.width) * img.height;
    v.color.resize(3, n);
    v.coverage.resize(n);
    for (Eigen::Index p = 0; p < n; ++p) {
      const auto* px = &img.pixels[static_cast<std::size_t>(p) * img.channels];
      const double a = img.channels == 4 ? px[3] / 255.0 : 1.0;
      for (int c = 0; c < 3; ++c) v.color(c, p) = a * px[img.channels >= 3 ? c : 0] / 255.0;
      v.coverage[p] = a;
    }
    views.push_back(std::move(v));
  }
  if (views.empty()) fail(ErrorCode::kIoError, "no reference images in " + dir.string());
  return views;
}

std::string encode_image_b64(const Matrix3Xd& image) {
  std::string raw(static_cast<std::size_t>(image.size()) * 4, '\0');
  for (Eigen::Index i = 0; i < image.size(); ++i) {
    const float f = static_cast<float>(image.data()[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b) raw[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  std::string out(base64::encoded_size(raw.size()), '\0');
  out.resize(base64::encode(out.data(), raw.data(), raw.size()));
  return out;
}

Matrix3Xd decode_image_b64(const std::string& text, int width, int height) {
  const std::size_t want = 4 * 3 * static_cast<std::size_t>(width) * height;
  std::string raw(base64::decoded_size(text.size()), '\0');
  const auto [written, read] = base64::decode(raw.data(), text.data(), text.size());
  if (read != text.size() || written != want) {
    fail(ErrorCode::kProtocolError, "base64 payload has " + std::to_string(written) + " bytes, expected " +
                                        std::to_string(want));
  }
  Matrix3Xd image(3, static_cast<Eigen::Index>(width) * height);
  for (Eigen::Index i = 0; i < image.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + b])) << (8 * b);
    float f;
    std::memcpy(&f, &bits, 4);
    image.data()[i] = f;
  }
  return image;
}

std::string sds_request_json(const GuidanceRequest& request) {
  json body = {
      {"image_b64", encode_image_b64(request.image.rgb)},
      {"height", request.image.height},
      {"width", request.image.width},
      {"prompt", request.prompt},
      {"view_suffix", request.view_suffix},
      {"t", request.t},
      {"epsilon_b64", encode_image_b64(request.epsilon)},
      {"guidance_scale", request.guidance_scale},
  };
  return body.dump();
}

RemoteGuidanceConfig RemoteGuidanceConfig::with_env_override() const {
  RemoteGuidanceConfig base = *this;
  if (const char* url = std::getenv("SCANFILL_GUIDANCE_URL"); url && *url) base.url = url;
  return base;
}

RemoteGuidance::RemoteGuidance(RemoteGuidanceConfig config)
    : config_(std::move(config)), in_flight_(std::clamp(config_.max_in_flight, 1, 1024)) {
  if (config_.max_retries < 0 || !(config_.timeout_s > 0.0) || config_.max_width < 1 ||
      config_.max_height < 1) {
    fail(ErrorCode::kInvalidArgument, "invalid remote guidance configuration");
  }
}

namespace {

httplib::Client make_client(const RemoteGuidanceConfig& cfg) {
  httplib::Client client(cfg.url);
  if (!client.is_valid()) fail(ErrorCode::kInvalidArgument, "bad guidance url: " + cfg.url);
  const auto timeout = std::chrono::duration<double>(cfg.timeout_s);
  const auto sec = std::chrono::duration_cast<std::chrono::seconds>(timeout);
  const auto usec = std::chrono::duration_cast<std::chrono::microseconds>(timeout - sec);
  client.set_connection_timeout(sec.count(), usec.count());
  client.set_read_timeout(sec.count(), usec.count());
  client.set_write_timeout(sec.count(), usec.count());
  return client;
}

json parse_body(const std::string& body) {
  try {
    return json::parse(body);
  } catch (const json::exception& e) {
    fail(ErrorCode::kProtocolError, std::string("response is not JSON: ") + e.what());
  }
}

}  // namespace

Matrix3Xd RemoteGuidance::sds_grad(const GuidanceRequest& request, const NoiseSchedule& schedule) {
  request.validate(schedule);
  if (request.image.width > config_.max_width || request.image.height > config_.max_height) {
    fail(ErrorCode::kInvalidArgument, "image " + std::to_string(request.image.width) + "x" +
                                          std::to_string(request.image.height) +
                                          " exceeds the guidance size limit");
  }
  const std::string body = sds_request_json(request);

  in_flight_.acquire();
  SlotGuard guard{in_flight_};
  double backoff = config_.backoff_initial_s;
  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= config_.backoff_factor;
    }
    auto client = make_client(config_);
    const auto res = client.Post("/v1/sds_grad", body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500 || res->status == 429 || res->status == 503) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      fail(ErrorCode::kProtocolError, "service rejected the request with HTTP " +
                                          std::to_string(res->status) + ": " + res->body);
    }
    const json reply = parse_body(res->body);
    if (!reply.is_object() || !reply.contains("grad_b64") || !reply["grad_b64"].is_string()) {
      fail(ErrorCode::kProtocolError, "response lacks a string 'grad_b64'");
    }
    Matrix3Xd grad = decode_image_b64(reply["grad_b64"].get<std::string>(), request.image.width,
                                      request.image.height);
    if (!grad.allFinite()) fail(ErrorCode::kProtocolError, "gradient contains non-finite values");
    return grad;
  }
  fail(ErrorCode::kGuidanceUnavailable, "guidance service at " + config_.url + " unavailable after " +
                                            std::to_string(config_.max_retries + 1) +
                                            " attempts: " + last_error);
}

std::string RemoteGuidance::health() {
  auto client = make_client(config_);
  const auto res = client.Get("/v1/health");
  if (!res) fail(ErrorCode::kGuidanceUnavailable, "health check failed: " + httplib::to_string(res.error()));
  if (res->status != 200) fail(ErrorCode::kGuidanceUnavailable, "health check HTTP " + std::to_string(res->status));
  const json reply = parse_body(res->body);
  if (!reply.is_object() || !reply.contains("model_id") || !reply["model_id"].is_string()) {
    fail(ErrorCode::kProtocolError, "health response lacks 'model_id'");
  }
  return reply["model_id"].get<std::string>();
}

}  // namespace scanfill
