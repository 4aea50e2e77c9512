#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <semaphore>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scanfill/geometry.hpp"

namespace scanfill {

/// Diffusion noise schedule; index t runs from 1 to T.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;       ///< beta[t - 1]
  std::vector<double> alpha_bar;  ///< alpha_bar[t - 1]

  double abar(int t) const;
  /// w(t) = 1 - alpha_bar_t
  double weight(int t) const { return 1.0 - abar(t); }
};

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);
inline NoiseSchedule default_schedule() { return make_schedule(1000, 8.5e-4, 1.2e-2); }

/// Uniform integer timestep in [round(0.02 T), round(0.98 T)], clamped to [1, T].
int sample_timestep(const NoiseSchedule& schedule, std::mt19937_64& rng);

/// Row-major image; column p of `rgb` is pixel (p % width, p / width).
struct ImageRGB {
  int width = 0;
  int height = 0;
  Eigen::Matrix3Xd rgb;

  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
};

/// I_t = sqrt(abar_t) I + sqrt(1 - abar_t) eps
Eigen::Matrix3Xd add_noise(const Eigen::Matrix3Xd& image, const Eigen::Matrix3Xd& epsilon, int t,
                           const NoiseSchedule& schedule);

/// Standard normal noise for every pixel channel.
Eigen::Matrix3Xd sample_noise(Eigen::Index pixels, std::mt19937_64& rng);

struct GuidanceRequest {
  ImageRGB image;
  std::string prompt;
  std::string view_suffix;
  int t = 1;
  Eigen::Matrix3Xd epsilon;
  double guidance_scale = 100.0;
  // Not sent over the wire: used by in-process providers to pick a reference view.
  Vec3 background = Vec3::Zero();
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;

  void validate(const NoiseSchedule& schedule) const;
};

/// Predicts the noise that was added to I_t.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Eigen::Matrix3Xd predict_noise(const Eigen::Matrix3Xd& noisy, const GuidanceRequest& request,
                                         const NoiseSchedule& schedule) const = 0;
};

/// Anything that returns the SDS image gradient w(t) (eps_hat - eps) for a request.
class GuidanceProvider {
 public:
  virtual ~GuidanceProvider() = default;
  virtual Eigen::Matrix3Xd sds_grad(const GuidanceRequest& request, const NoiseSchedule& schedule) = 0;
};

/// Noises the request image, queries the denoiser and returns w(t) (eps_hat - eps). No gradient
/// flows through the denoiser.
Eigen::Matrix3Xd sds_gradient(const GuidanceRequest& request, const Denoiser& denoiser,
                              const NoiseSchedule& schedule);

class DenoiserGuidance final : public GuidanceProvider {
 public:
  explicit DenoiserGuidance(std::shared_ptr<const Denoiser> denoiser) : denoiser_(std::move(denoiser)) {}
  Eigen::Matrix3Xd sds_grad(const GuidanceRequest& request, const NoiseSchedule& schedule) override {
    return sds_gradient(request, *denoiser_, schedule);
  }

 private:
  std::shared_ptr<const Denoiser> denoiser_;
};

// ---- Mock guidance -------------------------------------------------------------------------

/// A reference view: premultiplied color plus coverage, so any background can be composited.
struct ReferenceView {
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;
  int width = 0;
  int height = 0;
  Eigen::Matrix3Xd color;   ///< premultiplied by coverage
  Eigen::VectorXd coverage;

  Eigen::Matrix3Xd over(const Vec3& background) const;
};

/// eps_hat = (I_t - sqrt(abar) I*) / sqrt(1 - abar), with I* the reference nearest the request's
/// view direction over its background. Pulls renders toward the references.
class MockDenoiser final : public Denoiser {
 public:
  /// `max_angle_deg` bounds how far the nearest reference may be from the requested view.
  explicit MockDenoiser(std::vector<ReferenceView> references, double max_angle_deg = 180.0);

  Eigen::Matrix3Xd predict_noise(const Eigen::Matrix3Xd& noisy, const GuidanceRequest& request,
                                 const NoiseSchedule& schedule) const override;
  const ReferenceView& nearest(double azimuth_deg, double elevation_deg, int width, int height) const;
  const std::vector<ReferenceView>& references() const { return references_; }

 private:
  std::vector<ReferenceView> references_;
  double max_angle_deg_;
};

/// Writes references as 8-bit RGBA PNGs named az<deg>_el<deg>.png.
void save_references(const std::filesystem::path& dir, const std::vector<ReferenceView>& views);
/// Reads every az<deg>_el<deg>.png in `dir` (sorted by name).
std::vector<ReferenceView> load_references(const std::filesystem::path& dir);

// ---- Remote guidance -----------------------------------------------------------------------

struct RemoteGuidanceConfig {
  std::string url = "http://127.0.0.1:8000";
  double timeout_s = 30.0;
  int max_retries = 3;
  double backoff_initial_s = 0.5;
  double backoff_factor = 2.0;
  int max_in_flight = 4;
  int max_width = 512;
  int max_height = 512;

  /// Applies SCANFILL_GUIDANCE_URL when set.
  RemoteGuidanceConfig with_env_override() const;
};

/// Client for the HTTP guidance service. The service returns the SDS gradient directly.
class RemoteGuidance final : public GuidanceProvider {
 public:
  explicit RemoteGuidance(RemoteGuidanceConfig config);

  Eigen::Matrix3Xd sds_grad(const GuidanceRequest& request, const NoiseSchedule& schedule) override;
  /// GET /v1/health; returns the model id, throws guidance-unavailable when down.
  std::string health();
  const RemoteGuidanceConfig& config() const { return config_; }

 private:
  RemoteGuidanceConfig config_;
  std::counting_semaphore<1024> in_flight_;
};

// ---- Wire encoding ---------------------------------------------------------------------------

/// Base64 of row-major H x W x 3 little-endian float32.
std::string encode_image_b64(const Eigen::Matrix3Xd& image);
Eigen::Matrix3Xd decode_image_b64(const std::string& text, int width, int height);

/// JSON body for POST /v1/sds_grad.
std::string sds_request_json(const GuidanceRequest& request);

}  // namespace scanfill
