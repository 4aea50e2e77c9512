#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "scanfill/fields.hpp"
#include "scanfill/geometry.hpp"

namespace scanfill {

struct SamplingConfig {
  double near = 1.0;
  double far = 3.0;
  int samples_per_ray = 128;
  bool stratified = false;

  void validate() const;
};

/// Sorted sample distances for one ray: bin midpoints, or one uniform draw per bin.
std::vector<double> sample_distances(const SamplingConfig& cfg, std::uint64_t seed);
void sample_distances(double near, double far, int count, bool stratified, std::mt19937_64& rng,
                      std::span<double> out);

struct Composite {
  Vec3 rgb = Vec3::Zero();
  double opacity = 0.0;
  double depth = 0.0;
  std::vector<double> weights;
};

/// Alpha compositing along one ray. The last segment reuses the previous segment length;
/// depth is normalized by max(opacity, 1e-8).
Composite composite(std::span<const double> sigma, std::span<const Vec3> rgb,
                    std::span<const double> mu);

inline constexpr double kDepthFloor = 1e-8;

/// Anything that can report signed distances and colors at batches of points.
class RadianceField {
 public:
  virtual ~RadianceField() = default;
  virtual Eigen::VectorXd sdf(const Eigen::Matrix3Xd& points) const = 0;
  virtual Eigen::Matrix3Xd color(const Eigen::Matrix3Xd& points) const = 0;
};

class NeuralField final : public RadianceField {
 public:
  explicit NeuralField(const FieldParams& params) : params_(params) {}
  Eigen::VectorXd sdf(const Eigen::Matrix3Xd& points) const override;
  Eigen::Matrix3Xd color(const Eigen::Matrix3Xd& points) const override;
  const FieldParams& params() const { return params_; }

 private:
  const FieldParams& params_;
};

/// Exact sphere SDF with a constant color.
class AnalyticSphere final : public RadianceField {
 public:
  AnalyticSphere(Vec3 center, double radius, Vec3 rgb)
      : center_(std::move(center)), radius_(radius), rgb_(std::move(rgb)) {}
  Eigen::VectorXd sdf(const Eigen::Matrix3Xd& points) const override;
  Eigen::Matrix3Xd color(const Eigen::Matrix3Xd& points) const override;

 private:
  Vec3 center_;
  double radius_;
  Vec3 rgb_;
};

struct RenderOptions {
  bool need_color = true;
  /// Samples whose compositing weight is at most this skip color evaluation, and backward
  /// contributions at most this (relative to the largest) are dropped. Zero keeps everything.
  double cutoff = 0.0;
  /// When set, each ray's [near, far] is clipped to this box and all samples land inside it.
  std::optional<Box3> clip_box;
};

/// Per-ray results plus the per-sample state the backward pass needs. Matrices are
/// samples x rays.
struct RayBatch {
  std::vector<Ray> rays;
  std::vector<bool> active;
  Eigen::MatrixXd mu;
  Eigen::MatrixXd sdf;
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd weights;
  std::vector<Eigen::Matrix3Xd> sample_rgb;  ///< per ray; empty when color was skipped
  Eigen::Matrix3Xd rgb;
  Eigen::VectorXd opacity;
  Eigen::VectorXd depth;

  std::size_t size() const { return rays.size(); }
  Vec3 sample_point(std::size_t ray, int sample) const {
    return rays[ray].at(mu(sample, static_cast<Eigen::Index>(ray)));
  }
};

RayBatch render_rays(const RadianceField& field, const DensityParams& dp, std::span<const Ray> rays,
                     const SamplingConfig& sampling, std::mt19937_64& rng,
                     const RenderOptions& options = {});

/// Gradients with respect to the field outputs at individual sample points.
struct SampleGradients {
  Eigen::Matrix3Xd sdf_points;
  Eigen::VectorXd d_sdf;
  Eigen::Matrix3Xd color_points;
  Eigen::Matrix3Xd d_color;
};

/// Reverse pass through compositing. Any of the per-ray output gradients may be null.
SampleGradients render_backward(const RayBatch& batch, const DensityParams& dp,
                                const Eigen::Matrix3Xd* d_rgb, const Eigen::VectorXd* d_opacity,
                                const Eigen::VectorXd* d_depth, double cutoff = 0.0);

/// Pushes sample-level gradients through the networks into a parameter gradient.
void accumulate_field_gradient(const FieldParams& params, const SampleGradients& samples,
                               FieldGradient& grad);

/// A rendered view. Pixel (col, row) is stored at index row * width + col; `rgb` already has
/// the background composited in.
struct RenderOutput {
  int width = 0;
  int height = 0;
  Eigen::Matrix3Xd rgb;
  Eigen::VectorXd opacity;
  Eigen::VectorXd depth;
  Eigen::MatrixXd weights;
  Vec3 background = Vec3::Zero();
  RayBatch batch;
};

std::vector<Ray> pixel_rays(const CameraIntrinsics& intr, const CameraPose& pose);

RenderOutput render_view(const RadianceField& field, const DensityParams& dp,
                         const CameraPose& camera, const CameraIntrinsics& intrinsics, int width,
                         int height, const Vec3& background, const SamplingConfig& sampling,
                         std::uint64_t seed, const RenderOptions& options = {});

/// Renders an explicit ray set and composites a background; pixels follow ray order.
RenderOutput render_ray_image(const RadianceField& field, const DensityParams& dp,
                              std::vector<Ray> rays, int width, int height,
                              const Vec3& background, const SamplingConfig& sampling,
                              std::mt19937_64& rng, const RenderOptions& options = {});

/// Chains an image-space gradient (d loss / d final rgb) into sample gradients.
SampleGradients render_view_backward(const RenderOutput& view, const DensityParams& dp,
                                     const Eigen::Matrix3Xd& d_image, double cutoff = 0.0);

struct SensorRender {
  Eigen::VectorXd opacity;
  Eigen::VectorXd depth;
  RayBatch batch;
};

SensorRender render_sensor(const RadianceField& field, const DensityParams& dp,
                           std::span<const Ray> rays, const SamplingConfig& sampling,
                           std::uint64_t seed, const RenderOptions& options = {});

/// 8-bit RGB PNG of the colors and a 16-bit grayscale PNG of depth in millimeters
/// (`meters_per_unit` converts scene units; zero where opacity < 0.5).
void write_debug_images(const RenderOutput& view, const std::string& rgb_path,
                        const std::string& depth_path, double meters_per_unit);

}  // namespace scanfill
