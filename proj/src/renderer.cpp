#include "scanfill/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "scanfill/error.hpp"
#include "scanfill/io.hpp"

namespace scanfill {
namespace {

using Eigen::Matrix3Xd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

bool clip_to_box(const Ray& ray, const Box3& box, double& t0, double& t1) {
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a];
    const double d = ray.direction[a];
    if (std::abs(d) < 1e-15) {
      if (o < box.lo[a] || o > box.hi[a]) return false;
      continue;
    }
    double ta = (box.lo[a] - o) / d;
    double tb = (box.hi[a] - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t1 > t0;
}

// Segment lengths; the last one repeats its predecessor.
double segment_length(const double* mu, int i, int n) {
  return i + 1 < n ? mu[i + 1] - mu[i] : mu[n - 1] - mu[n - 2];
}

}  // namespace

void SamplingConfig::validate() const {
  if (!(near >= 0.0) || !(far > near) || samples_per_ray < 2) {
    fail(ErrorCode::kInvalidArgument, "sampling needs 0 <= near < far and at least 2 samples");
  }
}

void sample_distances(double near, double far, int count, bool stratified, std::mt19937_64& rng,
                      std::span<double> out) {
  const double width = (far - near) / count;
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  for (int i = 0; i < count; ++i) {
    const double offset = stratified ? jitter(rng) : 0.5;
    out[i] = near + (i + offset) * width;
  }
  // A jitter of exactly 0 can tie with the previous bin's upper edge draw only in theory;
  // enforce strict increase anyway.
  for (int i = 1; i < count; ++i) {
    if (!(out[i] > out[i - 1])) out[i] = std::nextafter(out[i - 1], far);
  }
}

std::vector<double> sample_distances(const SamplingConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::vector<double> mu(cfg.samples_per_ray);
  sample_distances(cfg.near, cfg.far, cfg.samples_per_ray, cfg.stratified, rng, mu);
  return mu;
}

Composite composite(std::span<const double> sigma, std::span<const Vec3> rgb,
                    std::span<const double> mu) {
  const std::size_t n = mu.size();
  if (n < 2 || sigma.size() != n || rgb.size() != n) {
    fail(ErrorCode::kInvalidArgument, "composite needs equal-length arrays of at least 2 samples");
  }
  for (std::size_t i = 1; i < n; ++i) {
    if (!(mu[i] > mu[i - 1])) fail(ErrorCode::kInvalidArgument, "sample distances must increase");
  }
  Composite out;
  out.weights.resize(n);
  double transmittance = 1.0;
  double depth_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double optical = sigma[i] * segment_length(mu.data(), static_cast<int>(i), static_cast<int>(n));
    const double w = transmittance * -std::expm1(-optical);
    out.weights[i] = w;
    out.rgb += w * rgb[i];
    out.opacity += w;
    depth_sum += w * mu[i];
    transmittance *= std::exp(-optical);
  }
  out.opacity = std::min(out.opacity, 1.0);  // the weight sum can overshoot by an ulp
  out.depth = depth_sum / std::max(out.opacity, kDepthFloor);
  return out;
}

VectorXd NeuralField::sdf(const Matrix3Xd& points) const { return sdf_values(params_, points); }

Matrix3Xd NeuralField::color(const Matrix3Xd& points) const {
  return color_values(params_, points);
}

VectorXd AnalyticSphere::sdf(const Matrix3Xd& points) const {
  return ((points.colwise() - center_).colwise().norm().array() - radius_).matrix().transpose();
}

Matrix3Xd AnalyticSphere::color(const Matrix3Xd& points) const {
  return rgb_.replicate(1, points.cols());
}

RayBatch render_rays(const RadianceField& field, const DensityParams& dp, std::span<const Ray> rays,
                     const SamplingConfig& sampling, std::mt19937_64& rng,
                     const RenderOptions& options) {
  sampling.validate();
  dp.validate();
  const int ns = sampling.samples_per_ray;
  const auto nr = static_cast<Eigen::Index>(rays.size());

  RayBatch b;
  b.rays.assign(rays.begin(), rays.end());
  b.active.assign(rays.size(), false);
  b.mu = MatrixXd::Zero(ns, nr);
  b.sdf = MatrixXd::Zero(ns, nr);
  b.sigma = MatrixXd::Zero(ns, nr);
  b.weights = MatrixXd::Zero(ns, nr);
  b.rgb = Matrix3Xd::Zero(3, nr);
  b.opacity = VectorXd::Zero(nr);
  b.depth = VectorXd::Zero(nr);
  if (options.need_color) b.sample_rgb.assign(rays.size(), Matrix3Xd());

  std::vector<Eigen::Index> active;
  for (Eigen::Index r = 0; r < nr; ++r) {
    double t0 = sampling.near;
    double t1 = sampling.far;
    if (options.clip_box && !clip_to_box(rays[r], *options.clip_box, t0, t1)) continue;
    b.active[r] = true;
    active.push_back(r);
    sample_distances(t0, t1, ns, sampling.stratified, rng,
                     std::span<double>(b.mu.col(r).data(), static_cast<std::size_t>(ns)));
  }
  if (active.empty()) return b;

  Matrix3Xd points(3, static_cast<Eigen::Index>(active.size()) * ns);
  for (std::size_t k = 0; k < active.size(); ++k) {
    const Ray& ray = rays[active[k]];
    for (int i = 0; i < ns; ++i) points.col(k * ns + i) = ray.at(b.mu(i, active[k]));
  }
  const VectorXd f = field.sdf(points);

  std::vector<Eigen::Index> color_index;
  for (std::size_t k = 0; k < active.size(); ++k) {
    const Eigen::Index r = active[k];
    double transmittance = 1.0;
    for (int i = 0; i < ns; ++i) {
      const double fi = f[k * ns + i];
      const double sigma = density_from_sdf(fi, dp);
      const double optical = sigma * segment_length(b.mu.col(r).data(), i, ns);
      const double w = transmittance * -std::expm1(-optical);
      transmittance *= std::exp(-optical);
      b.sdf(i, r) = fi;
      b.sigma(i, r) = sigma;
      b.weights(i, r) = w;
      if (options.need_color && w > options.cutoff) {
        color_index.push_back(static_cast<Eigen::Index>(k) * ns + i);
      }
    }
    b.opacity[r] = std::min(b.weights.col(r).sum(), 1.0);
    b.depth[r] = b.weights.col(r).dot(b.mu.col(r)) / std::max(b.opacity[r], kDepthFloor);
  }

  if (options.need_color) {
    Matrix3Xd color_points(3, static_cast<Eigen::Index>(color_index.size()));
    for (std::size_t j = 0; j < color_index.size(); ++j) color_points.col(j) = points.col(color_index[j]);
    const Matrix3Xd colors = field.color(color_points);
    for (auto r : active) b.sample_rgb[r] = Matrix3Xd::Zero(3, ns);
    for (std::size_t j = 0; j < color_index.size(); ++j) {
      const Eigen::Index r = active[color_index[j] / ns];
      const Eigen::Index i = color_index[j] % ns;
      b.sample_rgb[r].col(i) = colors.col(j);
    }
    for (auto r : active) b.rgb.col(r) = b.sample_rgb[r] * b.weights.col(r);
  }
  return b;
}

SampleGradients render_backward(const RayBatch& batch, const DensityParams& dp,
                                const Matrix3Xd* d_rgb, const VectorXd* d_opacity,
                                const VectorXd* d_depth, double cutoff) {
  const auto nr = static_cast<Eigen::Index>(batch.size());
  const int ns = static_cast<int>(batch.mu.rows());
  if ((d_rgb && d_rgb->cols() != nr) || (d_opacity && d_opacity->size() != nr) ||
      (d_depth && d_depth->size() != nr)) {
    fail(ErrorCode::kInvalidArgument, "per-ray gradient size mismatch");
  }
  if (d_rgb && batch.sample_rgb.empty()) {
    fail(ErrorCode::kInvalidArgument, "color gradient requested for a batch rendered without color");
  }

  MatrixXd d_f = MatrixXd::Zero(ns, nr);
  std::vector<std::pair<Eigen::Index, int>> color_samples;
  std::vector<double> value(ns);
  for (Eigen::Index r = 0; r < nr; ++r) {
    if (!batch.active[r]) continue;
    const double* mu = batch.mu.col(r).data();
    const double opacity = batch.opacity[r];
    double g_depth_sum = 0.0;
    double g_opacity = d_opacity ? (*d_opacity)[r] : 0.0;
    if (d_depth) {
      const double gd = (*d_depth)[r];
      if (opacity > kDepthFloor) {
        g_depth_sum = gd / opacity;
        g_opacity -= gd * batch.weights.col(r).dot(batch.mu.col(r)) / (opacity * opacity);
      } else {
        g_depth_sum = gd / kDepthFloor;
      }
    }
    for (int i = 0; i < ns; ++i) {
      double v = g_opacity + g_depth_sum * mu[i];
      if (d_rgb) v += d_rgb->col(r).dot(batch.sample_rgb[r].col(i));
      value[i] = v;
    }
    // dL/dsigma_i = delta_i * (T_{i+1} v_i - sum_{j > i} w_j v_j)
    double tail = 0.0;
    std::vector<double> transmittance_after(ns);
    double transmittance = 1.0;
    for (int i = 0; i < ns; ++i) {
      transmittance *= std::exp(-batch.sigma(i, r) * segment_length(mu, i, ns));
      transmittance_after[i] = transmittance;
    }
    for (int i = ns - 1; i >= 0; --i) {
      const double delta = segment_length(mu, i, ns);
      const double d_sigma = delta * (transmittance_after[i] * value[i] - tail);
      tail += batch.weights(i, r) * value[i];
      d_f(i, r) = d_sigma * density_derivative(batch.sdf(i, r), dp);
    }
    if (d_rgb && !d_rgb->col(r).isZero(0.0)) {
      for (int i = 0; i < ns; ++i) {
        if (batch.weights(i, r) > cutoff) color_samples.emplace_back(r, i);
      }
    }
  }

  SampleGradients out;
  const double largest = d_f.cwiseAbs().maxCoeff();
  const double threshold = cutoff * largest;
  std::vector<std::pair<Eigen::Index, int>> sdf_samples;
  for (Eigen::Index r = 0; r < nr; ++r) {
    if (!batch.active[r]) continue;
    for (int i = 0; i < ns; ++i) {
      const double g = std::abs(d_f(i, r));
      if (g > threshold && g > 0.0) sdf_samples.emplace_back(r, i);
    }
  }
  out.sdf_points.resize(3, static_cast<Eigen::Index>(sdf_samples.size()));
  out.d_sdf.resize(static_cast<Eigen::Index>(sdf_samples.size()));
  for (std::size_t j = 0; j < sdf_samples.size(); ++j) {
    const auto [r, i] = sdf_samples[j];
    out.sdf_points.col(j) = batch.sample_point(r, i);
    out.d_sdf[j] = d_f(i, r);
  }
  out.color_points.resize(3, static_cast<Eigen::Index>(color_samples.size()));
  out.d_color.resize(3, static_cast<Eigen::Index>(color_samples.size()));
  for (std::size_t j = 0; j < color_samples.size(); ++j) {
    const auto [r, i] = color_samples[j];
    out.color_points.col(j) = batch.sample_point(r, i);
    out.d_color.col(j) = batch.weights(i, r) * d_rgb->col(r);
  }
  return out;
}

void accumulate_field_gradient(const FieldParams& params, const SampleGradients& samples,
                               FieldGradient& grad) {
  if (samples.sdf_points.cols() > 0) sdf_backward(params, samples.sdf_points, samples.d_sdf, grad);
  if (samples.color_points.cols() > 0) {
    color_backward(params, samples.color_points, samples.d_color, grad);
  }
}

std::vector<Ray> pixel_rays(const CameraIntrinsics& intr, const CameraPose& pose) {
  intr.validate();
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(intr.width) * intr.height);
  for (int row = 0; row < intr.height; ++row) {
    for (int col = 0; col < intr.width; ++col) rays.push_back(backproject(intr, pose, col, row));
  }
  return rays;
}

RenderOutput render_ray_image(const RadianceField& field, const DensityParams& dp,
                              std::vector<Ray> rays, int width, int height,
                              const Vec3& background, const SamplingConfig& sampling,
                              std::mt19937_64& rng, const RenderOptions& options) {
  if (width < 1 || height < 1 || static_cast<std::size_t>(width) * height != rays.size()) {
    fail(ErrorCode::kInvalidArgument, "ray count does not match the image size");
  }
  RenderOutput out;
  out.width = width;
  out.height = height;
  out.background = background;
  RenderOptions opts = options;
  opts.need_color = true;
  out.batch = render_rays(field, dp, rays, sampling, rng, opts);
  out.opacity = out.batch.opacity;
  out.depth = out.batch.depth;
  out.weights = out.batch.weights;
  out.rgb = out.batch.rgb + background * (1.0 - out.opacity.array()).matrix().transpose();
  return out;
}

RenderOutput render_view(const RadianceField& field, const DensityParams& dp,
                         const CameraPose& camera, const CameraIntrinsics& intrinsics, int width,
                         int height, const Vec3& background, const SamplingConfig& sampling,
                         std::uint64_t seed, const RenderOptions& options) {
  const CameraIntrinsics intr = intrinsics.resized(width, height);
  std::mt19937_64 rng(seed);
  return render_ray_image(field, dp, pixel_rays(intr, camera), width, height, background,
                          sampling, rng, options);
}

SampleGradients render_view_backward(const RenderOutput& view, const DensityParams& dp,
                                     const Matrix3Xd& d_image, double cutoff) {
  if (d_image.cols() != view.rgb.cols()) fail(ErrorCode::kInvalidArgument, "image gradient size");
  const VectorXd d_opacity = -(view.background.transpose() * d_image).transpose();
  return render_backward(view.batch, dp, &d_image, &d_opacity, nullptr, cutoff);
}

SensorRender render_sensor(const RadianceField& field, const DensityParams& dp,
                           std::span<const Ray> rays, const SamplingConfig& sampling,
                           std::uint64_t seed, const RenderOptions& options) {
  if (rays.empty()) fail(ErrorCode::kInvalidArgument, "no sensor rays to render");
  std::mt19937_64 rng(seed);
  RenderOptions opts = options;
  opts.need_color = false;
  SensorRender out;
  out.batch = render_rays(field, dp, rays, sampling, rng, opts);
  out.opacity = out.batch.opacity;
  out.depth = out.batch.depth;
  return out;
}

void write_debug_images(const RenderOutput& view, const std::string& rgb_path,
                        const std::string& depth_path, double meters_per_unit) {
  const std::size_t n = static_cast<std::size_t>(view.width) * view.height;
  std::vector<std::uint8_t> rgb(3 * n);
  std::vector<std::uint16_t> depth(n, 0);
  for (std::size_t p = 0; p < n; ++p) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(view.rgb(c, static_cast<Eigen::Index>(p)), 0.0, 1.0);
      rgb[3 * p + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    if (view.opacity[static_cast<Eigen::Index>(p)] >= 0.5) {
      const double mm = view.depth[static_cast<Eigen::Index>(p)] * meters_per_unit * 1000.0;
      depth[p] = static_cast<std::uint16_t>(std::clamp(std::lround(mm), 0L, 65535L));
    }
  }
  write_png_rgb8(rgb_path, view.width, view.height, rgb);
  write_png_gray16(depth_path, view.width, view.height, depth);
}

}  // namespace scanfill
