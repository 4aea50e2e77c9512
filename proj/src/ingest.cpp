#include "scanfill/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "scanfill/error.hpp"

namespace scanfill {
namespace {

constexpr double kPi = std::numbers::pi;

int wrap(int c, int n) { return ((c % n) + n) % n; }

}  // namespace

Normalization Normalization::then(const Normalization& next) const {
  // next.scale * (scale * (x - center) - next.center) = s' (x - c')
  Normalization out;
  out.scale = scale * next.scale;
  out.center = center + next.center / scale;
  return out;
}

void SensorObservation::validate(double tolerance) const {
  const auto n = static_cast<Eigen::Index>(rays.size());
  if (mask.size() != n || depth.size() != n) {
    fail(ErrorCode::kInvalidArgument, "observation arrays differ in length");
  }
  if (static_cast<std::size_t>(grid_width) * grid_height != rays.size()) {
    fail(ErrorCode::kInvalidArgument, "observation grid does not match its rays");
  }
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (mask[i] < 0.5) continue;
    if (k >= points.size()) fail(ErrorCode::kInvalidArgument, "fewer points than observed rays");
    if ((rays[i].at(depth[i]) - points[k]).norm() > tolerance) {
      fail(ErrorCode::kInvalidArgument, "point " + std::to_string(k) + " is off its ray");
    }
    ++k;
  }
  if (k != points.size()) fail(ErrorCode::kInvalidArgument, "more points than observed rays");
}

SensorObservation depth_to_observation(const Image16& depth, const Image8& mask,
                                       const CameraIntrinsics& intrinsics, const CameraPose& pose) {
  intrinsics.validate();
  if (depth.width != mask.width || depth.height != mask.height) {
    fail(ErrorCode::kInvalidArgument, "depth and mask images differ in size");
  }
  if (depth.width != intrinsics.width || depth.height != intrinsics.height) {
    fail(ErrorCode::kInvalidArgument, "depth image does not match the intrinsics");
  }
  SensorObservation obs;
  obs.kind = SensorKind::kDepthCamera;
  obs.grid_width = depth.width;
  obs.grid_height = depth.height;
  obs.pose = pose;
  obs.intrinsics = intrinsics;
  const std::size_t n = static_cast<std::size_t>(depth.width) * depth.height;
  obs.rays.reserve(n);
  obs.mask = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  obs.depth = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  const Vec3 axis = pose.principal_axis();
  for (int row = 0; row < depth.height; ++row) {
    for (int col = 0; col < depth.width; ++col) {
      const std::size_t i = obs.rays.size();
      const Ray ray = backproject(intrinsics, pose, col, row);
      obs.rays.push_back(ray);
      const std::uint16_t mm = depth.at(col, row);
      if (mm == 0) continue;
      // z-depth to distance along the unit ray.
      const double distance = mm * 1e-3 / ray.direction.dot(axis);
      bool foreground = false;
      for (int c = 0; c < std::min(mask.channels, 3); ++c) {
        foreground |= mask.pixels[i * mask.channels + c] > 0;
      }
      if (foreground) {
        obs.mask[static_cast<Eigen::Index>(i)] = 1.0;
        obs.depth[static_cast<Eigen::Index>(i)] = distance;
        obs.points.push_back(ray.at(distance));
      } else {
        obs.background.push_back(ray.at(distance));
      }
    }
  }
  if (obs.points.empty()) fail(ErrorCode::kEmptyObservation, "no foreground pixel has a valid depth");
  return obs;
}

void LidarConfig::validate() const {
  if (rows < 1 || cols < 1 || !(fov_up_deg > fov_down_deg) || crop_margin < 0) {
    fail(ErrorCode::kInvalidArgument, "invalid LiDAR projection settings");
  }
}

LidarCell lidar_cell(const Vec3& p, const LidarConfig& cfg) {
  const double r = p.norm();
  const double yaw = std::atan2(p.y(), p.x());
  const double pitch = std::asin(std::clamp(p.z() / r, -1.0, 1.0));
  const double fov_down = deg2rad(cfg.fov_down_deg);
  const double fov = deg2rad(cfg.fov_deg());
  LidarCell cell;
  cell.col = std::clamp(static_cast<int>(std::floor(0.5 * (1.0 - yaw / kPi) * cfg.cols)), 0, cfg.cols - 1);
  cell.row = static_cast<int>(std::floor((1.0 - (pitch - fov_down) / fov) * cfg.rows));
  return cell;
}

Vec3 RangeImage::cell_direction(int row, int col) const {
  return direction[static_cast<std::size_t>(row) * cols + wrap(col, cols)];
}

RangeImage lidar_project(std::span<const Vec3> points, const LidarConfig& cfg) {
  cfg.validate();
  if (points.empty()) fail(ErrorCode::kEmptyObservation, "no LiDAR points to project");
  RangeImage img;
  img.rows = cfg.rows;
  img.cols = cfg.cols;
  img.range = Eigen::MatrixXd::Zero(cfg.rows, cfg.cols);
  img.direction.resize(static_cast<std::size_t>(cfg.rows) * cfg.cols);
  const double fov_down = deg2rad(cfg.fov_down_deg);
  const double fov = deg2rad(cfg.fov_deg());
  for (int row = 0; row < cfg.rows; ++row) {
    const double pitch = fov_down + (1.0 - (row + 0.5) / cfg.rows) * fov;
    for (int col = 0; col < cfg.cols; ++col) {
      const double yaw = kPi * (1.0 - 2.0 * (col + 0.5) / cfg.cols);
      img.direction[static_cast<std::size_t>(row) * cfg.cols + col] =
          Vec3(std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw), std::sin(pitch));
    }
  }
  std::vector<bool> used_col(cfg.cols, false);
  img.min_row = cfg.rows;
  img.max_row = -1;
  for (const Vec3& p : points) {
    const double r = p.norm();
    if (!(r > 0.0)) continue;
    const LidarCell c = lidar_cell(p, cfg);
    if (c.row < 0 || c.row >= cfg.rows) continue;
    double& cell = img.range(c.row, c.col);
    if (cell == 0.0 || r < cell) {
      cell = r;
      img.direction[static_cast<std::size_t>(c.row) * cfg.cols + c.col] = p / r;
    }
    used_col[c.col] = true;
    img.min_row = std::min(img.min_row, c.row);
    img.max_row = std::max(img.max_row, c.row);
  }
  if (img.max_row < 0) fail(ErrorCode::kEmptyObservation, "no LiDAR point inside the vertical fov");

  // Occupied columns live on a circle: the span is the complement of the widest empty gap.
  int first = -1;
  for (int c = 0; c < cfg.cols; ++c) {
    if (used_col[c]) {
      first = c;
      break;
    }
  }
  int best_gap = -1, gap_end = first;
  int prev = first;
  for (int k = 1; k <= cfg.cols; ++k) {
    const int c = wrap(first + k, cfg.cols);
    if (!used_col[c]) continue;
    const int gap = wrap(c - prev - 1, cfg.cols);  // empty columns strictly between prev and c
    if (gap > best_gap) {
      best_gap = gap;
      gap_end = c;
    }
    prev = c;
  }
  img.min_col = gap_end;
  img.max_col = gap_end + (cfg.cols - 1 - best_gap);
  img.crop_col_begin = img.min_col - cfg.crop_margin;
  img.crop_col_end = img.max_col + cfg.crop_margin;
  img.crop_row_begin = std::max(img.min_row - cfg.crop_margin, 0);
  img.crop_row_end = std::min(img.max_row + cfg.crop_margin + 1, cfg.rows);
  return img;
}

SensorObservation lidar_to_observation(std::span<const Vec3> object, std::span<const Vec3> scene,
                                       const LidarConfig& cfg) {
  const RangeImage img = lidar_project(object, cfg);
  SensorObservation obs;
  obs.kind = SensorKind::kLidar;
  obs.grid_width = img.crop_width();
  obs.grid_height = img.crop_row_end - img.crop_row_begin;
  const auto n = static_cast<Eigen::Index>(obs.grid_width) * obs.grid_height;
  obs.mask = Eigen::VectorXd::Zero(n);
  obs.depth = Eigen::VectorXd::Zero(n);
  obs.rays.reserve(static_cast<std::size_t>(n));
  for (int row = img.crop_row_begin; row < img.crop_row_end; ++row) {
    for (int col = img.crop_col_begin; col < img.crop_col_end; ++col) {
      const Eigen::Index i = static_cast<Eigen::Index>(obs.rays.size());
      const Ray ray{Vec3::Zero(), img.cell_direction(row, col)};
      obs.rays.push_back(ray);
      const double r = img.range(row, wrap(col, img.cols));
      if (r > 0.0) {
        obs.mask[i] = 1.0;
        obs.depth[i] = r;
        obs.points.push_back(ray.at(r));
      }
    }
  }
  obs.background.assign(scene.begin(), scene.end());
  // C0 looks horizontally from the sensor toward the object's mass center.
  Vec3 center = Vec3::Zero();
  for (const auto& p : obs.points) center += p;
  center /= static_cast<double>(obs.points.size());
  Vec3 target(center.x(), center.y(), 0.0);
  if (target.norm() < 1e-9) target = Vec3::UnitX();
  obs.pose = look_at(Vec3::Zero(), target, Vec3::UnitZ());
  return obs;
}

CentralizationInfo centralize_and_scale(std::span<const Vec3> points, SensorKind kind) {
  if (points.size() < 4) fail(ErrorCode::kInvalidArgument, "centralization needs at least 4 points");
  Vec3 mass = Vec3::Zero();
  for (const auto& p : points) mass += p;
  mass /= static_cast<double>(points.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : points) cov += (p - mass) * (p - mass).transpose();
  double spread = 0.0;
  for (const auto& p : points) spread = std::max(spread, (p - mass).norm());
  if (!(spread > 0.0)) fail(ErrorCode::kInvalidArgument, "all points coincide");

  const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  const Mat3 axes = eig.eigenvectors();
  Vec3 lo = Vec3::Constant(INFINITY), hi = Vec3::Constant(-INFINITY);
  for (const auto& p : points) {
    const Vec3 q = axes.transpose() * (p - mass);
    lo = lo.cwiseMin(q);
    hi = hi.cwiseMax(q);
  }
  double near = INFINITY, far = 0.0;
  for (int k = 0; k < 8; ++k) {
    const Vec3 corner((k & 1) ? hi.x() : lo.x(), (k & 2) ? hi.y() : lo.y(), (k & 4) ? hi.z() : lo.z());
    near = std::min(near, corner.norm());
    far = std::max(far, corner.norm());
  }
  CentralizationInfo info;
  info.corner_ratio = near > 0.0 ? far / near : INFINITY;
  info.used_box_center = kind == SensorKind::kLidar || info.corner_ratio > 1.7;
  const Vec3 center = info.used_box_center ? Vec3(mass + axes * (0.5 * (lo + hi))) : mass;

  double radius = 0.0;
  for (const auto& p : points) radius = std::max(radius, (p - center).norm());
  double scale = 0.5 / radius;
  // Nudge the scale by ulps until the largest transformed norm is exactly 0.5.
  auto largest = [&](double s) {
    double m = 0.0;
    for (const auto& p : points) m = std::max(m, (s * (p - center)).norm());
    return m;
  };
  for (int step = 0; step < 64; ++step) {
    const double m = largest(scale);
    if (m == 0.5) break;
    scale = std::nextafter(scale, m > 0.5 ? 0.0 : INFINITY);
  }
  info.transform.center = center;
  info.transform.scale = scale;
  return info;
}

SensorObservation normalize(const SensorObservation& obs, const Normalization& n) {
  SensorObservation out = obs;
  for (auto& p : out.points) p = n.apply(p);
  for (auto& p : out.background) p = n.apply(p);
  for (auto& r : out.rays) r.origin = n.apply(r.origin);
  out.depth *= n.scale;
  out.pose.translation = n.apply(obs.pose.translation);
  if (obs.plane) out.plane = obs.plane->transformed(n.center, n.scale);
  out.normalization = obs.normalization.then(n);
  return out;
}

Plane estimate_ground_plane(const SensorObservation& obs, double inlier_threshold, int iterations,
                            std::uint64_t seed) {
  const PlaneFit fit = fit_plane_ransac(obs.background, inlier_threshold, iterations, seed);
  return fit.plane.oriented_toward(obs.pose.translation);
}

SensorObservation prepare_observation(const SensorObservation& raw, const PrepareOptions& options) {
  const CentralizationInfo c = centralize_and_scale(raw.points, raw.kind);
  SensorObservation obs = normalize(raw, c.transform);
  if (options.plane) {
    obs.plane = options.plane->transformed(c.transform.center, c.transform.scale)
                    .oriented_toward(obs.pose.translation);
  } else {
    obs.plane = estimate_ground_plane(obs, options.plane_threshold, options.plane_iterations,
                                      options.plane_seed);
  }
  return obs;
}

}  // namespace scanfill
