#include "scanfill/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include "scanfill/error.hpp"

namespace scanfill {

double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

Rotation3::Rotation3(const Mat3& m) : m_(m) {
  if (!m.allFinite() || (m * m.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
      std::abs(m.determinant() - 1.0) > 1e-9) {
    fail(ErrorCode::kInvalidArgument, "matrix is not a proper rotation");
  }
}

Rotation3 Rotation3::operator*(const Rotation3& other) const {
  return Rotation3(m_ * other.m_, Unchecked{});
}

Rotation3 Rotation3::transpose() const { return Rotation3(m_.transpose(), Unchecked{}); }

CameraPose look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  Vec3 forward = target - eye;
  if (forward.norm() < 1e-12) fail(ErrorCode::kInvalidArgument, "look_at: eye equals target");
  forward.normalize();
  Vec3 down = -(up - up.dot(forward) * forward);
  if (down.norm() < 1e-9) fail(ErrorCode::kInvalidArgument, "look_at: up parallel to view");
  down.normalize();
  Mat3 r;
  r.col(0) = down.cross(forward);
  r.col(1) = down;
  r.col(2) = forward;
  return CameraPose{Rotation3(r), eye};
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || width < 1 || height < 1) {
    fail(ErrorCode::kInvalidArgument, "intrinsics need fx, fy > 0 and a non-empty image");
  }
}

CameraIntrinsics CameraIntrinsics::resized(int new_width, int new_height) const {
  validate();
  if (new_width < 1 || new_height < 1) fail(ErrorCode::kInvalidArgument, "empty target size");
  const double sx = static_cast<double>(new_width) / width;
  const double sy = static_cast<double>(new_height) / height;
  // Integer pixel centers: a pixel edge at -0.5 must map to -0.5.
  return CameraIntrinsics{fx * sx, fy * sy, (cx + 0.5) * sx - 0.5, (cy + 0.5) * sy - 0.5,
                          new_width, new_height};
}

Plane Plane::from_point_normal(const Vec3& point, const Vec3& normal) {
  const double n = normal.norm();
  if (!(n > 1e-12)) fail(ErrorCode::kInvalidArgument, "plane normal is zero");
  Vec3 unit = normal / n;
  return Plane{unit, -unit.dot(point)};
}

Plane Plane::oriented_toward(const Vec3& point) const {
  if (signed_distance(point) < 0.0) return Plane{-normal, -offset};
  return *this;
}

Plane Plane::transformed(const Vec3& shift, double scale) const {
  // n.x + d = 0 with x = x'/scale + shift.
  return Plane{normal, (offset + normal.dot(shift)) * scale};
}

Rotation3 rodrigues_rotation(const Vec3& axis, double angle_deg) {
  if (std::abs(axis.norm() - 1.0) > 1e-6) {
    fail(ErrorCode::kInvalidArgument, "rotation axis must have unit norm");
  }
  const Vec3 k = axis.normalized();
  Mat3 kx;
  kx << 0.0, -k.z(), k.y(), k.z(), 0.0, -k.x(), -k.y(), k.x(), 0.0;
  const double a = deg2rad(angle_deg);
  Mat3 r = Mat3::Identity() + std::sin(a) * kx + (1.0 - std::cos(a)) * kx * kx;
  return Rotation3(r);
}

CameraPose camera_update(const CameraPose& c0, const Plane& plane, double gamma_azimuth_deg,
                         double gamma_elevation_deg) {
  const Vec3 a0 = c0.principal_axis();
  Vec3 elevation_axis = plane.normal.cross(a0);
  if (elevation_axis.norm() < 1e-9) {
    fail(ErrorCode::kDegenerateElevationAxis, "plane normal is parallel to the principal axis");
  }
  elevation_axis.normalize();
  const Rotation3 r_az = rodrigues_rotation(plane.normal, gamma_azimuth_deg);
  const Rotation3 r_el = rodrigues_rotation(elevation_axis, gamma_elevation_deg);
  const Rotation3 r = r_az * r_el;
  return CameraPose{r * c0.rotation, r * c0.translation};
}

Ray backproject(const CameraIntrinsics& intr, const CameraPose& pose, double u, double v) {
  intr.validate();
  if (u < -0.5 || v < -0.5 || u > intr.width - 0.5 || v > intr.height - 0.5) {
    fail(ErrorCode::kInvalidArgument, "pixel outside the image");
  }
  const Vec3 d_cam((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
  return Ray{pose.translation, (pose.rotation * d_cam).normalized()};
}

PixelProjection project(const CameraIntrinsics& intr, const CameraPose& pose,
                        const Vec3& p_world) {
  const Vec3 p = pose.to_camera(p_world);
  return PixelProjection{intr.fx * p.x() / p.z() + intr.cx, intr.fy * p.y() / p.z() + intr.cy,
                         p.z()};
}

namespace {

Plane refit_total_least_squares(std::span<const Vec3> points,
                                const std::vector<std::size_t>& inliers) {
  Vec3 mean = Vec3::Zero();
  for (auto i : inliers) mean += points[i];
  mean /= static_cast<double>(inliers.size());
  Mat3 cov = Mat3::Zero();
  for (auto i : inliers) {
    const Vec3 d = points[i] - mean;
    cov += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  Vec3 n = eig.eigenvectors().col(0);  // smallest eigenvalue first
  Eigen::Index k = 0;
  n.cwiseAbs().maxCoeff(&k);
  if (n[k] < 0.0) n = -n;
  return Plane::from_point_normal(mean, n);
}

}  // namespace

PlaneFit fit_plane_ransac(std::span<const Vec3> points, double inlier_threshold, int iterations,
                          std::uint64_t seed) {
  const std::size_t n = points.size();
  if (n < 3) fail(ErrorCode::kInsufficientData, "plane fitting needs at least 3 points");
  if (iterations < 1 || !(inlier_threshold > 0.0)) {
    fail(ErrorCode::kInvalidArgument, "iterations and threshold must be positive");
  }

  double extent = 0.0;
  for (const auto& p : points) extent = std::max(extent, (p - points[0]).norm());

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> best;
  std::vector<std::size_t> current;
  Plane best_plane;
  for (int it = 0; it < iterations; ++it) {
    const std::size_t i = pick(rng);
    const std::size_t j = pick(rng);
    const std::size_t k = pick(rng);
    if (i == j || j == k || i == k) continue;
    const Vec3 normal = (points[j] - points[i]).cross(points[k] - points[i]);
    if (normal.norm() <= 1e-12 * std::max(extent * extent, 1e-300)) continue;
    const Plane h = Plane::from_point_normal(points[i], normal);
    current.clear();
    for (std::size_t m = 0; m < n; ++m) {
      if (std::abs(h.signed_distance(points[m])) <= inlier_threshold) current.push_back(m);
    }
    if (current.size() > best.size()) {
      best.swap(current);
      best_plane = h;
    }
  }
  if (best.size() < 3) fail(ErrorCode::kNoPlaneFound, "every RANSAC hypothesis was degenerate");

  PlaneFit fit{refit_total_least_squares(points, best), {}};
  for (std::size_t m = 0; m < n; ++m) {
    if (std::abs(fit.plane.signed_distance(points[m])) <= inlier_threshold) {
      fit.inliers.push_back(m);
    }
  }
  // The refit only loses inliers on badly conditioned sets; keep the hypothesis then.
  if (fit.inliers.size() < best.size()) {
    Eigen::Index k = 0;
    best_plane.normal.cwiseAbs().maxCoeff(&k);
    if (best_plane.normal[k] < 0.0) best_plane = Plane{-best_plane.normal, -best_plane.offset};
    fit = PlaneFit{best_plane, std::move(best)};
  }
  return fit;
}

double elevation_of(const CameraPose& c0, const Plane& plane) {
  const Plane oriented = plane.oriented_toward(c0.translation);
  const double s = std::clamp(-c0.principal_axis().dot(oriented.normal), -1.0, 1.0);
  return rad2deg(std::asin(s));
}

}  // namespace scanfill
