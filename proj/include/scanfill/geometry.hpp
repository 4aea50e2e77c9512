#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace scanfill {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Orthonormal 3x3 matrix with determinant +1. Construction validates both.
class Rotation3 {
 public:
  Rotation3() : m_(Mat3::Identity()) {}
  explicit Rotation3(const Mat3& m);

  static Rotation3 identity() { return Rotation3(); }

  const Mat3& matrix() const { return m_; }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }
  Rotation3 operator*(const Rotation3& other) const;
  Rotation3 transpose() const;

 private:
  struct Unchecked {};
  Rotation3(const Mat3& m, Unchecked) : m_(m) {}
  Mat3 m_;
};

/// Camera-to-world pose. The camera looks along +z of its own frame.
struct CameraPose {
  Rotation3 rotation;
  Vec3 translation = Vec3::Zero();

  Vec3 principal_axis() const { return rotation.matrix().col(2); }
  Vec3 to_world(const Vec3& p_camera) const { return rotation * p_camera + translation; }
  Vec3 to_camera(const Vec3& p_world) const {
    return rotation.matrix().transpose() * (p_world - translation);
  }
};

/// Builds a pose at `eye` looking at `target`; `up` fixes the roll (image rows grow against it).
CameraPose look_at(const Vec3& eye, const Vec3& target, const Vec3& up);

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const;
  /// Intrinsics of the same camera resampled to a new image size.
  CameraIntrinsics resized(int new_width, int new_height) const;
};

/// {x : normal . x + offset = 0}, with a unit normal.
struct Plane {
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;

  static Plane from_point_normal(const Vec3& point, const Vec3& normal);

  double signed_distance(const Vec3& x) const { return normal.dot(x) + offset; }
  /// Same plane with the normal flipped if needed so `point` is on the positive side.
  Plane oriented_toward(const Vec3& point) const;
  /// Plane expressed in the frame x' = scale * (x - shift).
  Plane transformed(const Vec3& shift, double scale) const;
};

/// Axis-aligned box; the default is the region of interest after centralization.
struct Box3 {
  Vec3 lo = Vec3::Constant(-0.7);
  Vec3 hi = Vec3::Constant(0.7);

  Vec3 center() const { return 0.5 * (lo + hi); }
  bool contains(const Vec3& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();

  Vec3 at(double s) const { return origin + s * direction; }
};

/// Right-handed rotation by `angle_deg` degrees about a unit `axis`.
Rotation3 rodrigues_rotation(const Vec3& axis, double angle_deg);

/// Rotates the sensor pose about the object center (the origin): azimuth about the plane
/// normal, elevation about normal x principal-axis. Throws kDegenerateElevationAxis when the
/// principal axis is (anti)parallel to the plane normal.
CameraPose camera_update(const CameraPose& c0, const Plane& plane, double gamma_azimuth_deg,
                         double gamma_elevation_deg);

/// Pixel (u, v) uses integer pixel centers: u is the column, v the row.
Ray backproject(const CameraIntrinsics& intr, const CameraPose& pose, double u, double v);

struct PixelProjection {
  double u = 0.0;
  double v = 0.0;
  double z = 0.0;  ///< depth along the camera's principal axis
};
PixelProjection project(const CameraIntrinsics& intr, const CameraPose& pose, const Vec3& p_world);

struct PlaneFit {
  Plane plane;
  std::vector<std::size_t> inliers;
};

/// RANSAC over 3-point hypotheses followed by a total-least-squares refit on the inliers.
/// The returned normal is sign-canonicalized (largest-magnitude component positive).
PlaneFit fit_plane_ransac(std::span<const Vec3> points, double inlier_threshold, int iterations,
                          std::uint64_t seed);

/// Elevation of the camera's viewing direction toward the plane, in degrees. Positive when
/// the camera looks down at the plane from its positive side.
double elevation_of(const CameraPose& c0, const Plane& plane);

double deg2rad(double deg);
double rad2deg(double rad);

}  // namespace scanfill
