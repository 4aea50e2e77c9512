#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "scanfill/geometry.hpp"
#include "scanfill/io.hpp"

namespace scanfill {

enum class SensorKind { kDepthCamera, kLidar };

/// x' = scale * (x - center)
struct Normalization {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& x) const { return scale * (x - center); }
  Vec3 invert(const Vec3& y) const { return y / scale + center; }
  /// this followed by `next`
  Normalization then(const Normalization& next) const;
};

/// Everything the trainer needs from one scan. Rays are laid out row-major on a
/// grid_width x grid_height grid (the image for depth cameras, the crop for LiDAR).
struct SensorObservation {
  SensorKind kind = SensorKind::kDepthCamera;
  std::vector<Vec3> points;          ///< one per ray with mask 1, in ray order
  std::vector<Ray> rays;
  Eigen::VectorXd mask;              ///< 1 = object surface observed along the ray
  Eigen::VectorXd depth;             ///< along-ray distance where mask = 1, else 0
  int grid_width = 0;
  int grid_height = 0;
  CameraPose pose;                   ///< sensor pose C0 (camera-to-world)
  std::optional<CameraIntrinsics> intrinsics;
  std::vector<Vec3> background;      ///< non-object scene points, used to find the ground
  std::optional<Plane> plane;
  Normalization normalization;       ///< maps the original frame to the current one

  /// Checks sizes and that each point lies on its ray at its depth within `tolerance`.
  void validate(double tolerance = 1e-6) const;
};

/// Backprojects a 16-bit z-depth image (millimeters) through a pinhole camera. Pixels with
/// mask > 0 and depth > 0 become observed rays; valid pixels outside the mask go to
/// `background`.
SensorObservation depth_to_observation(const Image16& depth, const Image8& mask,
                                       const CameraIntrinsics& intrinsics, const CameraPose& pose);

// ---- LiDAR ---------------------------------------------------------------------------------

struct LidarConfig {
  int rows = 64;
  int cols = 1024;
  double fov_up_deg = 2.0;
  double fov_down_deg = -24.8;
  int crop_margin = 5;

  double fov_deg() const { return fov_up_deg - fov_down_deg; }
  void validate() const;
};

struct RangeImage {
  int rows = 0;
  int cols = 0;
  Eigen::MatrixXd range;               ///< rows x cols, 0 = empty
  std::vector<Vec3> direction;         ///< unit direction per cell, row-major
  int min_col = 0, max_col = 0;        ///< occupied column extrema
  int min_row = 0, max_row = 0;        ///< occupied row extrema
  int crop_col_begin = 0, crop_col_end = 0;  ///< [begin, end), may wrap past cols
  int crop_row_begin = 0, crop_row_end = 0;  ///< [begin, end), clamped to the image

  int crop_width() const { return crop_col_end - crop_col_begin; }
  Vec3 cell_direction(int row, int col) const;
};

struct LidarCell {
  int row = 0;
  int col = 0;
};
/// Cell of a sensor-frame direction; the row may fall outside [0, rows) when out of fov.
LidarCell lidar_cell(const Vec3& p, const LidarConfig& cfg);

/// Spherical projection of sensor-frame points (z up, x forward). The nearest range wins per
/// cell; the crop spans the occupied columns and rows, each widened by the margin.
RangeImage lidar_project(std::span<const Vec3> points, const LidarConfig& cfg = {});

/// Rays over the crop of `object` points; scene points (if any) become background.
SensorObservation lidar_to_observation(std::span<const Vec3> object, std::span<const Vec3> scene,
                                       const LidarConfig& cfg = {});

// ---- Centralization ------------------------------------------------------------------------

struct CentralizationInfo {
  Normalization transform;
  double corner_ratio = 0.0;     ///< max / min distance from the mass center to OBB corners
  bool used_box_center = false;
};

/// Center of mass, or the PCA bounding-box center for LiDAR and for clouds whose corner ratio
/// exceeds 1.7; then scale so the largest norm is 0.5.
CentralizationInfo centralize_and_scale(std::span<const Vec3> points, SensorKind kind);

/// Applies a normalization to every geometric quantity of the observation.
SensorObservation normalize(const SensorObservation& obs, const Normalization& n);

/// RANSAC ground plane on the background points, oriented toward the sensor.
Plane estimate_ground_plane(const SensorObservation& obs, double inlier_threshold,
                            int iterations = 1000, std::uint64_t seed = 0);

struct PrepareOptions {
  double plane_threshold = 0.01;  ///< RANSAC inlier distance, normalized units
  int plane_iterations = 1000;
  std::uint64_t plane_seed = 0;
  std::optional<Plane> plane;     ///< original-frame plane; skips RANSAC when set
};

/// Centralizes and scales a raw observation, then attaches the ground plane.
SensorObservation prepare_observation(const SensorObservation& raw, const PrepareOptions& options = {});

}  // namespace scanfill
