#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scanfill/fields.hpp"
#include "scanfill/guidance.hpp"
#include "scanfill/ingest.hpp"
#include "scanfill/losses.hpp"
#include "scanfill/mesh.hpp"
#include "scanfill/renderer.hpp"

namespace scanfill {

enum class GuidanceFailurePolicy { kFail, kContinue };

struct TrainConfig {
  int epochs = 2000;
  int iterations_per_epoch = 100;
  double learning_rate = 1e-4;
  LossWeights weights;
  /// Multiplies the SDS image gradient before it is pushed through the renderer.
  double sds_weight = 1.0;
  SamplingConfig sampling{0.1, 6.0, 128, true};
  int render_width = 80;
  int render_height = 80;
  int pixel_batch = 2000;
  int aux_samples = 1000;
  SensorKind kind = SensorKind::kDepthCamera;
  /// Sphere-init radius; 0 picks 0.5 for depth cameras and 0.9 for LiDAR.
  double init_radius = 0.0;
  std::string prompt;
  double gamma0_azimuth = 0.0;
  std::uint64_t seed = 0;
  double guidance_scale = 100.0;
  double grad_clip = 10.0;
  int checkpoint_every = 100;  ///< epochs; 0 disables intermediate checkpoints
  int mesh_resolution = 128;
  GuidanceFailurePolicy on_guidance_failure = GuidanceFailurePolicy::kFail;
  /// Compositing-weight threshold below which samples skip color and backward work.
  double render_cutoff = 1e-4;
  /// Horizontal field of view of synthesized SDS cameras when the sensor has no intrinsics.
  double lidar_render_fov_deg = 40.0;
  FieldConfig field;
  DensityParams density;
  Box3 roi;

  double effective_init_radius() const;
  void validate() const;
};

/// `key = value` lines; '#' starts a comment. Keys mirror the TrainConfig fields, with
/// dotted names for nested ones (weights.mask, sampling.samples_per_ray, field.sdf_width, ...).
TrainConfig parse_config(std::istream& in, const std::string& source = "<config>");
TrainConfig load_config(const std::filesystem::path& path);
/// Inverse of parse_config; every key is written.
std::string format_config(const TrainConfig& config);

// ---- Camera curriculum -------------------------------------------------------------------

/// Azimuth half-range in degrees at `epoch`.
double curriculum_nu(int epoch);

struct CurriculumState {
  int epoch = 0;
  double nu = 0.0;
  bool elevation_enabled = false;
  double xi0 = 0.0;  ///< elevation of C0 above the plane, degrees

  static CurriculumState at(int epoch, double xi0);
};

struct CameraSample {
  double gamma_azimuth = 0.0;
  double gamma_elevation = 0.0;
  double distance_scale = 1.0;
};

CameraSample curriculum_sample(const CurriculumState& state, SensorKind kind, std::mt19937_64& rng);
CameraSample curriculum_sample(const CurriculumState& state, SensorKind kind, std::uint64_t seed);

/// Wraps degrees to (-180, 180].
double wrap_degrees(double deg);

/// One of "front view", "side view", "back view", "overhead view", "bottom view".
/// `elevation_deg` is the total elevation above the plane.
std::string view_suffix(double gamma0_azimuth, double gamma_azimuth, double elevation_deg);
std::string view_text(const std::string& base, double gamma0_azimuth, double gamma_azimuth,
                      double elevation_deg);

/// SDS camera for a curriculum sample: C0 rotated about the origin, then pushed away from it.
CameraPose curriculum_camera(const CameraPose& c0, const Plane& plane, const CameraSample& sample);

// ---- Optimizer -----------------------------------------------------------------------------

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState zeros(Eigen::Index size);
};

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state, double lr);

/// Scales `grad` down so its norm is at most `max_norm`; returns the norm before clipping.
double clip_global_norm(Eigen::VectorXd& grad, double max_norm);

// ---- Training ------------------------------------------------------------------------------

struct LogRow {
  long iteration = 0;
  int epoch = 0;
  LossBreakdown losses;
  double sds_grad_norm = 0.0;  ///< NaN when no SDS gradient was applied
  double azimuth = 0.0;        ///< total azimuth of the SDS camera, degrees
  double elevation = 0.0;      ///< total elevation of the SDS camera, degrees
};

std::string log_csv_header();
std::string log_csv_line(const LogRow& row);

struct TrainCallbacks {
  std::function<void(const LogRow&, const FieldParams&)> on_iteration;
  /// Called after every `checkpoint_every` epochs and once at the end.
  std::function<void(int epoch, const FieldParams&)> on_checkpoint;
};

struct TrainResult {
  FieldParams params;
  TriangleMesh mesh;             ///< in the observation's original frame
  TriangleMesh mesh_normalized;  ///< in the training frame
  std::vector<LogRow> log;
  int guidance_failures = 0;
};

/// Sphere-initialized field the run starts from.
FieldParams initial_field(const TrainConfig& config);

/// Intrinsics for SDS renders: the sensor's, resized, or a synthesized pinhole for LiDAR.
CameraIntrinsics sds_intrinsics(const TrainConfig& config, const SensorObservation& obs);

/// Optimizes a field for a normalized observation with a known plane. `guidance` may be null,
/// which disables the SDS term.
TrainResult train(const TrainConfig& config, const SensorObservation& obs, GuidanceProvider* guidance,
                  const TrainCallbacks& callbacks = {});

/// Zero level set over the ROI, in the training frame.
TriangleMesh extract_mesh(const FieldParams& params, const Box3& roi, int resolution);

/// Maps mesh vertices from the training frame back to the original one.
TriangleMesh to_original_frame(const TriangleMesh& mesh, const Normalization& normalization);

/// Renders `field` from curriculum cameras at every (azimuth, elevation) pair, as premultiplied
/// reference views for the mock denoiser. Angles are totals, as the trainer reports them.
std::vector<ReferenceView> render_references(const RadianceField& field, const TrainConfig& config,
                                             const SensorObservation& obs,
                                             const std::vector<double>& azimuths_deg,
                                             const std::vector<double>& elevations_deg);

/// Elevation of the sensor pose above the observation's plane, degrees.
double sensor_elevation(const SensorObservation& obs);

}  // namespace scanfill
