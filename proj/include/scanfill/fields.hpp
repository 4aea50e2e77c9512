#pragma once

#include <array>
#include <cstdint>

#include <Eigen/Core>

#include "scanfill/geometry.hpp"
#include "scanfill/mlp.hpp"

namespace scanfill {

struct EncodingConfig {
  int levels = 6;
  bool include_input = true;

  int output_dim() const { return (include_input ? 3 : 0) + 6 * levels; }
};

/// [x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)], each block coordinate-wise.
Eigen::VectorXd positional_encoding(const Vec3& x, const EncodingConfig& cfg);

/// Batched encoding; columns of `points` are samples.
Eigen::MatrixXd encode_points(const Eigen::Matrix3Xd& points, const EncodingConfig& cfg);

/// Jacobian of the encoding as three tangent matrices (one per input axis).
std::array<Eigen::MatrixXd, 3> encoding_tangents(const Eigen::Matrix3Xd& points,
                                                 const EncodingConfig& cfg);

/// Chains an encoding-space gradient back to the raw coordinates.
Eigen::Matrix3Xd encoding_backward(const Eigen::Matrix3Xd& points, const EncodingConfig& cfg,
                                   const Eigen::MatrixXd& d_encoded);

struct FieldConfig {
  EncodingConfig encoding;
  int sdf_width = 96;
  int color_width = 96;
};

/// Weights of the SDF network (4 ReLU linear layers) and the color network (4 linear
/// layers, SiLU, one residual block over the two middle layers) in one flat vector.
struct FieldParams {
  FieldConfig config;
  MlpSpec sdf;
  MlpSpec color;
  Eigen::VectorXd values;

  static FieldParams zeros(const FieldConfig& config);
  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
};

/// Gradient buffers share the parameter layout.
using FieldGradient = Eigen::VectorXd;

/// Density scale alpha (1/scene units) and Laplace scale beta (scene units), both fixed.
struct DensityParams {
  double alpha = 100.0;
  double beta = 1e-3;

  void validate() const;
};

/// sigma = alpha * LaplaceCDF_beta(-f).
double density_from_sdf(double f, const DensityParams& dp);
/// d sigma / d f; always <= 0.
double density_derivative(double f, const DensityParams& dp);

struct SdfSample {
  double value = 0.0;
  Vec3 gradient = Vec3::Zero();
};

/// Value and exact reverse-mode spatial gradient at one point.
SdfSample sdf_eval(const FieldParams& params, const Vec3& x);

Eigen::VectorXd sdf_values(const FieldParams& params, const Eigen::Matrix3Xd& points);

/// Values and spatial gradients via forward-mode tangents (the route the eikonal term uses).
void sdf_values_and_gradients(const FieldParams& params, const Eigen::Matrix3Xd& points,
                              Eigen::VectorXd& values, Eigen::Matrix3Xd& gradients);

/// Adds sum_i d_values[i] * d f(x_i) / d params into `grad`.
void sdf_backward(const FieldParams& params, const Eigen::Matrix3Xd& points,
                  const Eigen::VectorXd& d_values, FieldGradient& grad);

/// Parameter gradient of a loss on both f(x_i) and grad_x f(x_i).
void sdf_gradient_backward(const FieldParams& params, const Eigen::Matrix3Xd& points,
                           const Eigen::VectorXd& d_values, const Eigen::Matrix3Xd& d_gradients,
                           FieldGradient& grad);

Vec3 color_eval(const FieldParams& params, const Vec3& x);
Eigen::Matrix3Xd color_values(const FieldParams& params, const Eigen::Matrix3Xd& points);
void color_backward(const FieldParams& params, const Eigen::Matrix3Xd& points,
                    const Eigen::Matrix3Xd& d_rgb, FieldGradient& grad);

/// SDF network initialized to approximate |x| - radius (negative inside); color network
/// gets small random weights. Deterministic for a given seed.
FieldParams sphere_init(const FieldConfig& config, double radius, std::uint64_t seed);

}  // namespace scanfill
