#pragma once

#include <cstdint>

#include <Eigen/Core>

#include "scanfill/fields.hpp"
#include "scanfill/geometry.hpp"

namespace scanfill {

struct LossWeights {
  double mask = 1e5;
  double depth = 1e5;
  double point = 1e5;
  double eikonal = 1e4;
  double plane = 1e5;

  void validate() const;
};

/// Unweighted term values plus their weighted sum. SDS never appears here; it only enters
/// as a parameter gradient.
struct LossBreakdown {
  double point = 0.0;
  double mask = 0.0;
  double depth = 0.0;
  double eikonal = 0.0;
  double plane = 0.0;
  double total = 0.0;
};

// ---- Term values and their derivatives with respect to their direct inputs ---------------

/// mean |f(p_i)|
double point_loss(const Eigen::VectorXd& f);
Eigen::VectorXd point_loss_grad(const Eigen::VectorXd& f);

/// mean |M_i - M~_i|
double mask_loss(const Eigen::VectorXd& mask, const Eigen::VectorXd& opacity);
Eigen::VectorXd mask_loss_grad(const Eigen::VectorXd& mask, const Eigen::VectorXd& opacity);

struct DepthLoss {
  double value = 0.0;
  bool no_observed_rays = false;
};

/// Mean squared depth error over rays with M_i = 1; other rays are ignored.
DepthLoss depth_loss(const Eigen::VectorXd& depth, const Eigen::VectorXd& rendered,
                     const Eigen::VectorXd& mask);
/// d loss / d rendered depth.
Eigen::VectorXd depth_loss_grad(const Eigen::VectorXd& depth, const Eigen::VectorXd& rendered,
                                const Eigen::VectorXd& mask);

/// mean | ||grad f|| - 1 |
double eikonal_loss(const Eigen::VectorXd& gradient_norms);
/// d loss / d (grad f) for each point.
Eigen::Matrix3Xd eikonal_loss_grad(const Eigen::Matrix3Xd& gradients);

/// sum max(-f, 0); a sum, not a mean.
double plane_loss(const Eigen::VectorXd& f);
Eigen::VectorXd plane_loss_grad(const Eigen::VectorXd& f);

/// Fills `total` from the five term values.
LossBreakdown total_loss(const LossBreakdown& terms, const LossWeights& weights);

// ---- Terms evaluated on the SDF network ----------------------------------------------------
// Each returns the unweighted value and, when `grad` is given, adds weight * d value / d params.

double point_term(const FieldParams& params, const Eigen::Matrix3Xd& points, double weight,
                  FieldGradient* grad);
double eikonal_term(const FieldParams& params, const Eigen::Matrix3Xd& points, double weight,
                    FieldGradient* grad);
double plane_term(const FieldParams& params, const Eigen::Matrix3Xd& points, double weight,
                  FieldGradient* grad);

// ---- Auxiliary samples -------------------------------------------------------------------

struct AuxSamples {
  Eigen::Matrix3Xd below_plane;  ///< uniform in region, strictly below the plane
  Eigen::Matrix3Xd uniform;      ///< uniform in region
  bool plane_empty = false;      ///< the region has no volume below the plane
};

AuxSamples sample_aux_points(const Plane& plane, const Box3& region, int count, std::uint64_t seed);

}  // namespace scanfill
