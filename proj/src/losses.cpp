#include "scanfill/losses.hpp"

#include <cmath>
#include <random>

#include "scanfill/error.hpp"

namespace scanfill {
namespace {

using Eigen::Matrix3Xd;
using Eigen::VectorXd;

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

void require_same_size(const VectorXd& a, const VectorXd& b, const char* what) {
  if (a.size() != b.size()) fail(ErrorCode::kInvalidArgument, std::string(what) + ": length mismatch");
}

bool observed(double m) { return m > 0.5; }

}  // namespace

void LossWeights::validate() const {
  for (double w : {mask, depth, point, eikonal, plane}) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      fail(ErrorCode::kInvalidArgument, "loss weights must be finite and non-negative");
    }
  }
}

double point_loss(const VectorXd& f) {
  if (f.size() == 0) fail(ErrorCode::kInvalidArgument, "point loss needs at least one point");
  return f.cwiseAbs().mean();
}

VectorXd point_loss_grad(const VectorXd& f) {
  if (f.size() == 0) fail(ErrorCode::kInvalidArgument, "point loss needs at least one point");
  return f.unaryExpr(&sign) / static_cast<double>(f.size());
}

double mask_loss(const VectorXd& mask, const VectorXd& opacity) {
  require_same_size(mask, opacity, "mask loss");
  if (mask.size() == 0) fail(ErrorCode::kInvalidArgument, "mask loss needs at least one ray");
  return (mask - opacity).cwiseAbs().mean();
}

VectorXd mask_loss_grad(const VectorXd& mask, const VectorXd& opacity) {
  require_same_size(mask, opacity, "mask loss");
  if (mask.size() == 0) fail(ErrorCode::kInvalidArgument, "mask loss needs at least one ray");
  return (opacity - mask).unaryExpr(&sign) / static_cast<double>(mask.size());
}

DepthLoss depth_loss(const VectorXd& depth, const VectorXd& rendered, const VectorXd& mask) {
  require_same_size(depth, rendered, "depth loss");
  require_same_size(depth, mask, "depth loss");
  DepthLoss out;
  double sum = 0.0;
  int count = 0;
  for (Eigen::Index i = 0; i < depth.size(); ++i) {
    if (!observed(mask[i])) continue;
    const double e = depth[i] - rendered[i];
    sum += e * e;
    ++count;
  }
  out.no_observed_rays = count == 0;
  out.value = count > 0 ? sum / count : 0.0;
  return out;
}

VectorXd depth_loss_grad(const VectorXd& depth, const VectorXd& rendered, const VectorXd& mask) {
  require_same_size(depth, rendered, "depth loss");
  require_same_size(depth, mask, "depth loss");
  const auto count = static_cast<double>((mask.array() > 0.5).count());
  VectorXd g = VectorXd::Zero(depth.size());
  if (count == 0) return g;
  for (Eigen::Index i = 0; i < depth.size(); ++i) {
    if (observed(mask[i])) g[i] = 2.0 * (rendered[i] - depth[i]) / count;
  }
  return g;
}

double eikonal_loss(const VectorXd& gradient_norms) {
  if (gradient_norms.size() == 0) fail(ErrorCode::kInvalidArgument, "eikonal loss needs points");
  return (gradient_norms.array() - 1.0).abs().mean();
}

Matrix3Xd eikonal_loss_grad(const Matrix3Xd& gradients) {
  if (gradients.cols() == 0) fail(ErrorCode::kInvalidArgument, "eikonal loss needs points");
  Matrix3Xd g = Matrix3Xd::Zero(3, gradients.cols());
  const double inv_n = 1.0 / static_cast<double>(gradients.cols());
  for (Eigen::Index i = 0; i < gradients.cols(); ++i) {
    const double norm = gradients.col(i).norm();
    if (norm > 0.0) g.col(i) = sign(norm - 1.0) * inv_n / norm * gradients.col(i);
  }
  return g;
}

double plane_loss(const VectorXd& f) { return (-f.array()).max(0.0).sum(); }

VectorXd plane_loss_grad(const VectorXd& f) {
  return (f.array() < 0.0).select(VectorXd::Constant(f.size(), -1.0), 0.0);
}

LossBreakdown total_loss(const LossBreakdown& terms, const LossWeights& weights) {
  weights.validate();
  LossBreakdown out = terms;
  out.total = weights.mask * terms.mask + weights.depth * terms.depth + weights.point * terms.point +
              weights.eikonal * terms.eikonal + weights.plane * terms.plane;
  return out;
}

double point_term(const FieldParams& params, const Matrix3Xd& points, double weight,
                  FieldGradient* grad) {
  const VectorXd f = sdf_values(params, points);
  const double value = point_loss(f);
  if (grad && weight != 0.0) sdf_backward(params, points, weight * point_loss_grad(f), *grad);
  return value;
}

double eikonal_term(const FieldParams& params, const Matrix3Xd& points, double weight,
                    FieldGradient* grad) {
  VectorXd f;
  Matrix3Xd g;
  sdf_values_and_gradients(params, points, f, g);
  const double value = eikonal_loss(g.colwise().norm().transpose());
  if (grad && weight != 0.0) {
    sdf_gradient_backward(params, points, VectorXd::Zero(points.cols()),
                          weight * eikonal_loss_grad(g), *grad);
  }
  return value;
}

double plane_term(const FieldParams& params, const Matrix3Xd& points, double weight,
                  FieldGradient* grad) {
  if (points.cols() == 0) return 0.0;
  const VectorXd f = sdf_values(params, points);
  const double value = plane_loss(f);
  if (grad && weight != 0.0) sdf_backward(params, points, weight * plane_loss_grad(f), *grad);
  return value;
}

AuxSamples sample_aux_points(const Plane& plane, const Box3& region, int count, std::uint64_t seed) {
  if (count < 0 || !((region.hi.array() > region.lo.array()).all())) {
    fail(ErrorCode::kInvalidArgument, "auxiliary sampling needs a non-degenerate region");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&] {
    return Vec3(region.lo.x() + u(rng) * (region.hi.x() - region.lo.x()),
                region.lo.y() + u(rng) * (region.hi.y() - region.lo.y()),
                region.lo.z() + u(rng) * (region.hi.z() - region.lo.z()));
  };

  AuxSamples out;
  out.uniform.resize(3, count);
  for (int i = 0; i < count; ++i) out.uniform.col(i) = draw();

  // The lowest corner decides whether any volume lies below the plane.
  Vec3 lowest;
  for (int a = 0; a < 3; ++a) lowest[a] = plane.normal[a] > 0 ? region.lo[a] : region.hi[a];
  out.plane_empty = !(plane.signed_distance(lowest) < 0.0);
  if (out.plane_empty) {
    out.below_plane.resize(3, 0);
    return out;
  }
  // Rejection sampling; a sliver region may not fill up within the attempt budget.
  out.below_plane.resize(3, count);
  int kept = 0;
  const long long budget = 1000LL * std::max(count, 1);
  for (long long attempt = 0; kept < count && attempt < budget; ++attempt) {
    const Vec3 p = draw();
    if (plane.signed_distance(p) < 0.0) out.below_plane.col(kept++) = p;
  }
  out.below_plane.conservativeResize(3, kept);
  return out;
}

}  // namespace scanfill
