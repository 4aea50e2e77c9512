#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "scanfill/geometry.hpp"
#include "scanfill/mesh.hpp"

namespace scanfill {

/// Batched scalar field: one value per column.
using ScalarField = std::function<Eigen::VectorXd(const Eigen::Matrix3Xd&)>;

/// Zero level set of `field` over `bounds`, sampled on resolution^3 cells. Vertices shared
/// between cells are welded; triangles face toward f > 0.
TriangleMesh marching_cubes(const ScalarField& field, const Box3& bounds, int resolution);

/// Static 3-D kd-tree for nearest-neighbor queries.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points);

  struct Hit {
    std::size_t index = 0;
    double squared_distance = 0.0;
  };
  Hit nearest(const Vec3& query) const;
  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    int axis = -1;  ///< -1 for a leaf
    std::size_t begin = 0, end = 0;
    double split = 0.0;
    int left = -1, right = -1;
  };
  int build(std::size_t begin, std::size_t end, int depth);
  void search(int node, const Vec3& q, Hit& best) const;

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

/// Mean nearest-neighbor distance from each point of `from` to `to`.
double mean_nearest_distance(std::span<const Vec3> from, std::span<const Vec3> to);

/// 0.5 * (mean_a min_b |a - b| + mean_b min_a |b - a|) * 1000, for inputs in meters.
double chamfer_mm(std::span<const Vec3> a, std::span<const Vec3> b);

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  /// this after `inner`
  RigidTransform compose(const RigidTransform& inner) const {
    return {rotation * inner.rotation, rotation * inner.translation + translation};
  }
};

/// Least-squares rigid motion mapping `source` onto `target` (paired by index). Returns false
/// when the source spread is degenerate (collinear or coincident).
bool kabsch(std::span<const Vec3> source, std::span<const Vec3> target, RigidTransform& out);

struct IcpResult {
  RigidTransform transform;
  bool converged = false;
  double rms = 0.0;
  int iterations = 0;
  std::vector<double> rms_history;  ///< rms after each accepted transform, starting with init
};

/// Point-to-point ICP with closed-form SVD updates. Stops when the rms changes by less than
/// `tolerance` or after `max_iterations`.
IcpResult icp_align(std::span<const Vec3> source, std::span<const Vec3> target,
                    const RigidTransform& init, int max_iterations = 50, double tolerance = 1e-10);

/// Area-uniform surface samples.
std::vector<Vec3> sample_mesh(const TriangleMesh& mesh, int count, std::uint64_t seed);

int euler_characteristic(const TriangleMesh& mesh);

}  // namespace scanfill
