#include "scanfill/evalx.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <unordered_map>
#include <utility>

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>

#include "scanfill/error.hpp"

#include "mc_tables.inc"

namespace scanfill {

namespace {

// Bourke corner order as (dx, dy, dz).
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdgeCorners[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                     {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace

TriangleMesh marching_cubes(const ScalarField& field, const Box3& bounds, int resolution) {
  if (resolution < 2) fail(ErrorCode::kInvalidArgument, "marching_cubes: resolution must be >= 2");
  if (!((bounds.hi.array() > bounds.lo.array()).all()))
    fail(ErrorCode::kInvalidArgument, "marching_cubes: empty bounds");
  const int n = resolution + 1;
  const Vec3 step = (bounds.hi - bounds.lo) / resolution;
  auto grid_point = [&](int i, int j, int k) {
    return Vec3(bounds.lo.x() + i * step.x(), bounds.lo.y() + j * step.y(),
                bounds.lo.z() + k * step.z());
  };

  // Field values, one z-slab per batch.
  std::vector<double> values(static_cast<std::size_t>(n) * n * n);
  auto index = [n](int i, int j, int k) {
    return (static_cast<std::size_t>(k) * n + j) * n + i;
  };
  Eigen::Matrix3Xd slab(3, static_cast<Eigen::Index>(n) * n);
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) slab.col(j * n + i) = grid_point(i, j, k);
    const Eigen::VectorXd f = field(slab);
    if (f.size() != slab.cols())
      fail(ErrorCode::kInvalidArgument, "marching_cubes: field returned wrong number of values");
    for (Eigen::Index c = 0; c < f.size(); ++c) {
      if (!std::isfinite(f[c])) fail(ErrorCode::kInvalidArgument, "marching_cubes: non-finite field value");
      values[static_cast<std::size_t>(k) * n * n + c] = f[c];
    }
  }

  TriangleMesh mesh;
  std::unordered_map<std::int64_t, int> edge_vertex;
  auto vertex_on_edge = [&](int i, int j, int k, int edge) {
    const int* a = kCorner[kEdgeCorners[edge][0]];
    const int* b = kCorner[kEdgeCorners[edge][1]];
    int ai = i + a[0], aj = j + a[1], ak = k + a[2];
    int bi = i + b[0], bj = j + b[1], bk = k + b[2];
    if (std::tie(ai, aj, ak) > std::tie(bi, bj, bk)) {
      std::swap(ai, bi);
      std::swap(aj, bj);
      std::swap(ak, bk);
    }
    const int axis = bi != ai ? 0 : (bj != aj ? 1 : 2);
    const std::int64_t key = static_cast<std::int64_t>(index(ai, aj, ak)) * 3 + axis;
    auto [it, inserted] = edge_vertex.try_emplace(key, static_cast<int>(mesh.vertices.size()));
    if (inserted) {
      const double fa = values[index(ai, aj, ak)];
      const double fb = values[index(bi, bj, bk)];
      const double denom = fa - fb;
      double s = denom != 0.0 ? fa / denom : 0.5;
      s = std::clamp(s, 0.0, 1.0);
      const Vec3 pa = grid_point(ai, aj, ak);
      const Vec3 pb = grid_point(bi, bj, bk);
      mesh.vertices.push_back(pa + s * (pb - pa));
    }
    return it->second;
  };

  for (int k = 0; k < resolution; ++k) {
    for (int j = 0; j < resolution; ++j) {
      for (int i = 0; i < resolution; ++i) {
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          if (values[index(i + kCorner[c][0], j + kCorner[c][1], k + kCorner[c][2])] < 0.0)
            cube |= 1 << c;
        }
        if (mc::kEdgeTable[cube] == 0) continue;
        const int* tri = mc::kTriTable[cube];
        for (int t = 0; tri[t] != -1; t += 3) {
          // Table winding faces toward f < 0; reverse it.
          const int v0 = vertex_on_edge(i, j, k, tri[t]);
          const int v1 = vertex_on_edge(i, j, k, tri[t + 2]);
          const int v2 = vertex_on_edge(i, j, k, tri[t + 1]);
          if (v0 == v1 || v1 == v2 || v0 == v2) continue;
          const Vec3& p0 = mesh.vertices[v0];
          const double area =
              0.5 * (mesh.vertices[v1] - p0).cross(mesh.vertices[v2] - p0).norm();
          if (area <= 1e-12) continue;
          mesh.triangles.push_back({v0, v1, v2});
        }
      }
    }
  }

  // Compact away vertices only referenced by dropped triangles.
  std::vector<int> remap(mesh.vertices.size(), -1);
  std::vector<Vec3> kept;
  for (auto& t : mesh.triangles) {
    for (int& v : t) {
      if (remap[v] < 0) {
        remap[v] = static_cast<int>(kept.size());
        kept.push_back(mesh.vertices[v]);
      }
      v = remap[v];
    }
  }
  mesh.vertices = std::move(kept);
  return mesh;
}

KdTree::KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
  if (points_.empty()) fail(ErrorCode::kInvalidArgument, "KdTree: empty point set");
  order_.resize(points_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  nodes_.reserve(2 * points_.size() / 8 + 1);
  build(0, points_.size(), 0);
}

int KdTree::build(std::size_t begin, std::size_t end, int depth) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({});
  nodes_[id].begin = begin;
  nodes_[id].end = end;
  if (end - begin <= 8 || depth > 60) return id;

  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (std::size_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] == lo[axis]) return id;  // all coincident

  const std::size_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                   order_.begin() + static_cast<std::ptrdiff_t>(mid),
                   order_.begin() + static_cast<std::ptrdiff_t>(end),
                   [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
  const double split = points_[order_[mid]][axis];
  const int left = build(begin, mid, depth + 1);
  const int right = build(mid, end, depth + 1);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

void KdTree::search(int node_id, const Vec3& q, Hit& best) const {
  const Node& node = nodes_[node_id];
  if (node.axis < 0) {
    for (std::size_t i = node.begin; i < node.end; ++i) {
      const double d = (points_[order_[i]] - q).squaredNorm();
      if (d < best.squared_distance) best = {order_[i], d};
    }
    return;
  }
  const double diff = q[node.axis] - node.split;
  const int near = diff < 0.0 ? node.left : node.right;
  const int far = diff < 0.0 ? node.right : node.left;
  search(near, q, best);
  if (diff * diff <= best.squared_distance) search(far, q, best);
}

KdTree::Hit KdTree::nearest(const Vec3& query) const {
  Hit best{0, std::numeric_limits<double>::infinity()};
  search(0, query, best);
  return best;
}

double mean_nearest_distance(std::span<const Vec3> from, std::span<const Vec3> to) {
  if (from.empty() || to.empty()) fail(ErrorCode::kInvalidArgument, "chamfer: empty point set");
  const KdTree tree(to);
  double sum = 0.0;
  for (const Vec3& p : from) sum += std::sqrt(tree.nearest(p).squared_distance);
  return sum / static_cast<double>(from.size());
}

double chamfer_mm(std::span<const Vec3> a, std::span<const Vec3> b) {
  const double ab = mean_nearest_distance(a, b);
  const double ba = mean_nearest_distance(b, a);
  return 0.5 * (ab + ba) * 1000.0;
}

bool kabsch(std::span<const Vec3> source, std::span<const Vec3> target, RigidTransform& out) {
  if (source.size() != target.size() || source.empty())
    fail(ErrorCode::kInvalidArgument, "kabsch: point sets must be non-empty and paired");
  const double n = static_cast<double>(source.size());
  Vec3 cs = Vec3::Zero(), ct = Vec3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    cs += source[i];
    ct += target[i];
  }
  cs /= n;
  ct /= n;
  Mat3 h = Mat3::Zero();
  Mat3 spread = Mat3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    const Vec3 s = source[i] - cs;
    h += s * (target[i] - ct).transpose();
    spread += s * s.transpose();
  }
  const Eigen::JacobiSVD<Mat3> spread_svd(spread);
  const Vec3 sv = spread_svd.singularValues();
  if (!(sv[1] > 1e-12 * std::max(sv[0], 1e-300))) return false;

  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  if ((v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  out.rotation = v * d * u.transpose();
  out.translation = ct - out.rotation * cs;
  return true;
}

IcpResult icp_align(std::span<const Vec3> source, std::span<const Vec3> target,
                    const RigidTransform& init, int max_iterations, double tolerance) {
  if (source.size() < 3 || target.size() < 3)
    fail(ErrorCode::kInvalidArgument, "icp: both point sets need at least 3 points");
  if (max_iterations < 0 || !(tolerance >= 0.0))
    fail(ErrorCode::kInvalidArgument, "icp: invalid iteration settings");
  const KdTree tree(target);
  std::vector<Vec3> moved(source.size());
  std::vector<Vec3> matched(source.size());

  auto evaluate = [&](const RigidTransform& x) {
    double sum = 0.0;
    for (std::size_t i = 0; i < source.size(); ++i) {
      moved[i] = x.apply(source[i]);
      const auto hit = tree.nearest(moved[i]);
      matched[i] = target[hit.index];
      sum += hit.squared_distance;
    }
    return std::sqrt(sum / static_cast<double>(source.size()));
  };

  IcpResult result;
  result.transform = init;
  result.rms = evaluate(init);
  result.rms_history.push_back(result.rms);
  for (int it = 0; it < max_iterations; ++it) {
    // moved/matched hold the correspondences of the current transform.
    RigidTransform step;
    if (!kabsch(moved, matched, step)) return result;
    const RigidTransform candidate = step.compose(result.transform);
    const std::vector<Vec3> keep_moved = moved, keep_matched = matched;
    const double rms = evaluate(candidate);
    ++result.iterations;
    if (rms > result.rms) {
      moved = keep_moved;
      matched = keep_matched;
      result.converged = true;  // no further descent possible
      return result;
    }
    const double change = result.rms - rms;
    result.transform = candidate;
    result.rms = rms;
    result.rms_history.push_back(rms);
    if (change <= tolerance) {
      result.converged = true;
      return result;
    }
  }
  return result;
}

std::vector<Vec3> sample_mesh(const TriangleMesh& mesh, int count, std::uint64_t seed) {
  if (count < 0) fail(ErrorCode::kInvalidArgument, "sample_mesh: negative count");
  std::vector<double> cumulative;
  cumulative.reserve(mesh.triangles.size());
  double total = 0.0;
  for (const auto& t : mesh.triangles) {
    const Vec3& a = mesh.vertices.at(t[0]);
    total += 0.5 * (mesh.vertices.at(t[1]) - a).cross(mesh.vertices.at(t[2]) - a).norm();
    cumulative.push_back(total);
  }
  if (!(total > 0.0)) fail(ErrorCode::kInvalidArgument, "sample_mesh: mesh has no area");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    const double pick = unit(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    if (it == cumulative.end()) --it;
    const auto& t = mesh.triangles[static_cast<std::size_t>(it - cumulative.begin())];
    const double r1 = std::sqrt(unit(rng));
    const double r2 = unit(rng);
    const Vec3& a = mesh.vertices[t[0]];
    const Vec3& b = mesh.vertices[t[1]];
    const Vec3& c = mesh.vertices[t[2]];
    out.push_back((1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c);
  }
  return out;
}

int euler_characteristic(const TriangleMesh& mesh) {
  std::set<std::pair<int, int>> edges;
  for (const auto& t : mesh.triangles) {
    for (int e = 0; e < 3; ++e) {
      const int a = t[e], b = t[(e + 1) % 3];
      edges.emplace(std::min(a, b), std::max(a, b));
    }
  }
  return static_cast<int>(mesh.vertices.size()) - static_cast<int>(edges.size()) +
         static_cast<int>(mesh.triangles.size());
}

}  // namespace scanfill
