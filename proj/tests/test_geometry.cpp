#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "scanfill/error.hpp"
#include "scanfill/geometry.hpp"

namespace scanfill {
namespace {

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Vec3(n(rng), n(rng), n(rng)).normalized();
}

void expect_vec_near(const Vec3& a, const Vec3& b, double tol) {
  EXPECT_NEAR((a - b).norm(), 0.0, tol) << a.transpose() << " vs " << b.transpose();
}

TEST(Rodrigues, QuarterTurnAboutZ) {
  const Rotation3 r = rodrigues_rotation(Vec3::UnitZ(), 90.0);
  expect_vec_near(r * Vec3::UnitX(), Vec3::UnitY(), 1e-12);
}

TEST(Rodrigues, ZeroAngleIsIdentity) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    const Rotation3 r = rodrigues_rotation(random_unit(rng), 0.0);
    EXPECT_TRUE(r.matrix().isApprox(Mat3::Identity(), 1e-15));
  }
}

TEST(Rodrigues, HalfTurnAboutY) {
  const Rotation3 r = rodrigues_rotation(Vec3::UnitY(), 180.0);
  expect_vec_near(r * Vec3::UnitX(), -Vec3::UnitX(), 1e-12);
}

TEST(Rodrigues, RejectsNonUnitAxis) {
  try {
    rodrigues_rotation(Vec3(1.0, 1.0, 0.0), 10.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}

TEST(Rodrigues, AnglesAddAboutSharedAxis) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> angle(-360.0, 360.0);
  for (int i = 0; i < 200; ++i) {
    const Vec3 axis = random_unit(rng);
    const double a = angle(rng);
    const double b = angle(rng);
    const Mat3 lhs = (rodrigues_rotation(axis, a) * rodrigues_rotation(axis, b)).matrix();
    const Mat3 rhs = rodrigues_rotation(axis, a + b).matrix();
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-9);
  }
}

CameraPose sample_pose() {
  // Camera at elevation 30 deg over the z = -0.5 plane, looking at the origin.
  const double e = deg2rad(30.0);
  return look_at(Vec3(0.0, -2.0 * std::cos(e), 2.0 * std::sin(e)), Vec3::Zero(), Vec3::UnitZ());
}

TEST(CameraUpdate, ZeroAnglesKeepPose) {
  const CameraPose c0 = sample_pose();
  const Plane ground{Vec3::UnitZ(), 0.5};
  const CameraPose c = camera_update(c0, ground, 0.0, 0.0);
  EXPECT_TRUE(c.rotation.matrix().isApprox(c0.rotation.matrix(), 1e-15));
  expect_vec_near(c.translation, c0.translation, 1e-15);
}

TEST(CameraUpdate, PreservesDistanceToOrigin) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> angle(-180.0, 180.0);
  const CameraPose c0 = sample_pose();
  const Plane ground{Vec3::UnitZ(), 0.5};
  for (int i = 0; i < 100; ++i) {
    const CameraPose c = camera_update(c0, ground, angle(rng), angle(rng) / 2.0);
    EXPECT_NEAR(c.translation.norm(), c0.translation.norm(), 1e-12);
  }
}

TEST(CameraUpdate, HalfTurnAboutVerticalNormal) {
  CameraPose c0;
  c0.translation = Vec3(0.0, 0.0, -2.0);  // identity rotation: principal axis (0, 0, 1)
  const Plane plane{Vec3::UnitY(), 0.0};
  const CameraPose c = camera_update(c0, plane, 180.0, 0.0);
  expect_vec_near(c.translation, Vec3(0.0, 0.0, 2.0), 1e-9);
}

TEST(CameraUpdate, AzimuthsCompose) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> angle(-180.0, 180.0);
  const CameraPose c0 = sample_pose();
  const Plane ground{Vec3::UnitZ(), 0.5};
  for (int i = 0; i < 100; ++i) {
    const double g1 = angle(rng);
    const double g2 = angle(rng);
    const CameraPose twice = camera_update(camera_update(c0, ground, g1, 0.0), ground, g2, 0.0);
    const CameraPose once = camera_update(c0, ground, g1 + g2, 0.0);
    EXPECT_LT((twice.rotation.matrix() - once.rotation.matrix()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((twice.translation - once.translation).norm(), 1e-9);
  }
}

TEST(CameraUpdate, NegativeElevationLowersTowardPlane) {
  const CameraPose c0 = sample_pose();
  const Plane ground{Vec3::UnitZ(), 0.5};
  const CameraPose lowered = camera_update(c0, ground, 0.0, -30.0);
  EXPECT_NEAR(elevation_of(lowered, ground), 0.0, 1e-9);
  EXPECT_NEAR(lowered.translation.z(), 0.0, 1e-12);
  const CameraPose raised = camera_update(c0, ground, 0.0, 20.0);
  EXPECT_NEAR(elevation_of(raised, ground), 50.0, 1e-9);
}

TEST(CameraUpdate, DegenerateElevationAxis) {
  const CameraPose top = look_at(Vec3(0, 0, 2), Vec3::Zero(), Vec3::UnitY());
  try {
    camera_update(top, Plane{Vec3::UnitZ(), 0.5}, 10.0, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateElevationAxis);
  }
}

TEST(Backproject, PrincipalPointGivesPrincipalAxis) {
  const CameraIntrinsics intr{50.0, 60.0, 15.5, 12.0, 32, 24};
  const CameraPose pose = sample_pose();
  const Ray ray = backproject(intr, pose, intr.cx, intr.cy);
  expect_vec_near(ray.direction, pose.principal_axis(), 1e-12);
  expect_vec_near(ray.origin, pose.translation, 0.0);
}

TEST(Backproject, UnitDirection) {
  const CameraIntrinsics intr{50.0, 60.0, 15.5, 12.0, 32, 24};
  const Ray ray = backproject(intr, sample_pose(), 3.0, 20.0);
  EXPECT_NEAR(ray.direction.norm(), 1.0, 1e-15);
}

TEST(Backproject, HandComputedPinhole) {
  const CameraIntrinsics intr{1.0, 1.0, 0.0, 0.0, 2, 1};
  const Ray ray = backproject(intr, CameraPose{}, 1.0, 0.0);
  expect_vec_near(ray.direction, Vec3(1.0, 0.0, 1.0) / std::sqrt(2.0), 1e-15);
}

TEST(Backproject, OutOfBounds) {
  const CameraIntrinsics intr{10.0, 10.0, 4.0, 4.0, 8, 8};
  EXPECT_THROW(backproject(intr, CameraPose{}, 9.0, 2.0), Error);
  EXPECT_THROW(backproject(intr, CameraPose{}, 2.0, -1.0), Error);
}

TEST(Backproject, ProjectRoundTrip) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> px(0.0, 63.0);
  std::uniform_real_distribution<double> dist(0.1, 10.0);
  const CameraIntrinsics intr{70.0, 72.0, 31.5, 31.5, 64, 64};
  const CameraPose pose = sample_pose();
  for (int i = 0; i < 500; ++i) {
    const double u = px(rng);
    const double v = px(rng);
    const Ray ray = backproject(intr, pose, u, v);
    const PixelProjection p = project(intr, pose, ray.at(dist(rng)));
    EXPECT_NEAR(p.u, u, 1e-6);
    EXPECT_NEAR(p.v, v, 1e-6);
  }
}

TEST(Ransac, ExactPlane) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> pts;
  for (int i = 0; i < 50; ++i) pts.emplace_back(u(rng), u(rng), 0.0);
  const PlaneFit fit = fit_plane_ransac(pts, 1e-6, 50, 42);
  EXPECT_NEAR(std::abs(fit.plane.normal.z()), 1.0, 1e-9);
  EXPECT_EQ(fit.inliers.size(), pts.size());
}

TEST(Ransac, RecoversPlaneWithOutliers) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> pts;
  for (int i = 0; i < 90; ++i) pts.emplace_back(u(rng), u(rng), 0.0);
  for (int i = 0; i < 10; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
  const PlaneFit fit = fit_plane_ransac(pts, 1e-3, 200, 3);
  EXPECT_LT((fit.plane.normal - Vec3::UnitZ()).norm(), 1e-3);
  EXPECT_GE(fit.inliers.size(), 90u);
}

TEST(Ransac, TooFewPoints) {
  std::vector<Vec3> pts{Vec3::Zero(), Vec3::UnitX()};
  try {
    fit_plane_ransac(pts, 1e-3, 10, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientData);
  }
}

TEST(Ransac, CollinearPointsHaveNoPlane) {
  std::vector<Vec3> pts;
  for (int i = 0; i < 20; ++i) pts.emplace_back(i, 2.0 * i, -i);
  try {
    fit_plane_ransac(pts, 1e-3, 50, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoPlaneFound);
  }
}

TEST(Ransac, InlierSetInvariantUnderRigidMotion) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> pts;
  for (int i = 0; i < 60; ++i) pts.emplace_back(u(rng), u(rng), 0.0);
  for (int i = 0; i < 15; ++i) pts.emplace_back(u(rng), u(rng), 0.2 + std::abs(u(rng)));
  const Rotation3 r = rodrigues_rotation(random_unit(rng), 37.0);
  const Vec3 t(0.3, -1.2, 2.0);
  std::vector<Vec3> moved;
  for (const auto& p : pts) moved.push_back(r * p + t);
  const PlaneFit a = fit_plane_ransac(pts, 1e-6, 100, 17);
  const PlaneFit b = fit_plane_ransac(moved, 1e-6, 100, 17);
  EXPECT_EQ(a.inliers, b.inliers);
  for (auto i : b.inliers) EXPECT_NEAR(b.plane.signed_distance(moved[i]), 0.0, 1e-9);
  EXPECT_NEAR(std::abs(b.plane.normal.dot(r * a.plane.normal)), 1.0, 1e-9);
}

TEST(Elevation, Horizontal) {
  const CameraPose c = look_at(Vec3(0, -2, 0), Vec3::Zero(), Vec3::UnitZ());
  EXPECT_NEAR(elevation_of(c, Plane{Vec3::UnitZ(), 0.5}), 0.0, 1e-12);
}

TEST(Elevation, StraightDown) {
  const CameraPose c = look_at(Vec3(0, 0, 2), Vec3::Zero(), Vec3::UnitY());
  EXPECT_NEAR(elevation_of(c, Plane{Vec3::UnitZ(), 0.5}), 90.0, 1e-9);
  // Orientation of the stored normal does not matter.
  EXPECT_NEAR(elevation_of(c, Plane{-Vec3::UnitZ(), -0.5}), 90.0, 1e-9);
}

TEST(Elevation, FortyFive) {
  const CameraPose c = look_at(Vec3(0, -1, 1), Vec3::Zero(), Vec3::UnitZ());
  EXPECT_NEAR(elevation_of(c, Plane{Vec3::UnitZ(), 0.5}), 45.0, 1e-6);
}

}  // namespace
}  // namespace scanfill
