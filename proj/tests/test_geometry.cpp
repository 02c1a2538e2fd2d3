// Copyright 2026 The coopbev Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "coopbev/geometry.hpp"

#include <gtest/gtest.h>

#include <numbers>

namespace coopbev {
namespace {

constexpr double kPi = std::numbers::pi;

TEST(RigidTransform, IdentityLeavesPointUnchanged) {
  const Vec2 p = apply_rigid_transform(RigidTransform2D::identity(), Vec2(3.0, -4.0));
  EXPECT_EQ(p, Vec2(3.0, -4.0));
}

TEST(RigidTransform, QuarterTurnMapsXAxisToYAxis) {
  const Vec2 p = apply_rigid_transform(RigidTransform2D::from_yaw(kPi / 2), Vec2(1.0, 0.0));
  EXPECT_NEAR(p.x(), 0.0, 1e-15);
  EXPECT_NEAR(p.y(), 1.0, 1e-15);
}

TEST(RigidTransform, MatchesHandWrittenMatrixProduct) {
  const double a = kPi / 6;
  const Vec2 p = apply_rigid_transform(RigidTransform2D::from_yaw(a, Vec2(1, 2)), Vec2(2, 0));
  // [c -s; s c] * (2, 0) + (1, 2)
  const double ex = std::cos(a) * 2.0 - std::sin(a) * 0.0 + 1.0;
  const double ey = std::sin(a) * 2.0 + std::cos(a) * 0.0 + 2.0;
  EXPECT_NEAR(p.x(), ex, 1e-12);
  EXPECT_NEAR(p.y(), ey, 1e-12);
  EXPECT_NEAR(p.x(), 1.0 + std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(p.y(), 3.0, 1e-12);
}

TEST(RigidTransform, RejectsNonRotation) {
  Mat2 m;
  m << 1, 0, 0, -1;
  EXPECT_THROW(RigidTransform2D(m, Vec2::Zero()), std::invalid_argument);
  m << 2, 0, 0, 2;
  EXPECT_THROW(RigidTransform2D(m, Vec2::Zero()), std::invalid_argument);
}

TEST(RigidTransform, CompositionAndInverse) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const auto a = RigidTransform2D::from_yaw(rng.uniform(-kPi, kPi), Vec2(rng.normal(), rng.normal()));
    const auto b = RigidTransform2D::from_yaw(rng.uniform(-kPi, kPi), Vec2(rng.normal(), rng.normal()));
    const Vec2 p(rng.uniform(-50, 50), rng.uniform(-50, 50));
    EXPECT_LT(((a * b).apply(p) - a.apply(b.apply(p))).norm(), 1e-12);
    EXPECT_LT((a.inverse().apply(a.apply(p)) - p).norm(), 1e-12);
  }
}

TEST(Compensation, ZeroOffsetEqualsTransform) {
  const auto t = RigidTransform2D::from_yaw(0.4, Vec2(-3, 5));
  const Vec2 r(7.5, -2.25);
  EXPECT_EQ(compensate_reference_point(r, t, Vec2::Zero()), apply_rigid_transform(t, r));
}

TEST(Compensation, IdentityAddsOffset) {
  const Vec2 p = compensate_reference_point(Vec2::Zero(), RigidTransform2D::identity(), Vec2(0.5, -0.3));
  EXPECT_EQ(p, Vec2(0.5, -0.3));
}

TEST(Compensation, RotationTranslationOffsetComposition) {
  const Vec2 p = compensate_reference_point(Vec2(1, 0), RigidTransform2D::from_yaw(kPi / 2, Vec2(1, 1)), Vec2(0.1, 0.2));
  // (1,0) rotated a quarter turn is (0,1); plus (1,1) is (1,2); plus offset.
  EXPECT_NEAR(p.x(), 1.1, 1e-15);
  EXPECT_NEAR(p.y(), 2.2, 1e-15);
}

TEST(Compensation, OppositeOffsetsCancelExactly) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Vec2 r(std::ldexp(rng.uniform_int(-800, 800), -4), std::ldexp(rng.uniform_int(-800, 800), -4));
    // Dyadic values keep the round trip exact in floating point.
    const Vec2 o(std::ldexp(rng.uniform_int(-64, 64), -4), std::ldexp(rng.uniform_int(-64, 64), -4));
    const auto id = RigidTransform2D::identity();
    EXPECT_EQ(compensate_reference_point(compensate_reference_point(r, id, o), id, -o), r);
  }
}

TEST(Normalize, VehicleRoiCenter) {
  const auto n = normalize_point(Vec2(0, 0), Roi::vehicle_default());
  EXPECT_EQ(n.coord, Vec2(0.5, 0.5));
  EXPECT_TRUE(n.in_bounds);
}

TEST(Normalize, VehicleRoiCorner) {
  const auto n = normalize_point(Vec2(-51.2, -51.2), Roi::vehicle_default());
  EXPECT_EQ(n.coord, Vec2(0.0, 0.0));
  EXPECT_TRUE(n.in_bounds);
}

TEST(Normalize, BoundaryIsInBounds) {
  const auto n = normalize_point(Vec2(51.2, -51.2), Roi::vehicle_default());
  EXPECT_EQ(n.coord, Vec2(1.0, 0.0));
  EXPECT_TRUE(n.in_bounds);
}

TEST(Normalize, BehindInfrastructureIsOutOfBounds) {
  const auto n = normalize_point(Vec2(-1.0, 0.0), Roi::infrastructure_default());
  EXPECT_LT(n.coord.x(), 0.0);
  EXPECT_FALSE(n.in_bounds);
}

TEST(Normalize, DenormalizeRoundTrip) {
  Rng rng(11);
  const Roi roi = Roi::infrastructure_default();
  for (int i = 0; i < 500; ++i) {
    const Vec2 u(rng.uniform(), rng.uniform());
    const auto n = normalize_point(denormalize_point(u, roi), roi);
    EXPECT_LT((n.coord - u).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_TRUE(n.in_bounds);
  }
}

TEST(ReferencePoint, MaskFollowsInfrastructureBounds) {
  ProjectionContext ctx;
  ctx.bev2inf = RigidTransform2D::from_yaw(0.0, Vec2(10.0, 0.0));
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const Vec2 b(rng.uniform(-51.2, 51.2), rng.uniform(-51.2, 51.2));
    const auto r = make_reference_point(b, ctx, Vec2::Zero(), Vec2::Zero());
    const auto n = normalize_point(r.inf_coord, ctx.roi_inf);
    EXPECT_EQ(r.inf_in_bounds, n.in_bounds);
    EXPECT_EQ(r.mask(), n.in_bounds ? 1.0 : 0.0);
    EXPECT_LT((r.veh_normalized - normalize_point(r.veh_coord, ctx.roi_veh).coord).cwiseAbs().maxCoeff(), 1e-9);
    if (r.inf_in_bounds) {
      EXPECT_GE(r.inf_normalized.minCoeff(), 0.0);
      EXPECT_LE(r.inf_normalized.maxCoeff(), 1.0);
    }
  }
}

TEST(ReferencePoint, AbsentInfrastructureMasksEverything) {
  ProjectionContext ctx;
  ctx.infrastructure_present = false;
  const auto r = make_reference_point(Vec2(10, 0), ctx, Vec2::Zero(), Vec2::Zero());
  EXPECT_EQ(r.mask(), 0.0);
}

TEST(CalibrationOffsets, BoundCheck) {
  CalibrationOffsets c;
  EXPECT_TRUE(c.within_bound());
  c.d_inf = Vec2(5.0, -5.0);
  EXPECT_TRUE(c.within_bound());
  c.d_inf = Vec2(5.01, 0.0);
  EXPECT_FALSE(c.within_bound());
  c.d_inf = Vec2(std::nan(""), 0.0);
  EXPECT_FALSE(c.within_bound());
}

TEST(Roi, ValidateRejectsEmptyRange) {
  Roi r;
  r.x_max = r.x_min;
  EXPECT_THROW(r.validate(), ConfigError);
}

}  // namespace
}  // namespace coopbev
