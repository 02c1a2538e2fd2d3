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

#pragma once

#include "coopbev/common.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <vector>

namespace coopbev {

/// Planar rigid transform p' = R p + t (BEV plane, meters).
class RigidTransform2D {
 public:
  RigidTransform2D() : rotation_(Mat2::Identity()), translation_(Vec2::Zero()) {}

  /// Throws std::invalid_argument when `rotation` is not a proper rotation.
  RigidTransform2D(const Mat2& rotation, const Vec2& translation)
      : rotation_(rotation), translation_(translation) {
    if (!is_rotation(rotation_)) throw std::invalid_argument("RigidTransform2D: rotation is not orthonormal with det +1");
  }

  static RigidTransform2D identity() { return {}; }

  static RigidTransform2D from_yaw(double yaw, const Vec2& translation = Vec2::Zero()) {
    Mat2 r;
    const double c = std::cos(yaw), s = std::sin(yaw);
    r << c, -s, s, c;
    RigidTransform2D t;
    t.rotation_ = r;
    t.translation_ = translation;
    return t;
  }

  const Mat2& rotation() const { return rotation_; }
  const Vec2& translation() const { return translation_; }
  double yaw() const { return std::atan2(rotation_(1, 0), rotation_(0, 0)); }

  Vec2 apply(const Vec2& p) const { return rotation_ * p + translation_; }

  RigidTransform2D inverse() const {
    RigidTransform2D t;
    t.rotation_ = rotation_.transpose();
    t.translation_ = -(t.rotation_ * translation_);
    return t;
  }

  /// (a * b).apply(p) == a.apply(b.apply(p))
  friend RigidTransform2D operator*(const RigidTransform2D& a, const RigidTransform2D& b) {
    RigidTransform2D t;
    t.rotation_ = a.rotation_ * b.rotation_;
    t.translation_ = a.rotation_ * b.translation_ + a.translation_;
    return t;
  }

  static bool is_rotation(const Mat2& r, double tol = 1e-9) {
    return (r.transpose() * r - Mat2::Identity()).cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - 1.0) <= tol;
  }

 private:
  Mat2 rotation_;
  Vec2 translation_;
};

/// Axis-aligned region of interest in a sensor or BEV frame (meters).
struct Roi {
  double x_min = -51.2, x_max = 51.2;
  double y_min = -51.2, y_max = 51.2;
  double z_min = -5.0, z_max = 3.0;

  static Roi vehicle_default() { return {}; }
  static Roi infrastructure_default() { return {0.0, 102.4, -51.2, 51.2, -5.0, 3.0}; }

  bool valid() const { return x_min < x_max && y_min < y_max && z_min < z_max; }
  void validate(const std::string& field = "roi") const {
    if (!valid()) throw ConfigError(field, "requires x_min < x_max, y_min < y_max, z_min < z_max");
  }

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }

  /// Closed-interval containment in the BEV plane.
  bool contains_xy(const Vec2& p) const { return p.x() >= x_min && p.x() <= x_max && p.y() >= y_min && p.y() <= y_max; }

  bool operator==(const Roi&) const = default;
};

inline Vec2 apply_rigid_transform(const RigidTransform2D& t, const Vec2& p) { return t.apply(p); }

/// R * ref + T + offset; the offset is added in the target frame.
inline Vec2 compensate_reference_point(const Vec2& ref_bev, const RigidTransform2D& t, const Vec2& offset) {
  return t.apply(ref_bev) + offset;
}

struct NormalizedPoint {
  Vec2 coord;
  bool in_bounds = false;
};

/// Maps `p` into [0,1]^2 over the ROI extent. Boundary points are in bounds.
inline NormalizedPoint normalize_point(const Vec2& p, const Roi& roi) {
  NormalizedPoint out;
  out.coord = Vec2((p.x() - roi.x_min) / (roi.x_max - roi.x_min), (p.y() - roi.y_min) / (roi.y_max - roi.y_min));
  out.in_bounds = out.coord.x() >= 0.0 && out.coord.x() <= 1.0 && out.coord.y() >= 0.0 && out.coord.y() <= 1.0;
  return out;
}

inline Vec2 denormalize_point(const Vec2& u, const Roi& roi) {
  return {roi.x_min + u.x() * (roi.x_max - roi.x_min), roi.y_min + u.y() * (roi.y_max - roi.y_min)};
}

enum class OffsetGranularity { global, per_query_cell };

inline std::string to_string(OffsetGranularity g) { return g == OffsetGranularity::global ? "global" : "per_query_cell"; }

/// Learnable corrections added to the cross-frame reference points of each
/// side. In `per_query_cell` mode the vectors hold one entry per query cell
/// and `d_veh` / `d_inf` are unused.
struct CalibrationOffsets {
  Vec2 d_veh = Vec2::Zero();
  Vec2 d_inf = Vec2::Zero();
  OffsetGranularity granularity = OffsetGranularity::global;
  std::vector<Vec2> cell_veh;
  std::vector<Vec2> cell_inf;
  double bound = 5.0;

  static CalibrationOffsets zero() { return {}; }

  Vec2 veh_at(std::size_t cell) const { return granularity == OffsetGranularity::global ? d_veh : cell_veh.at(cell); }
  Vec2 inf_at(std::size_t cell) const { return granularity == OffsetGranularity::global ? d_inf : cell_inf.at(cell); }

  bool within_bound() const {
    auto ok = [&](const Vec2& v) { return all_finite(v) && v.cwiseAbs().maxCoeff() <= bound; };
    if (granularity == OffsetGranularity::global) return ok(d_veh) && ok(d_inf);
    for (const auto& v : cell_veh)
      if (!ok(v)) return false;
    for (const auto& v : cell_inf)
      if (!ok(v)) return false;
    return true;
  }
};

/// One BEV reference point projected into both sensor feature frames.
struct ReferencePoint {
  Vec2 bev_coord = Vec2::Zero();
  Vec2 veh_coord = Vec2::Zero();
  Vec2 inf_coord = Vec2::Zero();
  Vec2 veh_normalized = Vec2::Zero();
  Vec2 inf_normalized = Vec2::Zero();
  bool inf_in_bounds = false;

  double mask() const { return inf_in_bounds ? 1.0 : 0.0; }
};

/// Frame bookkeeping needed to project BEV points into both feature maps.
struct ProjectionContext {
  RigidTransform2D bev2veh;
  RigidTransform2D bev2inf;
  Roi roi_veh = Roi::vehicle_default();
  Roi roi_inf = Roi::infrastructure_default();
  /// False when no infrastructure features are available; every mask is 0.
  bool infrastructure_present = true;
};

inline ReferencePoint make_reference_point(const Vec2& bev, const ProjectionContext& ctx, const Vec2& d_veh,
                                           const Vec2& d_inf) {
  ReferencePoint r;
  r.bev_coord = bev;
  r.veh_coord = compensate_reference_point(bev, ctx.bev2veh, d_veh);
  r.inf_coord = compensate_reference_point(bev, ctx.bev2inf, d_inf);
  r.veh_normalized = normalize_point(r.veh_coord, ctx.roi_veh).coord;
  const auto inf = normalize_point(r.inf_coord, ctx.roi_inf);
  r.inf_normalized = inf.coord;
  r.inf_in_bounds = ctx.infrastructure_present && inf.in_bounds;
  return r;
}

/// Deterministic sub-cell pattern: the cell center first, then jittered
/// points at +/- a quarter cell. Fractions are relative to the cell size.
inline std::vector<Vec2> reference_pattern(int n_ref) {
  static const std::array<Vec2, 8> kPattern = {Vec2(0.0, 0.0),     Vec2(0.25, 0.25),  Vec2(-0.25, 0.25),
                                               Vec2(0.0, -0.25),   Vec2(-0.25, -0.25), Vec2(0.25, -0.25),
                                               Vec2(0.25, 0.0),    Vec2(-0.25, 0.0)};
  if (n_ref < 1 || n_ref > static_cast<int>(kPattern.size()))
    throw ConfigError("model.n_ref", "must be in [1, 8]");
  return {kPattern.begin(), kPattern.begin() + n_ref};
}

}  // namespace coopbev
