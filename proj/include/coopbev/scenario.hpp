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
#include "coopbev/geometry.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace coopbev {

enum class ObjectClass { car, truck, pedestrian, cyclist };
enum class SensorId { vehicle, infrastructure };

inline std::string to_string(ObjectClass c) {
  switch (c) {
    case ObjectClass::car: return "car";
    case ObjectClass::truck: return "truck";
    case ObjectClass::pedestrian: return "pedestrian";
    case ObjectClass::cyclist: return "cyclist";
  }
  return "car";
}

inline ObjectClass object_class_from_string(const std::string& s) {
  if (s == "car") return ObjectClass::car;
  if (s == "truck") return ObjectClass::truck;
  if (s == "pedestrian") return ObjectClass::pedestrian;
  if (s == "cyclist") return ObjectClass::cyclist;
  throw ConfigError("class_label", "unknown object class '" + s + "'");
}

inline std::string to_string(SensorId s) { return s == SensorId::vehicle ? "vehicle" : "infrastructure"; }

inline SensorId sensor_id_from_string(const std::string& s) {
  if (s == "vehicle") return SensorId::vehicle;
  if (s == "infrastructure") return SensorId::infrastructure;
  throw std::invalid_argument("unknown sensor id '" + s + "'");
}

/// Box object; center z is the box mid-height above ground. Size is
/// length (along yaw), width, height.
struct ObjectState {
  std::int64_t object_id = 0;
  ObjectClass class_label = ObjectClass::car;
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3(4.5, 1.9, 1.6);
  double yaw = 0.0;
  Vec2 velocity = Vec2::Zero();

  Vec2 center_xy() const { return center.head<2>(); }
};

enum class FovKind { semicircle, fan };

struct SensorSpec {
  /// Vehicle: mount relative to the ego frame. Infrastructure: world pose.
  RigidTransform2D pose;
  double height = 1.8;
  FovKind fov = FovKind::semicircle;
  double fan_angle = std::numbers::pi / 2.0;
  double max_range = 80.0;
  double azimuth_resolution = 2.0 * std::numbers::pi / 720.0;
  int rings = 8;
  double elevation_min = -20.0 * std::numbers::pi / 180.0;
  double elevation_max = -0.5 * std::numbers::pi / 180.0;

  static SensorSpec vehicle_default() { return {}; }
  static SensorSpec infrastructure_default(const RigidTransform2D& world_pose) {
    SensorSpec s;
    s.pose = world_pose;
    s.height = 4.0;
    s.fov = FovKind::fan;
    s.fan_angle = 120.0 * std::numbers::pi / 180.0;
    s.max_range = 100.0;
    s.elevation_min = -35.0 * std::numbers::pi / 180.0;
    s.elevation_max = -1.5 * std::numbers::pi / 180.0;
    return s;
  }

  void validate(const std::string& field) const {
    if (!(max_range > 0)) throw ConfigError(field + ".max_range", "must be > 0");
    if (!(azimuth_resolution > 0)) throw ConfigError(field + ".azimuth_resolution", "must be > 0");
    if (rings < 1) throw ConfigError(field + ".rings", "must be >= 1");
    if (!(elevation_min <= elevation_max)) throw ConfigError(field + ".elevation_min", "must be <= elevation_max");
    if (fov == FovKind::fan && !(fan_angle > 0 && fan_angle <= 2 * std::numbers::pi))
      throw ConfigError(field + ".fan_angle", "must be in (0, 2pi]");
  }

  /// Ring elevations: geometric spacing in |tan| when the whole range looks
  /// down, linear otherwise.
  std::vector<double> elevations() const {
    std::vector<double> out;
    if (rings == 1) return {0.5 * (elevation_min + elevation_max)};
    const bool downward = elevation_max < 0.0;
    for (int k = 0; k < rings; ++k) {
      const double f = static_cast<double>(k) / (rings - 1);
      if (downward) {
        const double t0 = std::log(-std::tan(elevation_min)), t1 = std::log(-std::tan(elevation_max));
        out.push_back(-std::atan(std::exp(t0 + f * (t1 - t0))));
      } else {
        out.push_back(elevation_min + f * (elevation_max - elevation_min));
      }
    }
    return out;
  }

  bool azimuth_in_fov(double az) const {
    if (fov == FovKind::semicircle) return std::abs(az) <= std::numbers::pi / 2.0;
    return std::abs(az) <= 0.5 * fan_angle;
  }
};

struct Scenario {
  int duration_frames = 1;
  double frame_rate_hz = 10.0;
  /// Initial states; motion is constant-velocity integration.
  std::vector<ObjectState> objects;
  SensorSpec vehicle_sensor;
  SensorSpec infra_sensor;
  std::vector<RigidTransform2D> ego_trajectory;
  /// Translation error (infrastructure frame, meters) that the compensation
  /// offset d_inf must add back: reported bev->inf = true bev->inf - error.
  Vec2 true_miscalibration = Vec2::Zero();
  int k_min = 1;
  std::uint64_t seed = 0;

  double frame_period() const { return 1.0 / frame_rate_hz; }

  ObjectState object_at(const ObjectState& initial, int frame) const {
    ObjectState s = initial;
    s.center.head<2>() += initial.velocity * (frame * frame_period());
    return s;
  }

  std::vector<ObjectState> objects_at(int frame) const {
    std::vector<ObjectState> out;
    out.reserve(objects.size());
    for (const auto& o : objects) out.push_back(object_at(o, frame));
    return out;
  }

  const SensorSpec& sensor(SensorId id) const { return id == SensorId::vehicle ? vehicle_sensor : infra_sensor; }

  /// World pose of the given sensor at `frame`.
  RigidTransform2D sensor_world_pose(SensorId id, int frame) const {
    if (id == SensorId::vehicle) return ego_trajectory.at(frame) * vehicle_sensor.pose;
    return infra_sensor.pose;
  }

  void validate() const {
    if (duration_frames < 1) throw ConfigError("scenario.duration_frames", "must be >= 1");
    if (frame_rate_hz != 10.0 && frame_rate_hz != 5.0 && frame_rate_hz != 2.0)
      throw ConfigError("scenario.frame_rate_hz", "must be one of 10, 5, 2");
    if (static_cast<int>(ego_trajectory.size()) != duration_frames)
      throw ConfigError("scenario.ego_trajectory", "needs one pose per frame");
    vehicle_sensor.validate("scenario.vehicle_sensor");
    infra_sensor.validate("scenario.infra_sensor");
    std::vector<std::int64_t> ids;
    for (const auto& o : objects) {
      if (!(o.size.x() > 0 && o.size.y() > 0 && o.size.z() > 0))
        throw ConfigError("scenario.objects", "object sizes must be positive");
      ids.push_back(o.object_id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
      throw ConfigError("scenario.objects", "object ids must be unique");
    if (k_min < 1) throw ConfigError("scenario.k_min", "must be >= 1");
  }
};

struct PointCloud {
  std::vector<Vec3> points;  // sensor frame; z relative to the sensor origin
  std::vector<std::int64_t> labels;  // object id per point
  double timestamp = 0.0;
  SensorId sensor_id = SensorId::vehicle;
};

// ---------------------------------------------------------------------------
// Generation

enum class Layout { random, occlusion, landmarks, crossing };

inline std::string to_string(Layout l) {
  switch (l) {
    case Layout::random: return "random";
    case Layout::occlusion: return "occlusion";
    case Layout::landmarks: return "landmarks";
    case Layout::crossing: return "crossing";
  }
  return "random";
}

inline Layout layout_from_string(const std::string& s) {
  if (s == "random") return Layout::random;
  if (s == "occlusion") return Layout::occlusion;
  if (s == "landmarks") return Layout::landmarks;
  if (s == "crossing") return Layout::crossing;
  throw ConfigError("scenario.layout", "unknown layout '" + s + "'");
}

struct ScenarioParams {
  Layout layout = Layout::occlusion;
  int num_objects = 8;
  int frames = 20;
  double frame_rate_hz = 10.0;
  double min_speed = 4.0;
  double max_speed = 10.0;
  double static_fraction = 0.0;
  double ego_speed = 0.0;
  /// Occlusion layout: parked vans between the ego and the traffic.
  int occluders = 4;
  Vec2 infra_position = Vec2(30.0, -25.0);
  double infra_yaw = std::numbers::pi / 2.0;
  Vec2 true_miscalibration = Vec2::Zero();
  int k_min = 1;
  /// Footprint side of landmark posts (m).
  double landmark_size = 0.3;
  /// Horizontal angular step shared by both sensors (degrees).
  double azimuth_resolution_deg = 0.5;

  void validate() const {
    if (num_objects < 0) throw ConfigError("scenario.num_objects", "must be >= 0");
    if (frames < 1) throw ConfigError("scenario.frames", "must be >= 1");
    if (frame_rate_hz != 10.0 && frame_rate_hz != 5.0 && frame_rate_hz != 2.0)
      throw ConfigError("scenario.frame_rate_hz", "must be one of 10, 5, 2");
    if (!(min_speed >= 0 && max_speed >= min_speed)) throw ConfigError("scenario.max_speed", "requires 0 <= min <= max");
    if (!(static_fraction >= 0 && static_fraction <= 1)) throw ConfigError("scenario.static_fraction", "must be in [0,1]");
    if (occluders < 0) throw ConfigError("scenario.occluders", "must be >= 0");
    if (!all_finite(true_miscalibration)) throw ConfigError("scenario.true_miscalibration", "must be finite");
    if (k_min < 1) throw ConfigError("scenario.k_min", "must be >= 1");
    if (!(landmark_size > 0 && landmark_size <= 5)) throw ConfigError("scenario.landmark_size", "must be in (0, 5] m");
    if (!(azimuth_resolution_deg >= 0.05 && azimuth_resolution_deg <= 5))
      throw ConfigError("scenario.azimuth_resolution_deg", "must be in [0.05, 5]");
  }
};

namespace detail {

/// Oriented-footprint overlap test with a safety margin (separating axes).
inline bool footprints_overlap(const ObjectState& a, const ObjectState& b, double margin) {
  const auto corners = [](const ObjectState& o, double grow) {
    const double c = std::cos(o.yaw), s = std::sin(o.yaw);
    const double hl = 0.5 * o.size.x() + grow, hw = 0.5 * o.size.y() + grow;
    std::array<Vec2, 4> out;
    const std::array<Vec2, 4> local = {Vec2(hl, hw), Vec2(-hl, hw), Vec2(-hl, -hw), Vec2(hl, -hw)};
    for (int i = 0; i < 4; ++i)
      out[i] = o.center_xy() + Vec2(c * local[i].x() - s * local[i].y(), s * local[i].x() + c * local[i].y());
    return out;
  };
  const auto ca = corners(a, margin), cb = corners(b, margin);
  for (const double yaw : {a.yaw, a.yaw + std::numbers::pi / 2, b.yaw, b.yaw + std::numbers::pi / 2}) {
    const Vec2 axis(std::cos(yaw), std::sin(yaw));
    double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
    for (const auto& p : ca) {
      amin = std::min(amin, p.dot(axis));
      amax = std::max(amax, p.dot(axis));
    }
    for (const auto& p : cb) {
      bmin = std::min(bmin, p.dot(axis));
      bmax = std::max(bmax, p.dot(axis));
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

inline ObjectState make_object(std::int64_t id, ObjectClass cls, const Vec2& xy, double yaw, const Vec2& vel) {
  ObjectState o;
  o.object_id = id;
  o.class_label = cls;
  switch (cls) {
    case ObjectClass::car: o.size = Vec3(4.5, 1.9, 1.6); break;
    case ObjectClass::truck: o.size = Vec3(6.0, 2.4, 2.8); break;
    case ObjectClass::pedestrian: o.size = Vec3(0.6, 0.6, 1.8); break;
    case ObjectClass::cyclist: o.size = Vec3(1.8, 0.7, 1.7); break;
  }
  o.center = Vec3(xy.x(), xy.y(), 0.5 * o.size.z());
  o.yaw = yaw;
  o.velocity = vel;
  return o;
}

/// Rejects placements overlapping existing objects (at any frame) or the
/// sensors' own footprints.
inline bool placement_ok(const ObjectState& cand, const std::vector<ObjectState>& placed, const ScenarioParams& p,
                         const std::vector<RigidTransform2D>& ego) {
  const double dt = 1.0 / p.frame_rate_hz;
  for (int f = 0; f < p.frames; ++f) {
    ObjectState c = cand;
    c.center.head<2>() += cand.velocity * (f * dt);
    if ((c.center_xy() - ego[f].translation()).norm() < 4.0) return false;
    if ((c.center_xy() - p.infra_position).norm() < 3.0) return false;
    for (const auto& o : placed) {
      ObjectState q = o;
      q.center.head<2>() += o.velocity * (f * dt);
      if (footprints_overlap(c, q, 0.4)) return false;
    }
  }
  return true;
}

}  // namespace detail

/// Deterministic synthetic world for (seed, params).
inline Scenario generate_scenario(std::uint64_t seed, const ScenarioParams& p) {
  p.validate();
  Scenario s;
  s.seed = seed;
  s.duration_frames = p.frames;
  s.frame_rate_hz = p.frame_rate_hz;
  s.true_miscalibration = p.true_miscalibration;
  s.k_min = p.k_min;
  s.vehicle_sensor = SensorSpec::vehicle_default();
  s.infra_sensor = SensorSpec::infrastructure_default(RigidTransform2D::from_yaw(p.infra_yaw, p.infra_position));
  const double az_step = p.azimuth_resolution_deg * std::numbers::pi / 180.0;
  s.vehicle_sensor.azimuth_resolution = az_step;
  s.infra_sensor.azimuth_resolution = az_step;
  const double dt = 1.0 / p.frame_rate_hz;
  for (int f = 0; f < p.frames; ++f) s.ego_trajectory.push_back(RigidTransform2D::from_yaw(0.0, Vec2(p.ego_speed * f * dt, 0.0)));

  Rng rng(seed);
  std::int64_t next_id = 1;
  auto try_place = [&](auto&& sampler, int attempts) {
    for (int a = 0; a < attempts; ++a) {
      ObjectState cand = sampler(next_id);
      if (detail::placement_ok(cand, s.objects, p, s.ego_trajectory)) {
        s.objects.push_back(cand);
        ++next_id;
        return true;
      }
    }
    return false;
  };
  auto speed = [&]() { return rng.uniform(p.min_speed, p.max_speed); };
  auto is_static = [&]() { return rng.uniform() < p.static_fraction; };

  switch (p.layout) {
    case Layout::random: {
      for (int i = 0; i < p.num_objects; ++i)
        try_place(
            [&](std::int64_t id) {
              const Vec2 xy(rng.uniform(-45.0, 45.0), rng.uniform(-45.0, 45.0));
              const double yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
              const double v = is_static() ? 0.0 : speed();
              return detail::make_object(id, ObjectClass::car, xy, yaw, v * Vec2(std::cos(yaw), std::sin(yaw)));
            },
            200);
      break;
    }
    case Layout::occlusion: {
      // Wall of parked vans across the ego's forward view.
      const double wall_x = 9.0;
      for (int i = 0; i < p.occluders; ++i) {
        const double y = p.occluders == 1 ? 0.0 : -10.5 + 21.0 * i / (p.occluders - 1);
        ObjectState van = detail::make_object(next_id, ObjectClass::car, Vec2(wall_x + rng.uniform(-0.5, 0.5), y),
                                              std::numbers::pi / 2.0, Vec2::Zero());
        van.size = Vec3(5.6, 2.2, 2.6);
        van.center.z() = 1.3;
        if (detail::placement_ok(van, s.objects, p, s.ego_trajectory)) {
          s.objects.push_back(van);
          ++next_id;
        }
      }
      // Cross traffic behind the wall, inside the infrastructure fan.
      for (int i = 0; i < p.num_objects; ++i)
        try_place(
            [&](std::int64_t id) {
              const bool along_y = rng.uniform() < 0.7;
              const double dir = rng.uniform() < 0.5 ? 1.0 : -1.0;
              const double yaw = along_y ? dir * std::numbers::pi / 2.0 : (dir > 0 ? 0.0 : std::numbers::pi);
              const Vec2 xy(rng.uniform(17.0, 42.0), rng.uniform(-14.0, 14.0));
              const double v = is_static() ? 0.0 : speed();
              return detail::make_object(id, ObjectClass::car, xy, yaw, v * Vec2(std::cos(yaw), std::sin(yaw)));
            },
            400);
      break;
    }
    case Layout::landmarks: {
      // Static poles spread over the region both sensors cover.
      for (int i = 0; i < p.num_objects; ++i)
        try_place(
            [&](std::int64_t id) {
              const Vec2 xy(rng.uniform(8.0, 48.0), rng.uniform(-18.0, 22.0));
              ObjectState pole = detail::make_object(id, ObjectClass::pedestrian, xy, rng.uniform(-3.14, 3.14), Vec2::Zero());
              pole.size.x() = p.landmark_size;
              pole.size.y() = p.landmark_size;
              return pole;
            },
            200);
      break;
    }
    case Layout::crossing: {
      // Cars crossing the ego's forward view sideways, centered on the ego
      // axis over the run so they stay in view throughout.
      const double duration = p.frames * dt;
      for (int i = 0; i < p.num_objects; ++i)
        try_place(
            [&](std::int64_t id) {
              const double dir = rng.uniform() < 0.5 ? 1.0 : -1.0;
              const double v = is_static() ? 0.0 : speed();
              const Vec2 xy(rng.uniform(12.0, 35.0), -dir * 0.5 * v * duration + rng.uniform(-2.0, 2.0));
              return detail::make_object(id, ObjectClass::car, xy, dir * std::numbers::pi / 2.0, Vec2(0.0, dir * v));
            },
            200);
      break;
    }
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Ray casting

namespace detail {

/// 2D slab test of a ray (origin o, unit dir d) against an oriented footprint.
/// Returns the entry/exit distances when the ray hits in front of o.
inline std::optional<std::pair<double, double>> ray_footprint(const Vec2& o, const Vec2& d, const Vec2& center,
                                                             double yaw, double half_l, double half_w) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const Vec2 rel = o - center;
  const Vec2 ol(c * rel.x() + s * rel.y(), -s * rel.x() + c * rel.y());
  const Vec2 dl(c * d.x() + s * d.y(), -s * d.x() + c * d.y());
  double t0 = -1e300, t1 = 1e300;
  const double half[2] = {half_l, half_w};
  for (int a = 0; a < 2; ++a) {
    if (std::abs(dl[a]) < 1e-15) {
      if (std::abs(ol[a]) > half[a]) return std::nullopt;
      continue;
    }
    double ta = (-half[a] - ol[a]) / dl[a];
    double tb = (half[a] - ol[a]) / dl[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t1 < 0.0 || t0 < 0.0) return std::nullopt;
  return std::make_pair(t0, t1);
}

}  // namespace detail

/// Casts rays from one sensor over `objects` (world frame). Points are
/// returned in the sensor frame. Exposed separately from the scenario so the
/// ray caster can be exercised on hand-built object sets.
inline PointCloud cast_rays(const SensorSpec& spec, const RigidTransform2D& sensor_world,
                            const std::vector<ObjectState>& objects, SensorId id, double timestamp) {
  PointCloud cloud;
  cloud.sensor_id = id;
  cloud.timestamp = timestamp;

  struct LocalBox {
    Vec2 center;
    double yaw, half_l, half_w, height;
    std::int64_t id;
  };
  const RigidTransform2D world_to_sensor = sensor_world.inverse();
  const double sensor_yaw = sensor_world.yaw();
  std::vector<LocalBox> boxes;
  for (const auto& o : objects) {
    const Vec2 c = world_to_sensor.apply(o.center_xy());
    // Boxes entirely out of range are skipped early.
    if (c.norm() - 0.5 * o.size.head<2>().norm() > spec.max_range) continue;
    boxes.push_back({c, o.yaw - sensor_yaw, 0.5 * o.size.x(), 0.5 * o.size.y(), o.size.z(), o.object_id});
  }
  const auto elevations = spec.elevations();
  std::vector<double> tans;
  for (double e : elevations) tans.push_back(std::tan(e));

  const int n_az = static_cast<int>(std::lround(2.0 * std::numbers::pi / spec.azimuth_resolution));
  const Vec2 origin = Vec2::Zero();
  struct Interval {
    double t_in, t_out, height;
    std::int64_t id;
  };
  std::vector<Interval> hits;
  for (int j = 0; j < n_az; ++j) {
    const double az = -std::numbers::pi + (j + 0.5) * (2.0 * std::numbers::pi / n_az);
    if (!spec.azimuth_in_fov(az)) continue;
    const Vec2 dir(std::cos(az), std::sin(az));
    hits.clear();
    for (const auto& b : boxes) {
      auto iv = detail::ray_footprint(origin, dir, b.center, b.yaw, b.half_l, b.half_w);
      if (iv) hits.push_back({iv->first, iv->second, b.height, b.id});
    }
    if (hits.empty()) continue;
    std::sort(hits.begin(), hits.end(), [](const Interval& a, const Interval& b) { return a.t_in < b.t_in; });
    for (double tn : tans) {
      for (const auto& h : hits) {
        const double z_in = spec.height + h.t_in * tn;  // height above ground at entry
        double t_hit = -1.0, z_hit = 0.0;
        if (z_in < 0.0) break;  // the ray reached the ground before this box
        if (z_in <= h.height) {
          t_hit = h.t_in;
          z_hit = z_in;
        } else if (tn < 0.0) {
          const double t_top = (h.height - spec.height) / tn;
          if (t_top >= h.t_in && t_top <= h.t_out) {
            t_hit = t_top;
            z_hit = h.height;
          }
        }
        if (t_hit < 0.0) continue;  // passes over this box
        if (t_hit <= spec.max_range) {
          cloud.points.emplace_back(t_hit * dir.x(), t_hit * dir.y(), z_hit - spec.height);
          cloud.labels.push_back(h.id);
        }
        break;
      }
    }
  }
  return cloud;
}

inline PointCloud sample_lidar(const Scenario& sc, SensorId id, int frame) {
  if (frame < 0 || frame >= sc.duration_frames) throw std::out_of_range("sample_lidar: frame out of range");
  return cast_rays(sc.sensor(id), sc.sensor_world_pose(id, frame), sc.objects_at(frame), id,
                   frame * sc.frame_period());
}

/// Per-object point counts of a cloud.
inline std::map<std::int64_t, int> points_per_object(const PointCloud& cloud) {
  std::map<std::int64_t, int> n;
  for (auto id : cloud.labels) ++n[id];
  return n;
}

/// Objects (world frame) that received at least k_min points from the sensor.
inline std::vector<ObjectState> ground_truth_from_cloud(const Scenario& sc, const PointCloud& cloud, int frame) {
  const auto counts = points_per_object(cloud);
  std::vector<ObjectState> out;
  for (const auto& o : sc.objects) {
    auto it = counts.find(o.object_id);
    if (it != counts.end() && it->second >= sc.k_min) out.push_back(sc.object_at(o, frame));
  }
  return out;
}

inline std::vector<ObjectState> ground_truth(const Scenario& sc, SensorId id, int frame) {
  return ground_truth_from_cloud(sc, sample_lidar(sc, id, frame), frame);
}

}  // namespace coopbev
