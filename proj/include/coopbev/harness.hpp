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

#include "coopbev/encoder.hpp"
#include "coopbev/metrics.hpp"
#include "coopbev/tracker.hpp"
#include "coopbev/v2x_channel.hpp"

#include <json.hpp>

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace coopbev {

using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration

enum class Mode { vehicle_only, cooperative };

inline std::string to_string(Mode m) { return m == Mode::vehicle_only ? "vehicle_only" : "cooperative"; }

struct CecConfig {
  bool enabled = false;
  double lr = 0.05;
  int iters = 200;
  double point_spacing = 0.5;
  OffsetGranularity granularity = OffsetGranularity::global;
  double bound = 5.0;
  int levels = 6;
  double smoothing = 0.25;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("cec.lr", "must be > 0");
    if (levels < 1 || levels > 8) throw ConfigError("cec.levels", "must be in [1, 8]");
    if (!(smoothing >= 0 && smoothing <= 0.5)) throw ConfigError("cec.smoothing", "must be in [0, 0.5]");
    if (iters < 1) throw ConfigError("cec.iters", "must be >= 1");
    if (!(point_spacing > 0)) throw ConfigError("cec.point_spacing_m", "must be > 0");
    if (!(bound > 0)) throw ConfigError("cec.bound_m", "must be > 0");
  }
};

enum class WeightsKind { routed, seeded };

inline std::string to_string(WeightsKind w) { return w == WeightsKind::routed ? "routed" : "seeded"; }

struct ModelConfig {
  ModelDims dims{.channels = 8, .heads = 2, .levels = 4, .points = 4, .n_ref = 4, .query_cell = 1.6, .ffn_hidden = 8};
  int decoder_layers = 3;
  int decoder_levels = 3;
  int n_detect = 1024;
  WeightsKind weights = WeightsKind::routed;
  double voxel = 0.2;
  double smoothing = 0.0;
  RoutedEncoderOptions routed_encoder;
  RoutedDecoderOptions routed_decoder;

  void validate() const {
    dims.validate();
    if (decoder_layers < 1) throw ConfigError("model.decoder_layers", "must be >= 1");
    if (decoder_levels < 1 || decoder_levels > 4) throw ConfigError("model.decoder_levels", "must be in [1, 4]");
    if (n_detect < 0) throw ConfigError("model.n_detect", "must be >= 0");
    if (!(voxel > 0)) throw ConfigError("model.voxel_m", "must be > 0");
    if (!(smoothing >= 0 && smoothing <= 0.5)) throw ConfigError("model.smoothing", "must be in [0, 0.5]");
    if (!(routed_encoder.occupancy_cap > 0)) throw ConfigError("model.occupancy_cap", "must be > 0");
    if (weights == WeightsKind::routed && dims.channels % 8 != 0)
      throw ConfigError("model.channels", "routed weights need a multiple of 8");
    const int base = grid_cells(Roi::vehicle_default().width(), voxel);
    if (base % (1 << (dims.levels - 1)) != 0)
      throw ConfigError("model.levels", "voxel grid not divisible by 2^(levels-1)");
    const int q = grid_cells(Roi::vehicle_default().width(), dims.query_cell);
    if (q < 1 || q % (1 << (decoder_levels - 1)) != 0)
      throw ConfigError("model.decoder_levels", "query grid not divisible by 2^(decoder_levels-1)");
  }
};

struct Seeds {
  std::uint64_t scenario = 1;
  std::uint64_t model = 7;
  std::uint64_t channel = 11;
};

struct ExperimentConfig {
  ScenarioParams scenario;
  Mode mode = Mode::cooperative;
  CecConfig cec;
  ChannelConfig channel;
  ModelConfig model;
  LifecycleConfig tracker;
  MetricsConfig metrics;
  Seeds seeds;

  void validate() const {
    scenario.validate();
    cec.validate();
    if (scenario.true_miscalibration.cwiseAbs().maxCoeff() > cec.bound)
      throw ConfigError("scenario.true_miscalibration_m", "exceeds the offset bound cec.bound_m");
    channel.validate();
    model.validate();
    tracker.validate();
    metrics.validate();
  }
};

namespace detail {

/// Walks a JSON object, tracking the dotted path for error messages and
/// rejecting keys nobody asked for.
class JsonReader {
 public:
  JsonReader(const ojson& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(at(key), "must be a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(at(key), "must be an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(at(key), "must be non-negative");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(at(key), "must be a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(at(key), "must be a string");
      }
      out = v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(at(key), "has the wrong type");
    }
  }

  void get_vec2(const std::string& key, Vec2& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
      throw ConfigError(at(key), "must be an array of two numbers");
    out = Vec2(v[0].get<double>(), v[1].get<double>());
  }

  void get_doubles(const std::string& key, std::vector<double>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(at(key), "must be an array of numbers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(at(key), "must be an array of numbers");
      out.push_back(e.get<double>());
    }
  }

  template <typename Fn>
  void child(const std::string& key, Fn&& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    JsonReader r(j_.at(key), at(key));
    fn(r);
    r.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(at(k), "unknown key");
  }

 private:
  const ojson& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline ojson vec2_json(const Vec2& v) { return ojson::array({v.x(), v.y()}); }

}  // namespace detail

inline ExperimentConfig parse_config(const ojson& j) {
  ExperimentConfig c;
  detail::JsonReader root(j, "");
  root.child("scenario", [&](detail::JsonReader& r) {
    auto& s = c.scenario;
    std::string layout = to_string(s.layout);
    r.get("layout", layout);
    s.layout = layout_from_string(layout);
    r.get("num_objects", s.num_objects);
    r.get("frames", s.frames);
    r.get("frame_rate_hz", s.frame_rate_hz);
    r.get("min_speed_mps", s.min_speed);
    r.get("max_speed_mps", s.max_speed);
    r.get("static_fraction", s.static_fraction);
    r.get("ego_speed_mps", s.ego_speed);
    r.get("occluders", s.occluders);
    r.get_vec2("infra_position_m", s.infra_position);
    r.get("infra_yaw_rad", s.infra_yaw);
    r.get_vec2("true_miscalibration_m", s.true_miscalibration);
    r.get("k_min", s.k_min);
    r.get("landmark_size_m", s.landmark_size);
    r.get("azimuth_resolution_deg", s.azimuth_resolution_deg);
  });
  std::string mode = to_string(c.mode);
  root.get("mode", mode);
  if (mode == "vehicle_only")
    c.mode = Mode::vehicle_only;
  else if (mode == "cooperative")
    c.mode = Mode::cooperative;
  else
    throw ConfigError("mode", "must be vehicle_only or cooperative");
  root.child("cec", [&](detail::JsonReader& r) {
    r.get("enabled", c.cec.enabled);
    r.get("lr", c.cec.lr);
    r.get("iters", c.cec.iters);
    r.get("point_spacing_m", c.cec.point_spacing);
    std::string g = to_string(c.cec.granularity);
    r.get("granularity", g);
    if (g == "global")
      c.cec.granularity = OffsetGranularity::global;
    else if (g == "per_query_cell")
      c.cec.granularity = OffsetGranularity::per_query_cell;
    else
      throw ConfigError(r.at("granularity"), "must be global or per_query_cell");
    r.get("bound_m", c.cec.bound);
    r.get("levels", c.cec.levels);
    r.get("smoothing", c.cec.smoothing);
  });
  root.child("channel", [&](detail::JsonReader& r) {
    r.get("latency_ms", c.channel.latency_ms);
    r.get("jitter_ms", c.channel.jitter_ms);
    r.get("drop_prob", c.channel.drop_prob);
    r.get("compression_factor", c.channel.compression_factor);
  });
  root.child("model", [&](detail::JsonReader& r) {
    auto& m = c.model;
    r.get("channels", m.dims.channels);
    r.get("heads", m.dims.heads);
    r.get("levels", m.dims.levels);
    r.get("points", m.dims.points);
    r.get("n_ref", m.dims.n_ref);
    r.get("query_cell_m", m.dims.query_cell);
    r.get("ffn_hidden", m.dims.ffn_hidden);
    r.get("decoder_layers", m.decoder_layers);
    r.get("decoder_levels", m.decoder_levels);
    r.get("n_detect", m.n_detect);
    std::string w = to_string(m.weights);
    r.get("weights", w);
    if (w == "routed")
      m.weights = WeightsKind::routed;
    else if (w == "seeded")
      m.weights = WeightsKind::seeded;
    else
      throw ConfigError(r.at("weights"), "must be routed or seeded");
    r.get("voxel_m", m.voxel);
    r.get("smoothing", m.smoothing);
    r.get("occupancy_cap", m.routed_encoder.occupancy_cap);
    m.routed_decoder.occupancy_cap = m.routed_encoder.occupancy_cap;
    r.get("history_gain", m.routed_encoder.history_gain);
    r.get("score_tau_fraction", m.routed_decoder.score_tau_fraction);
    r.get("score_gain_per_cap", m.routed_decoder.score_gain_per_cap);
    r.get("step_gain", m.routed_decoder.step_gain);
    r.get("probe_cells", m.routed_decoder.probe_cells);
    r.get("track_max_level", m.routed_decoder.track_max_level);
  });
  root.child("tracker", [&](detail::JsonReader& r) {
    r.get("tau_new", c.tracker.tau_new);
    r.get("tau_keep", c.tracker.tau_keep);
    r.get("patience", c.tracker.patience);
    r.get("dedup_radius_m", c.tracker.dedup_radius);
    r.get("velocity_prediction", c.tracker.velocity_prediction);
  });
  root.child("metrics", [&](detail::JsonReader& r) {
    r.get_doubles("thresholds_m", c.metrics.thresholds);
    r.get("recall_levels", c.metrics.recall_levels);
    r.get("track_threshold_m", c.metrics.track_threshold);
    std::string m = to_string(c.metrics.criterion);
    r.get("matcher", m);
    c.metrics.criterion = match_criterion_from_string(m);
  });
  root.child("seeds", [&](detail::JsonReader& r) {
    r.get("scenario", c.seeds.scenario);
    r.get("model", c.seeds.model);
    r.get("channel", c.seeds.channel);
  });
  root.finish();
  c.model.routed_encoder.base_voxel = c.model.voxel;
  c.validate();
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<document>", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ojson to_json(const ExperimentConfig& c) {
  const auto& s = c.scenario;
  const auto& m = c.model;
  return ojson{
      {"scenario",
       {{"layout", to_string(s.layout)},
        {"num_objects", s.num_objects},
        {"frames", s.frames},
        {"frame_rate_hz", s.frame_rate_hz},
        {"min_speed_mps", s.min_speed},
        {"max_speed_mps", s.max_speed},
        {"static_fraction", s.static_fraction},
        {"ego_speed_mps", s.ego_speed},
        {"occluders", s.occluders},
        {"infra_position_m", detail::vec2_json(s.infra_position)},
        {"infra_yaw_rad", s.infra_yaw},
        {"true_miscalibration_m", detail::vec2_json(s.true_miscalibration)},
        {"k_min", s.k_min},
        {"landmark_size_m", s.landmark_size},
        {"azimuth_resolution_deg", s.azimuth_resolution_deg}}},
      {"mode", to_string(c.mode)},
      {"cec",
       {{"enabled", c.cec.enabled},
        {"lr", c.cec.lr},
        {"iters", c.cec.iters},
        {"point_spacing_m", c.cec.point_spacing},
        {"granularity", to_string(c.cec.granularity)},
        {"bound_m", c.cec.bound},
        {"levels", c.cec.levels},
        {"smoothing", c.cec.smoothing}}},
      {"channel",
       {{"latency_ms", c.channel.latency_ms},
        {"jitter_ms", c.channel.jitter_ms},
        {"drop_prob", c.channel.drop_prob},
        {"compression_factor", c.channel.compression_factor}}},
      {"model",
       {{"channels", m.dims.channels},
        {"heads", m.dims.heads},
        {"levels", m.dims.levels},
        {"points", m.dims.points},
        {"n_ref", m.dims.n_ref},
        {"query_cell_m", m.dims.query_cell},
        {"ffn_hidden", m.dims.ffn_hidden},
        {"decoder_layers", m.decoder_layers},
        {"decoder_levels", m.decoder_levels},
        {"n_detect", m.n_detect},
        {"weights", to_string(m.weights)},
        {"voxel_m", m.voxel},
        {"smoothing", m.smoothing},
        {"occupancy_cap", m.routed_encoder.occupancy_cap},
        {"history_gain", m.routed_encoder.history_gain},
        {"score_tau_fraction", m.routed_decoder.score_tau_fraction},
        {"score_gain_per_cap", m.routed_decoder.score_gain_per_cap},
        {"step_gain", m.routed_decoder.step_gain},
        {"probe_cells", m.routed_decoder.probe_cells},
        {"track_max_level", m.routed_decoder.track_max_level}}},
      {"tracker",
       {{"tau_new", c.tracker.tau_new},
        {"tau_keep", c.tracker.tau_keep},
        {"patience", c.tracker.patience},
        {"dedup_radius_m", c.tracker.dedup_radius},
        {"velocity_prediction", c.tracker.velocity_prediction}}},
      {"metrics",
       {{"thresholds_m", c.metrics.thresholds},
        {"recall_levels", c.metrics.recall_levels},
        {"track_threshold_m", c.metrics.track_threshold},
        {"matcher", to_string(c.metrics.criterion)}}},
      {"seeds", {{"scenario", c.seeds.scenario}, {"model", c.seeds.model}, {"channel", c.seeds.channel}}}};
}

// ---------------------------------------------------------------------------
// Per-sensor feature extraction

inline MultiScaleFeatures sensor_features(const PointCloud& cloud, const Roi& roi, const EncoderWeights& w, int levels,
                                          double voxel) {
  const PillarGrid grid = voxelize(cloud, roi, Vec3(voxel, voxel, roi.z_max - roi.z_min));
  return build_pyramid(pillar_encode(grid, w), w, levels);
}

inline EncoderWeights pillar_weights(const ModelConfig& m, std::uint64_t seed) {
  EncoderWeights w = EncoderWeights::seeded(m.dims.channels, m.dims.levels, seed, true, m.smoothing);
  w.smoothing[0] = m.smoothing;
  return w;
}

/// World-frame pose the infrastructure reports: the true pose shifted by the
/// injected translation error (infrastructure frame). Under this pose the
/// BEV->infrastructure transform is the true one minus the error.
inline RigidTransform2D reported_infra_pose(const Scenario& sc) {
  return sc.infra_sensor.pose * RigidTransform2D::from_yaw(0.0, sc.true_miscalibration);
}

inline ProjectionContext projection_context(const Scenario& sc, int frame, const RigidTransform2D& infra_pose) {
  ProjectionContext ctx;
  ctx.bev2veh = sc.vehicle_sensor.pose.inverse();
  ctx.bev2inf = infra_pose.inverse() * sc.ego_trajectory.at(frame);
  ctx.roi_veh = Roi::vehicle_default();
  ctx.roi_inf = Roi::infrastructure_default();
  return ctx;
}

/// Fits the infrastructure offset from one pair of same-instant feature
/// maps, on a smoothed pyramid of the occupancy channel.
inline CecFitResult fit_calibration(const BevFeatureMap& f_veh, const BevFeatureMap& f_inf,
                                    const ProjectionContext& ctx, const CecConfig& cfg) {
  const MultiScaleFeatures ov = cec_pyramid(f_veh, 0, cfg.levels, cfg.smoothing);
  const MultiScaleFeatures oi = cec_pyramid(f_inf, 0, cfg.levels, cfg.smoothing);
  CecProblem pb;
  pb.f_veh = &ov;
  pb.f_inf = &oi;
  pb.ctx = ctx;
  pb.points = overlap_points(ctx, cfg.point_spacing);
  CecOptions opt;
  opt.lr = cfg.lr;
  opt.iters = cfg.iters;
  CalibrationOffsets init;
  init.bound = cfg.bound;
  return cec_fit_detailed(pb, init, opt);
}

/// Static thin posts seen by both sensors, with the infrastructure looking
/// across the ego's view at an angle. Posts give both views sharp, shared
/// structure; an orthogonal pose sees mostly different faces of each object.
inline ScenarioParams calibration_scenario(const Vec2& injected) {
  ScenarioParams p;
  p.layout = Layout::landmarks;
  p.num_objects = 20;
  p.frames = 1;
  p.landmark_size = 0.3;
  p.azimuth_resolution_deg = 0.2;
  p.infra_position = Vec2(-6.0, -12.0);
  p.infra_yaw = 0.35;
  p.true_miscalibration = injected;
  return p;
}

/// Fits d_inf on frame 0 of the configured scenario, both views at the same
/// instant.
inline CecFitResult calibrate_frame0(const ExperimentConfig& cfg) {
  cfg.validate();
  const Scenario sc = generate_scenario(cfg.seeds.scenario, cfg.scenario);
  const EncoderWeights w = pillar_weights(cfg.model, cfg.seeds.model);
  const auto fv = sensor_features(sample_lidar(sc, SensorId::vehicle, 0), Roi::vehicle_default(), w, 1, cfg.model.voxel);
  const auto fi =
      sensor_features(sample_lidar(sc, SensorId::infrastructure, 0), Roi::infrastructure_default(), w, 1, cfg.model.voxel);
  return fit_calibration(fv.levels.front(), fi.levels.front(), projection_context(sc, 0, reported_infra_pose(sc)), cfg.cec);
}

// ---------------------------------------------------------------------------
// Ground truth

struct FrameGroundTruth {
  std::vector<ObjectState> objects;  // ego frame, inside the vehicle ROI
  int vehicle_occluded = 0;          // of those, unseen by the vehicle sensor
};

/// Union of the objects either sensor saw at `frame`, in the ego frame.
inline FrameGroundTruth frame_ground_truth(const Scenario& sc, const PointCloud& cloud_v, const PointCloud& cloud_i,
                                           int frame) {
  const RigidTransform2D world_to_ego = sc.ego_trajectory.at(frame).inverse();
  const auto gt_v = transform_objects(ground_truth_from_cloud(sc, cloud_v, frame), world_to_ego);
  const auto gt_i = transform_objects(ground_truth_from_cloud(sc, cloud_i, frame), world_to_ego);
  FrameGroundTruth out;
  out.objects = fuse_ground_truth(gt_v, gt_i, Roi::vehicle_default());
  std::set<std::int64_t> seen_v;
  for (const auto& o : gt_v) seen_v.insert(o.object_id);
  for (const auto& o : out.objects) out.vehicle_occluded += !seen_v.count(o.object_id);
  return out;
}

/// Ground truth of every frame of the configured scenario, without running
/// the model.
inline std::vector<std::vector<ObjectState>> ground_truth_sequence(const ExperimentConfig& cfg) {
  cfg.validate();
  const Scenario sc = generate_scenario(cfg.seeds.scenario, cfg.scenario);
  std::vector<std::vector<ObjectState>> out;
  for (int t = 0; t < sc.duration_frames; ++t)
    out.push_back(frame_ground_truth(sc, sample_lidar(sc, SensorId::vehicle, t),
                                     sample_lidar(sc, SensorId::infrastructure, t), t)
                      .objects);
  return out;
}

inline ojson object_json(const ObjectState& o) {
  return ojson{{"id", o.object_id},
               {"class", to_string(o.class_label)},
               {"center_m", ojson::array({o.center.x(), o.center.y(), o.center.z()})},
               {"size_lwh_m", ojson::array({o.size.x(), o.size.y(), o.size.z()})},
               {"yaw_rad", o.yaw},
               {"velocity_mps", detail::vec2_json(o.velocity)}};
}

inline ojson pose_json(const RigidTransform2D& p) {
  return ojson{{"x_m", p.translation().x()}, {"y_m", p.translation().y()}, {"yaw_rad", p.yaw()}};
}

/// Generated scene: initial object states (world frame), sensor poses, ego
/// trajectory and per-frame visibility.
inline ojson scenario_json(const Scenario& sc) {
  ojson objects = ojson::array(), ego = ojson::array(), frames = ojson::array();
  for (const auto& o : sc.objects) objects.push_back(object_json(o));
  for (const auto& p : sc.ego_trajectory) ego.push_back(pose_json(p));
  for (int t = 0; t < sc.duration_frames; ++t) {
    const PointCloud cv = sample_lidar(sc, SensorId::vehicle, t), ci = sample_lidar(sc, SensorId::infrastructure, t);
    ojson seen_v = ojson::array(), seen_i = ojson::array();
    for (const auto& o : ground_truth_from_cloud(sc, cv, t)) seen_v.push_back(o.object_id);
    for (const auto& o : ground_truth_from_cloud(sc, ci, t)) seen_i.push_back(o.object_id);
    frames.push_back(ojson{{"frame", t},
                           {"t_s", t * sc.frame_period()},
                           {"vehicle_points", cv.points.size()},
                           {"infrastructure_points", ci.points.size()},
                           {"vehicle_visible_ids", seen_v},
                           {"infrastructure_visible_ids", seen_i}});
  }
  return ojson{{"units", {{"length", "m"}, {"angle", "rad"}, {"speed", "m/s"}, {"time", "s"}}},
               {"seed", sc.seed},
               {"frames", sc.duration_frames},
               {"frame_rate_hz", sc.frame_rate_hz},
               {"k_min", sc.k_min},
               {"true_miscalibration_m", detail::vec2_json(sc.true_miscalibration)},
               {"vehicle_sensor_mount", pose_json(sc.vehicle_sensor.pose)},
               {"infrastructure_pose", pose_json(sc.infra_sensor.pose)},
               {"infrastructure_height_m", sc.infra_sensor.height},
               {"objects", objects},
               {"ego_trajectory", ego},
               {"visibility", frames}};
}

// ---------------------------------------------------------------------------
// Run

struct PayloadLedger {
  int messages = 0;
  double mean_raw_bytes = 0.0;
  double mean_feature_bytes = 0.0;
  double mean_instance_bytes = 0.0;
  double mean_wire_bytes = 0.0;  // serialized feature message after the compression knob
  /// Measured ordering raw > feature > instance for this run.
  bool ordering_raw_feature_instance = false;
};

struct CecSummary {
  bool enabled = false;
  bool fitted = false;
  int fit_frame = -1;
  Vec2 fitted_d_inf = Vec2::Zero();
  Vec2 injected = Vec2::Zero();
  double recovery_error = 0.0;  // max-abs component error, meters
  double final_loss = 0.0;
  std::string failure;
};

struct RunReport {
  ExperimentConfig config;
  MetricsReport metrics;
  PayloadLedger payload;
  CecSummary cec;
  /// Infrastructure frame fused at each vehicle frame (-1: none).
  std::vector<int> consumed_infra_frame;
  std::vector<TrackRecord> tracks;
  std::vector<std::vector<ObjectState>> gt_by_frame;  // ego frame
  /// GT objects (summed over frames) that the vehicle sensor did not see.
  long gt_total = 0;
  long gt_vehicle_occluded = 0;
  std::map<std::string, double> timings_ms;

  double occluded_fraction() const { return gt_total > 0 ? static_cast<double>(gt_vehicle_occluded) / gt_total : 0.0; }
  double recall() const { return metrics.overall.recall(); }
};

/// Executes the per-frame loop. `channel` overrides the link (tests use it
/// to assert that vehicle-only runs never touch it).
inline RunReport run_experiment(const ExperimentConfig& cfg, Channel* channel = nullptr) {
  cfg.validate();
  using Clock = std::chrono::steady_clock;
  RunReport rep;
  rep.config = cfg;
  auto timed = [&](const char* stage, auto&& fn) {
    const auto t0 = Clock::now();
    fn();
    rep.timings_ms[stage] += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  };

  const Scenario sc = generate_scenario(cfg.seeds.scenario, cfg.scenario);
  const ModelConfig& mc = cfg.model;
  const EncoderWeights pw = pillar_weights(mc, cfg.seeds.model);
  const int levels = mc.dims.levels;
  RoutedEncoderOptions reo = mc.routed_encoder;
  reo.base_voxel = mc.voxel;
  RoutedDecoderOptions rdo = mc.routed_decoder;
  rdo.occupancy_cap = reo.occupancy_cap;
  const BevEncoderParams enc =
      mc.weights == WeightsKind::routed ? routed_encoder(mc.dims, reo) : seeded_encoder(mc.dims, cfg.seeds.model);
  DecoderWeights dec = mc.weights == WeightsKind::routed
                           ? routed_decoder(mc.dims.channels, mc.decoder_levels, mc.decoder_layers, mc.n_detect,
                                            enc.roi, mc.dims.query_cell, rdo)
                           : seeded_decoder(mc.dims.channels, mc.dims.heads, mc.decoder_levels, mc.dims.points,
                                            mc.decoder_layers, mc.n_detect, enc.roi, derive_seed(cfg.seeds.model, 0xDE));
  Tracker tracker(std::move(dec), cfg.tracker, mc.n_detect);

  const bool coop = cfg.mode == Mode::cooperative;
  std::unique_ptr<Channel> owned;
  if (channel == nullptr) {
    if (coop)
      owned = std::make_unique<LatencyChannel>(cfg.channel);
    else
      owned = std::make_unique<ForbiddenChannel>();
    channel = owned.get();
  }

  const Micros period = to_micros(sc.frame_period());
  const RigidTransform2D infra_pose = reported_infra_pose(sc);
  const Roi roi_veh = Roi::vehicle_default(), roi_inf = Roi::infrastructure_default();
  rep.cec.enabled = cfg.cec.enabled && coop;
  rep.cec.injected = sc.true_miscalibration;
  CalibrationOffsets offsets;
  offsets.bound = cfg.cec.bound;
  const BevQueryGrid grid_shape = enc.make_grid();
  if (cfg.cec.granularity == OffsetGranularity::per_query_cell) {
    offsets.granularity = OffsetGranularity::per_query_cell;
    offsets.cell_veh.assign(grid_shape.size(), Vec2::Zero());
    offsets.cell_inf.assign(grid_shape.size(), Vec2::Zero());
  }
  std::map<int, BevFeatureMap> veh_history;  // kept until the offset fit has run

  TemporalState temporal;
  double raw_sum = 0, feat_sum = 0, inst_sum = 0, wire_sum = 0;

  for (int t = 0; t < sc.duration_frames; ++t) {
    const Micros now = t * period;
    PointCloud cloud_v, cloud_i;
    MultiScaleFeatures f_v;
    timed("lidar", [&] {
      cloud_v = sample_lidar(sc, SensorId::vehicle, t);
      cloud_i = sample_lidar(sc, SensorId::infrastructure, t);
    });
    timed("pillars", [&] { f_v = sensor_features(cloud_v, roi_veh, pw, levels, mc.voxel); });

    std::optional<MultiScaleFeatures> f_i;
    ProjectionContext ctx = projection_context(sc, t, infra_pose);
    ctx.infrastructure_present = false;
    int consumed = -1;
    if (coop) {
      MultiScaleFeatures sent;
      timed("pillars", [&] { sent = sensor_features(cloud_i, roi_inf, pw, levels, mc.voxel); });
      timed("channel", [&] {
        V2XMessage msg = transmit(sent, now, cfg.channel, derive_seed(cfg.seeds.channel, static_cast<std::uint64_t>(t)));
        msg.frame_index = t;
        msg.reported_pose = infra_pose;
        if (!msg.dropped) {
          raw_sum += static_cast<double>(raw_payload_size(cloud_i.points.size()));
          feat_sum += static_cast<double>(feature_payload_size(sent));
          inst_sum += static_cast<double>(instance_payload_size(ground_truth_from_cloud(sc, cloud_i, t).size()));
          wire_sum += static_cast<double>(msg.size_bytes) / cfg.channel.compression_factor;
          ++rep.payload.messages;
        }
        channel->send(std::move(msg));
        if (auto m = channel->receive(now)) {
          if (m->t_arrive > now) throw std::logic_error("channel delivered a message before its arrival time");
          f_i = deserialize_features(m->payload);
          consumed = m->frame_index;
          ctx = projection_context(sc, t, m->reported_pose);
        }
      });
      if (rep.cec.enabled) {
        veh_history.emplace(t, f_v.levels.front());
        if (!rep.cec.fitted && f_i && rep.cec.failure.empty()) {
          timed("cec", [&] {
            try {
              const CecFitResult fit =
                  fit_calibration(veh_history.at(consumed), f_i->levels.front(), projection_context(sc, consumed, infra_pose), cfg.cec);
              rep.cec.fitted = true;
              rep.cec.fit_frame = consumed;
              rep.cec.fitted_d_inf = fit.offsets.d_inf;
              rep.cec.final_loss = fit.final_loss;
              rep.cec.recovery_error = (fit.offsets.d_inf - sc.true_miscalibration).cwiseAbs().maxCoeff();
              if (offsets.granularity == OffsetGranularity::global)
                offsets.d_inf = fit.offsets.d_inf;
              else
                offsets.cell_inf.assign(offsets.cell_inf.size(), fit.offsets.d_inf);
            } catch (const ConvergenceError& e) {
              rep.cec.failure = e.what();
            }
          });
          veh_history.clear();
        }
        const int max_lag = static_cast<int>(
            std::ceil((cfg.channel.latency_ms + cfg.channel.jitter_ms) * 1e3 / static_cast<double>(period))) + 1;
        while (!veh_history.empty() && veh_history.begin()->first < t - max_lag) veh_history.erase(veh_history.begin());
      }
    }
    rep.consumed_infra_frame.push_back(consumed);

    BevQueryGrid bev;
    const RigidTransform2D curr_to_prev =
        t > 0 ? sc.ego_trajectory[t - 1].inverse() * sc.ego_trajectory[t] : RigidTransform2D::identity();
    timed("encoder", [&] {
      EncoderInputs in;
      in.f_veh = &f_v;
      in.f_inf = f_i ? &*f_i : nullptr;
      in.ctx = ctx;
      in.ctx.infrastructure_present = f_i.has_value();
      in.offsets = offsets;
      in.curr_to_prev = curr_to_prev;
      bev = encode_bev(enc, in, temporal);
    });
    timed("tracker", [&] {
      auto recs = tracker.step(t, bev, curr_to_prev, sc.frame_period());
      rep.tracks.insert(rep.tracks.end(), recs.begin(), recs.end());
    });

    FrameGroundTruth gt = frame_ground_truth(sc, cloud_v, cloud_i, t);
    rep.gt_total += static_cast<long>(gt.objects.size());
    rep.gt_vehicle_occluded += gt.vehicle_occluded;
    rep.gt_by_frame.push_back(std::move(gt.objects));
  }

  if (rep.payload.messages > 0) {
    const double n = rep.payload.messages;
    rep.payload.mean_raw_bytes = raw_sum / n;
    rep.payload.mean_feature_bytes = feat_sum / n;
    rep.payload.mean_instance_bytes = inst_sum / n;
    rep.payload.mean_wire_bytes = wire_sum / n;
    rep.payload.ordering_raw_feature_instance =
        rep.payload.mean_raw_bytes > rep.payload.mean_feature_bytes &&
        rep.payload.mean_feature_bytes > rep.payload.mean_instance_bytes;
  }
  timed("metrics", [&] { rep.metrics = evaluate(make_eval_frames(rep.gt_by_frame, rep.tracks), cfg.metrics); });
  return rep;
}

/// Deterministic report body (no wall-clock timings).
inline ojson to_json(const RunReport& r) {
  ojson consumed = ojson::array();
  for (int f : r.consumed_infra_frame) consumed.push_back(f);
  const auto& p = r.payload;
  return ojson{{"provenance",
                {{"version", kVersion},
                 {"seeds",
                  {{"scenario", r.config.seeds.scenario},
                   {"model", r.config.seeds.model},
                   {"channel", r.config.seeds.channel}}}}},
               {"config", to_json(r.config)},
               {"metrics", to_json(r.metrics)},
               {"ground_truth",
                {{"objects_total", r.gt_total},
                 {"vehicle_occluded", r.gt_vehicle_occluded},
                 {"vehicle_occluded_fraction", r.occluded_fraction()}}},
               {"payload",
                {{"messages", p.messages},
                 {"mean_raw_bytes", p.mean_raw_bytes},
                 {"mean_feature_bytes", p.mean_feature_bytes},
                 {"mean_instance_bytes", p.mean_instance_bytes},
                 {"mean_wire_bytes", p.mean_wire_bytes},
                 {"ordering_raw_gt_feature_gt_instance", p.ordering_raw_feature_instance}}},
               {"cec",
                {{"enabled", r.cec.enabled},
                 {"fitted", r.cec.fitted},
                 {"fit_frame", r.cec.fit_frame},
                 {"fitted_d_inf_m", detail::vec2_json(r.cec.fitted_d_inf)},
                 {"injected_m", detail::vec2_json(r.cec.injected)},
                 {"recovery_error_m", r.cec.recovery_error},
                 {"final_loss", r.cec.final_loss},
                 {"failure", r.cec.failure}}},
               {"consumed_infra_frame", consumed},
               {"tracks_emitted", r.tracks.size()}};
}

inline ojson timings_json(const RunReport& r) {
  ojson j = ojson::object();
  for (const auto& [k, v] : r.timings_ms) j[k + "_ms"] = v;
  return j;
}

// ---------------------------------------------------------------------------
// Experiment grids

struct SweepCell {
  double latency_ms = 0.0;
  std::optional<RunReport> report;
  std::string error;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  /// AMOTA does not rise by more than `tolerance` from one latency to the next.
  bool amota_non_increasing = false;
};

inline SweepResult sweep_latency(const ExperimentConfig& cfg, const std::vector<double>& latencies,
                                 double tolerance = 0.02) {
  if (latencies.empty()) throw ConfigError("latencies", "need at least one latency");
  SweepResult out;
  for (double l : latencies) {
    SweepCell cell;
    cell.latency_ms = l;
    try {
      ExperimentConfig c = cfg;
      c.channel.latency_ms = l;
      cell.report = run_experiment(c);
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    out.cells.push_back(std::move(cell));
  }
  out.amota_non_increasing = true;
  for (std::size_t i = 1; i < out.cells.size(); ++i) {
    const auto &a = out.cells[i - 1].report, &b = out.cells[i].report;
    if (!a || !b || b->metrics.tracking.amota > a->metrics.tracking.amota + tolerance) out.amota_non_increasing = false;
  }
  return out;
}

inline ojson to_json(const SweepResult& s) {
  ojson rows = ojson::array();
  for (const auto& c : s.cells) {
    ojson row{{"latency_ms", c.latency_ms}};
    if (c.report) {
      row["mAP"] = c.report->metrics.map;
      row["AMOTA"] = c.report->metrics.tracking.amota;
      row["AMOTP_m"] = c.report->metrics.tracking.amotp;
      row["recall"] = c.report->recall();
      row["report"] = to_json(*c.report);
    } else {
      row["error"] = c.error;
    }
    rows.push_back(row);
  }
  return ojson{{"sweep", rows}, {"amota_non_increasing", s.amota_non_increasing}};
}

struct CecAblation {
  RunReport with_cec;
  RunReport without_cec;
};

/// Two cooperative runs that differ only in cec.enabled, with `injected`
/// as the infrastructure miscalibration.
inline CecAblation ablate_cec(const ExperimentConfig& cfg, const Vec2& injected) {
  if (!all_finite(injected) || injected.cwiseAbs().maxCoeff() > cfg.cec.bound)
    throw ConfigError("injected_error_m", "must be finite and within cec.bound_m");
  ExperimentConfig c = cfg;
  c.mode = Mode::cooperative;
  c.scenario.true_miscalibration = injected;
  c.cec.enabled = true;
  CecAblation a{run_experiment(c), {}};
  c.cec.enabled = false;
  a.without_cec = run_experiment(c);
  return a;
}

inline ojson to_json(const CecAblation& a) {
  auto row = [](const RunReport& r) {
    return ojson{{"mAP", r.metrics.map}, {"AMOTA", r.metrics.tracking.amota}, {"AMOTP_m", r.metrics.tracking.amotp},
                 {"recall", r.recall()}, {"report", to_json(r)}};
  };
  return ojson{{"cec_on", row(a.with_cec)},
               {"cec_off", row(a.without_cec)},
               {"fitted_d_inf_m", detail::vec2_json(a.with_cec.cec.fitted_d_inf)},
               {"injected_m", detail::vec2_json(a.with_cec.cec.injected)},
               {"recovery_error_m", a.with_cec.cec.recovery_error}};
}

}  // namespace coopbev
