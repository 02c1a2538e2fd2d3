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

#include "coopbev/fusion.hpp"
#include "coopbev/scenario.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace coopbev {

enum class DetectionSource { fresh, tracked };

inline std::string to_string(DetectionSource s) { return s == DetectionSource::fresh ? "new" : "tracked"; }

struct Detection {
  Vec2 center = Vec2::Zero();  // ego frame, meters
  Vec3 size = Vec3(4.5, 1.9, 1.6);
  double yaw = 0.0;
  ObjectClass class_label = ObjectClass::car;
  double score = 0.0;
  DetectionSource source = DetectionSource::fresh;
};

struct TrackQuery {
  std::int64_t track_id = 0;
  VecX embedding;
  /// Reference point (ego frame, meters) the decoder starts from.
  Vec2 reference = Vec2::Zero();
  int age = 0;
  int miss_count = 0;
  Detection last_box;
  Vec2 velocity = Vec2::Zero();  // ego frame of last_box, m/s
  bool hit = false;              // kept by the latest lifecycle update
};

inline constexpr int kNumClasses = 4;
/// Box head rows: center delta (2), log size (3), sin/cos yaw (2), score logit.
inline constexpr int kBoxHeadRows = 8;

struct DecoderWeights {
  std::vector<DeformAttnParams> layers;
  /// Per-layer residual gate: q <- gate .* q + attn(q).
  std::vector<VecX> gates;
  /// Reference refinement: ref <- ref + ref_head * q + ref_bias (meters).
  MatX ref_head;
  Vec2 ref_bias = Vec2::Zero();
  MatX box_head;  // kBoxHeadRows x C
  VecX box_bias;
  MatX class_head;  // kNumClasses x C
  VecX class_bias;
  /// Learned constant detect queries and their initial references (meters).
  MatX detect_embeddings;  // N x C
  std::vector<Vec2> detect_refs;
  /// Added once to a decoded detect query when it becomes a track query.
  VecX track_bias;

  int depth() const { return static_cast<int>(layers.size()); }
  int channels() const { return layers.empty() ? 0 : layers.front().channels; }
  int capacity() const { return static_cast<int>(detect_refs.size()); }
  int levels() const { return layers.empty() ? 0 : layers.front().levels; }

  void validate() const {
    require_dims(!layers.empty(), "DecoderWeights: depth must be >= 1");
    const int c = channels();
    for (const auto& l : layers) {
      l.validate();
      require_dims(l.channels == c && l.levels == levels(), "DecoderWeights: layers disagree on channels/levels");
    }
    require_dims(gates.size() == layers.size(), "DecoderWeights: one gate per layer");
    for (const auto& g : gates) require_dims(g.size() == c, "DecoderWeights: gate size != channels");
    require_dims(ref_head.rows() == 2 && ref_head.cols() == c, "DecoderWeights: ref_head must be 2 x C");
    require_dims(box_head.rows() == kBoxHeadRows && box_head.cols() == c && box_bias.size() == kBoxHeadRows,
                 "DecoderWeights: box head shape");
    require_dims(class_head.rows() == kNumClasses && class_head.cols() == c && class_bias.size() == kNumClasses,
                 "DecoderWeights: class head shape");
    require_dims(detect_embeddings.rows() == capacity() && detect_embeddings.cols() == c,
                 "DecoderWeights: detect embeddings shape");
    require_dims(track_bias.size() == c, "DecoderWeights: track_bias size != channels");
  }

  static DecoderWeights zeros(int channels, int heads, int levels, int points, int depth, int n_queries) {
    if (depth < 1) throw ConfigError("model.decoder_layers", "must be >= 1");
    if (n_queries < 0) throw ConfigError("model.n_detect", "must be >= 0");
    DecoderWeights w;
    for (int d = 0; d < depth; ++d) {
      w.layers.push_back(DeformAttnParams::zeros(channels, heads, levels, points));
      w.gates.push_back(VecX::Ones(channels));
    }
    w.ref_head = MatX::Zero(2, channels);
    w.box_head = MatX::Zero(kBoxHeadRows, channels);
    w.box_bias = VecX::Zero(kBoxHeadRows);
    w.class_head = MatX::Zero(kNumClasses, channels);
    w.class_bias = VecX::Zero(kNumClasses);
    w.detect_embeddings = MatX::Zero(n_queries, channels);
    w.detect_refs.assign(n_queries, Vec2::Zero());
    w.track_bias = VecX::Zero(channels);
    return w;
  }
};

/// Anchors on a ceil(sqrt(n))^2 lattice over the ROI, first n in row-major order.
inline std::vector<Vec2> anchor_grid(const Roi& roi, int n) {
  std::vector<Vec2> out;
  if (n <= 0) return out;
  const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const double sx = roi.width() / g, sy = roi.height() / g;
  for (int iy = 0; iy < g && static_cast<int>(out.size()) < n; ++iy)
    for (int ix = 0; ix < g && static_cast<int>(out.size()) < n; ++ix)
      out.emplace_back(roi.x_min + (ix + 0.5) * sx, roi.y_min + (iy + 0.5) * sy);
  return out;
}

inline DecoderWeights seeded_decoder(int channels, int heads, int levels, int points, int depth, int n_queries,
                                     const Roi& roi, std::uint64_t seed) {
  DecoderWeights w = DecoderWeights::zeros(channels, heads, levels, points, depth, n_queries);
  for (int d = 0; d < depth; ++d)
    w.layers[d] = DeformAttnParams::seeded(channels, heads, levels, points, derive_seed(seed, 0xD0 + d));
  Rng rng(derive_seed(seed, 0xDF));
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  auto fill = [&](MatX& m, double scale) { m = m.unaryExpr([&](double) { return rng.normal() * scale; }); };
  fill(w.ref_head, 0.1 * s);
  fill(w.box_head, 0.1 * s);
  fill(w.class_head, s);
  fill(w.detect_embeddings, 1.0);
  w.box_bias.segment(2, 3) = Vec3(4.5, 1.9, 1.6).array().log().matrix();
  w.detect_refs = anchor_grid(roi, n_queries);
  return w;
}

/// Hand-set decoder that performs density-seeking on BEV channel 0.
///
/// Embedding layout: 0 local density, 1-2 reference step, 3 track flag. Each layer has
/// eight single-channel heads: heads 0-3 sample channel 0 one pyramid cell
/// to the +x, -x, +y and -y side of the reference and their difference
/// (scaled by `step_gain`) moves the reference; heads 4-7 sample a small
/// square around the reference and their mean becomes the density. Layer d
/// reads pyramid level max(L-1-d, 0). The score is
/// sigmoid(gain * (density - tau)) on the last layer's density.
///
/// Track queries carry the flag set by `track_bias`; it cancels the probe
/// offsets on layers coarser than `track_max_level`, so an object that is
/// already localized is only refined locally instead of being pulled toward
/// the centroid of a coarse blob.
struct RoutedDecoderOptions {
  double occupancy_cap = 0.02;
  double score_tau_fraction = 0.3;
  double score_gain_per_cap = 12.0;
  double step_gain = 0.5;  // max step as a fraction of the probe distance
  /// Distance of the step probes, in pyramid cells of the layer's level.
  double probe_cells = 1.5;
  int track_max_level = 0;
};

inline DecoderWeights routed_decoder(int channels, int levels, int depth, int n_queries, const Roi& roi,
                                     double bev_cell, const RoutedDecoderOptions& o = {}) {
  if (channels < 8 || channels % 8 != 0) throw ConfigError("model.channels", "routed decoder needs C divisible by 8");
  constexpr int kHeads = 8;
  DecoderWeights w = DecoderWeights::zeros(channels, kHeads, levels, 1, depth, n_queries);
  static const std::array<Vec2, kHeads> kProbe = {Vec2(1, 0),       Vec2(-1, 0),       Vec2(0, 1),        Vec2(0, -1),
                                                  Vec2(0.25, 0.25), Vec2(-0.25, 0.25), Vec2(0.25, -0.25), Vec2(-0.25, -0.25)};
  for (int d = 0; d < depth; ++d) {
    auto& p = w.layers[d];
    const int lvl = std::max(levels - 1 - d, 0);
    const double probe = o.probe_cells * bev_cell * (1 << lvl);
    const double kappa = o.step_gain * probe / o.occupancy_cap;
    for (int m = 0; m < kHeads; ++m) {
      p.value_proj[m](0, 0) = 1.0;
      if (m < 4) {
        if (kProbe[m].x() != 0) p.output_proj[m](1, 0) = kappa * kProbe[m].x();
        if (kProbe[m].y() != 0) p.output_proj[m](2, 0) = kappa * kProbe[m].y();
      } else {
        p.output_proj[m](0, 0) = 0.25;
      }
      for (int l = 0; l < levels; ++l) {
        const int j = p.sample_index(m, l, 0);
        p.attn_bias(j) = l == lvl ? 0.0 : -60.0;
        const Vec2 off = m < 4 ? Vec2(o.probe_cells * kProbe[m]) : kProbe[m];
        p.offset_bias(2 * j) = off.x();
        p.offset_bias(2 * j + 1) = off.y();
        if (m < 4 && lvl > o.track_max_level) {
          p.offset_weight(2 * j, 3) = -off.x();
          p.offset_weight(2 * j + 1, 3) = -off.y();
        }
      }
    }
    w.gates[d](0) = 0.0;
    w.gates[d](1) = 0.0;
    w.gates[d](2) = 0.0;
  }
  w.ref_head(0, 1) = 1.0;
  w.ref_head(1, 2) = 1.0;
  const double gain = o.score_gain_per_cap / o.occupancy_cap;
  w.box_head(7, 0) = gain;
  w.box_bias(7) = -gain * o.score_tau_fraction * o.occupancy_cap;
  w.box_bias.segment(2, 3) = Vec3(4.5, 1.9, 1.6).array().log().matrix();
  w.box_bias(6) = 1.0;  // cos yaw
  w.class_bias(static_cast<int>(ObjectClass::car)) = 1.0;
  w.detect_refs = anchor_grid(roi, n_queries);
  w.track_bias(3) = 1.0;
  return w;
}

/// Average-pool pyramid of the BEV grid for the decoder.
inline MultiScaleFeatures bev_pyramid(const BevQueryGrid& bev, int levels) {
  require_dims(levels >= 1, "bev_pyramid: levels must be >= 1");
  const int div = 1 << (levels - 1);
  require_dims(bev.width() % div == 0 && bev.height() % div == 0,
               "bev_pyramid: BEV dims must be divisible by 2^(levels-1)");
  MultiScaleFeatures f;
  f.levels.push_back(bev.map);
  for (int l = 1; l < levels; ++l) f.levels.push_back(average_pool2(f.levels.back()));
  return f;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Detection box_from_embedding(const DecoderWeights& w, const VecX& q, const Vec2& ref, DetectionSource src) {
  const VecX b = w.box_head * q + w.box_bias;
  const VecX cls = w.class_head * q + w.class_bias;
  Detection d;
  d.center = ref + b.head<2>();
  d.size = Vec3(std::exp(b(2)), std::exp(b(3)), std::exp(b(4)));
  d.yaw = std::atan2(b(5), b(6));
  d.score = sigmoid(b(7));
  Eigen::Index best = 0;
  cls.maxCoeff(&best);
  d.class_label = static_cast<ObjectClass>(best);
  d.source = src;
  return d;
}

struct DecodeResult {
  std::vector<Detection> detections;  // n_detect fresh, then one per live query
  std::vector<TrackQuery> updated;
  std::vector<VecX> fresh_embeddings;  // decoded detect queries
};

/// Runs the decoder over n_detect fresh queries followed by the live track
/// queries. Track-query embeddings are replaced by their decoded values and
/// their references by the refined ones.
inline DecodeResult decode_frame(const BevQueryGrid& bev, const std::vector<TrackQuery>& live,
                                 const DecoderWeights& weights, int n_detect) {
  if (n_detect < 0) throw ConfigError("model.n_detect", "must be >= 0");
  weights.validate();
  require_dims(n_detect <= weights.capacity(), "decode_frame: n_detect exceeds the learned detect queries");
  require_dims(bev.channels() == weights.channels(), "decode_frame: BEV channels != decoder channels");
  for (const auto& t : live) require_dims(t.embedding.size() == weights.channels(), "decode_frame: track embedding size");

  const MultiScaleFeatures pyr = bev_pyramid(bev, weights.levels());
  std::vector<ProjectedValues> values;
  for (const auto& layer : weights.layers) values.push_back(project_values(pyr, layer));

  const std::size_t n = static_cast<std::size_t>(n_detect) + live.size();
  std::vector<VecX> q(n);
  std::vector<Vec2> ref(n);
  for (int i = 0; i < n_detect; ++i) {
    q[i] = weights.detect_embeddings.row(i).transpose();
    ref[i] = weights.detect_refs[i];
  }
  for (std::size_t j = 0; j < live.size(); ++j) {
    q[n_detect + j] = live[j].embedding;
    ref[n_detect + j] = live[j].reference;
  }
  parallel_for(n, [&](std::size_t i) {
    for (int d = 0; d < weights.depth(); ++d) {
      const Vec2 u = normalize_point(ref[i], bev.roi).coord;
      const VecX a = ms_deform_attn_projected(q[i], u, values[d], weights.layers[d]);
      q[i] = weights.gates[d].cwiseProduct(q[i]) + a;
      ref[i] += weights.ref_head * q[i] + weights.ref_bias;
    }
  });

  DecodeResult out;
  out.detections.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.detections.push_back(box_from_embedding(
        weights, q[i], ref[i], i < static_cast<std::size_t>(n_detect) ? DetectionSource::fresh : DetectionSource::tracked));
  out.fresh_embeddings.assign(q.begin(), q.begin() + n_detect);
  out.updated = live;
  for (std::size_t j = 0; j < live.size(); ++j) {
    out.updated[j].embedding = q[n_detect + j];
    out.updated[j].reference = ref[n_detect + j];
  }
  return out;
}

struct LifecycleConfig {
  double tau_new = 0.4;
  double tau_keep = 0.3;
  int patience = 2;
  /// A fresh detection within this distance of a live track, or of a
  /// higher-scoring fresh detection, does not spawn. Two kept tracks closer
  /// than this are merged into the older one.
  double dedup_radius = 4.5;
  /// Predict track references with a constant-velocity model. Off: the
  /// previous box (ego-compensated) is the starting reference.
  bool velocity_prediction = true;

  void validate() const {
    if (!(tau_new >= 0 && tau_new <= 1)) throw ConfigError("tracker.tau_new", "must be in [0,1]");
    if (!(tau_keep >= 0 && tau_keep <= 1)) throw ConfigError("tracker.tau_keep", "must be in [0,1]");
    if (patience < 0) throw ConfigError("tracker.patience", "must be >= 0");
    if (!(dedup_radius >= 0)) throw ConfigError("tracker.dedup_radius_m", "must be >= 0");
  }
};

struct LifecycleResult {
  std::vector<TrackQuery> live;
  /// Indices (into detections) of fresh queries that spawned, in spawn order.
  std::vector<std::size_t> spawned;
  std::vector<std::int64_t> terminated;
};

/// Applies keep/miss/spawn rules. `detections` holds n_detect fresh entries
/// followed by one entry per `updated` query. Fresh ids come from
/// `next_track_id`, which only ever increases.
inline LifecycleResult update_lifecycle(const std::vector<Detection>& detections, std::vector<TrackQuery> updated,
                                        const LifecycleConfig& cfg, std::int64_t& next_track_id) {
  cfg.validate();
  require_dims(detections.size() >= updated.size(), "update_lifecycle: fewer detections than track queries");
  const std::size_t n_detect = detections.size() - updated.size();
  LifecycleResult res;

  for (std::size_t j = 0; j < updated.size(); ++j) {
    auto& t = updated[j];
    const Detection& d = detections[n_detect + j];
    if (d.score >= cfg.tau_keep) {
      t.miss_count = 0;
      t.hit = true;
      t.last_box = d;
    } else {
      ++t.miss_count;
      t.hit = false;
      t.last_box.center = t.reference;
      t.last_box.score = d.score;
    }
    ++t.age;
  }

  // Merge kept tracks that collapsed onto the same object; the older wins.
  std::vector<bool> removed(updated.size(), false);
  for (std::size_t a = 0; a < updated.size(); ++a)
    for (std::size_t b = a + 1; b < updated.size(); ++b) {
      if (removed[a] || removed[b] || !updated[a].hit || !updated[b].hit) continue;
      if ((updated[a].last_box.center - updated[b].last_box.center).norm() >= cfg.dedup_radius) continue;
      const bool a_older = updated[a].age > updated[b].age ||
                           (updated[a].age == updated[b].age && updated[a].track_id < updated[b].track_id);
      removed[a_older ? b : a] = true;
    }
  for (std::size_t j = 0; j < updated.size(); ++j) {
    if (removed[j] || updated[j].miss_count > cfg.patience) {
      res.terminated.push_back(updated[j].track_id);
      continue;
    }
    res.live.push_back(std::move(updated[j]));
  }

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n_detect; ++i)
    if (detections[i].score >= cfg.tau_new) order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
  for (std::size_t i : order) {
    const Vec2& c = detections[i].center;
    bool blocked = false;
    for (const auto& t : res.live)
      if ((t.last_box.center - c).norm() < cfg.dedup_radius) {
        blocked = true;
        break;
      }
    if (blocked) continue;
    TrackQuery t;
    t.track_id = next_track_id++;
    t.age = 1;
    t.hit = true;
    t.last_box = detections[i];
    t.last_box.source = DetectionSource::fresh;
    t.reference = c;
    res.live.push_back(std::move(t));
    res.spawned.push_back(i);
  }
  return res;
}

struct TrackRecord {
  int frame = 0;
  std::int64_t track_id = 0;
  Detection box;
};

/// Sequential tracking-by-attention over frames: propagates live queries
/// with constant velocity and ego motion, decodes, then applies the
/// lifecycle. Emits one record per kept or spawned track.
class Tracker {
 public:
  Tracker(DecoderWeights weights, LifecycleConfig cfg, int n_detect)
      : weights_(std::move(weights)), cfg_(cfg), n_detect_(n_detect) {
    weights_.validate();
    cfg_.validate();
    if (n_detect_ < 0 || n_detect_ > weights_.capacity())
      throw ConfigError("model.n_detect", "must be in [0, number of learned detect queries]");
  }

  /// `curr_to_prev` maps current ego coordinates into the previous frame.
  std::vector<TrackRecord> step(int frame, const BevQueryGrid& bev, const RigidTransform2D& curr_to_prev, double dt) {
    const RigidTransform2D prev_to_curr = curr_to_prev.inverse();
    std::vector<Vec2> anchor(live_.size());
    for (std::size_t j = 0; j < live_.size(); ++j) {
      auto& t = live_[j];
      anchor[j] = prev_to_curr.apply(t.last_box.center);
      t.velocity = prev_to_curr.rotation() * t.velocity;
      t.last_box.center = anchor[j];
      t.last_box.yaw = wrap_angle(t.last_box.yaw + prev_to_curr.yaw());
      t.reference = cfg_.velocity_prediction ? Vec2(anchor[j] + t.velocity * dt) : anchor[j];
    }
    std::vector<std::int64_t> ids;
    for (const auto& t : live_) ids.push_back(t.track_id);

    DecodeResult dec = decode_frame(bev, live_, weights_, n_detect_);
    LifecycleResult lc = update_lifecycle(dec.detections, std::move(dec.updated), cfg_, next_id_);

    // Spawned tracks are appended last, in spawn order.
    for (std::size_t k = 0; k < lc.spawned.size(); ++k)
      lc.live[lc.live.size() - lc.spawned.size() + k].embedding =
          dec.fresh_embeddings[lc.spawned[k]] + weights_.track_bias;
    std::vector<TrackRecord> out;
    for (auto& t : lc.live) {
      const auto it = std::find(ids.begin(), ids.end(), t.track_id);
      if (it != ids.end() && t.hit) {
        const Vec2 meas = (t.last_box.center - anchor[it - ids.begin()]) / dt;
        t.velocity = t.age <= 2 ? meas : 0.5 * meas + 0.5 * t.velocity;
      }
      if (t.hit) out.push_back({frame, t.track_id, t.last_box});
    }
    live_ = std::move(lc.live);
    std::sort(out.begin(), out.end(), [](const TrackRecord& a, const TrackRecord& b) { return a.track_id < b.track_id; });
    return out;
  }

  const std::vector<TrackQuery>& live() const { return live_; }
  std::int64_t next_track_id() const { return next_id_; }

 private:
  DecoderWeights weights_;
  LifecycleConfig cfg_;
  int n_detect_;
  std::vector<TrackQuery> live_;
  std::int64_t next_id_ = 1;
};

}  // namespace coopbev
