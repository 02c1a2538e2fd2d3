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

#include "coopbev/scenario.hpp"
#include "coopbev/tracker.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace coopbev {

// ---------------------------------------------------------------------------
// Ground truth

/// Re-expresses world-frame objects in the frame given by `world_to_frame`.
inline std::vector<ObjectState> transform_objects(const std::vector<ObjectState>& objects,
                                                  const RigidTransform2D& world_to_frame) {
  std::vector<ObjectState> out = objects;
  const double dyaw = world_to_frame.yaw();
  for (auto& o : out) {
    o.center.head<2>() = world_to_frame.apply(o.center_xy());
    o.yaw = wrap_angle(o.yaw + dyaw);
    o.velocity = world_to_frame.rotation() * o.velocity;
  }
  return out;
}

/// Union by object id (the vehicle-side record wins), then keep centers
/// inside `roi`. Output is sorted by object id.
inline std::vector<ObjectState> fuse_ground_truth(const std::vector<ObjectState>& gt_v,
                                                  const std::vector<ObjectState>& gt_i, const Roi& roi) {
  std::map<std::int64_t, ObjectState> by_id;
  for (const auto& o : gt_v) by_id.emplace(o.object_id, o);
  for (const auto& o : gt_i) {
    auto [it, inserted] = by_id.emplace(o.object_id, o);
    if (!inserted && it->second.class_label != o.class_label)
      throw std::invalid_argument("fuse_ground_truth: object " + std::to_string(o.object_id) +
                                  " has conflicting classes across sensors");
  }
  std::vector<ObjectState> out;
  for (const auto& [id, o] : by_id)
    if (roi.contains_xy(o.center_xy())) out.push_back(o);
  return out;
}

// ---------------------------------------------------------------------------
// Matching

struct Prediction {
  Detection box;
  std::int64_t track_id = 0;
};

struct EvalFrame {
  int t = 0;
  std::vector<ObjectState> gt;
  std::vector<Prediction> predictions;
};

enum class MatchCriterion { center_distance, bev_iou };

inline std::string to_string(MatchCriterion m) { return m == MatchCriterion::center_distance ? "center_distance" : "bev_iou"; }

inline MatchCriterion match_criterion_from_string(const std::string& s) {
  if (s == "center_distance") return MatchCriterion::center_distance;
  if (s == "bev_iou") return MatchCriterion::bev_iou;
  throw ConfigError("metrics.matcher", "must be center_distance or bev_iou");
}

namespace detail {

inline std::vector<Vec2> box_polygon(const Vec2& c, double length, double width, double yaw) {
  const double cs = std::cos(yaw), sn = std::sin(yaw);
  const Vec2 ax(cs, sn), ay(-sn, cs);
  const double hl = 0.5 * length, hw = 0.5 * width;
  return {c + hl * ax + hw * ay, c - hl * ax + hw * ay, c - hl * ax - hw * ay, c + hl * ax - hw * ay};
}

inline double cross(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline double polygon_area(const std::vector<Vec2>& p) {
  double a = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) a += cross(p[i], p[(i + 1) % p.size()]);
  return 0.5 * std::abs(a);
}

/// Sutherland-Hodgman clip of `subject` by the convex CCW polygon `clip`.
inline std::vector<Vec2> clip_convex(std::vector<Vec2> subject, const std::vector<Vec2>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2 a = clip[e], b = clip[(e + 1) % clip.size()];
    auto side = [&](const Vec2& p) { return cross(b - a, p - a); };
    std::vector<Vec2> out;
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2 p = subject[i], q = subject[(i + 1) % subject.size()];
      const double sp = side(p), sq = side(q);
      if (sp >= 0) out.push_back(p);
      if ((sp >= 0) != (sq >= 0)) out.push_back(p + (q - p) * (sp / (sp - sq)));
    }
    subject = std::move(out);
  }
  return subject;
}

}  // namespace detail

/// Intersection over union of two rotated BEV rectangles.
inline double bev_iou(const Vec2& ca, double la, double wa, double yaw_a, const Vec2& cb, double lb, double wb,
                      double yaw_b) {
  const auto pa = detail::box_polygon(ca, la, wa, yaw_a);
  const auto pb = detail::box_polygon(cb, lb, wb, yaw_b);
  const double inter = detail::polygon_area(detail::clip_convex(pa, pb));
  const double uni = la * wa + lb * wb - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double bev_iou(const ObjectState& g, const Detection& d) {
  return bev_iou(g.center_xy(), g.size.x(), g.size.y(), g.yaw, d.center, d.size.x(), d.size.y(), d.yaw);
}

/// Matching cost and acceptance. For center distance the threshold is in
/// meters; for BEV IoU it is the minimum IoU and the cost is 1 - IoU.
inline double match_cost(const ObjectState& g, const Detection& d, MatchCriterion m) {
  if (m == MatchCriterion::center_distance) return (g.center_xy() - d.center).norm();
  return 1.0 - bev_iou(g, d);
}

inline double max_cost(double threshold, MatchCriterion m) {
  return m == MatchCriterion::center_distance ? threshold : 1.0 - threshold;
}

struct MatchPair {
  std::int64_t gt_id = 0;
  std::int64_t track_id = 0;
  double distance = 0.0;  // center distance, meters
  std::size_t gt_index = 0;
  std::size_t pred_index = 0;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  int fp = 0;
  int fn = 0;
  int ids = 0;
  int n_gt = 0;
  int n_pred = 0;  // predictions at or above the score cut
};

/// Last matched track id per gt id.
using IdHistory = std::map<std::int64_t, std::int64_t>;

/// Greedy one-to-one matching in ascending cost (ties by gt, then
/// prediction index). Predictions scoring below `min_score` are ignored.
/// `history` is read for identity switches and updated with this frame's
/// pairs.
inline MatchResult match_frame(const EvalFrame& frame, double threshold, IdHistory& history,
                               double min_score = -std::numeric_limits<double>::infinity(),
                               MatchCriterion criterion = MatchCriterion::center_distance) {
  if (!(threshold > 0)) throw ConfigError("metrics.threshold", "must be > 0");
  struct Cand {
    double cost;
    std::size_t g, p;
  };
  const double limit = max_cost(threshold, criterion);
  std::vector<std::size_t> active;
  for (std::size_t p = 0; p < frame.predictions.size(); ++p)
    if (frame.predictions[p].box.score >= min_score) active.push_back(p);
  std::vector<Cand> cands;
  for (std::size_t g = 0; g < frame.gt.size(); ++g)
    for (std::size_t p : active) {
      const double c = match_cost(frame.gt[g], frame.predictions[p].box, criterion);
      if (c <= limit) cands.push_back({c, g, p});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    if (a.g != b.g) return a.g < b.g;
    return a.p < b.p;
  });
  MatchResult r;
  r.n_gt = static_cast<int>(frame.gt.size());
  r.n_pred = static_cast<int>(active.size());
  std::vector<bool> gt_used(frame.gt.size(), false), pred_used(frame.predictions.size(), false);
  for (const auto& c : cands) {
    if (gt_used[c.g] || pred_used[c.p]) continue;
    gt_used[c.g] = pred_used[c.p] = true;
    const auto& g = frame.gt[c.g];
    const auto& pr = frame.predictions[c.p];
    r.pairs.push_back({g.object_id, pr.track_id, (g.center_xy() - pr.box.center).norm(), c.g, c.p});
  }
  for (const auto& pair : r.pairs) {
    auto it = history.find(pair.gt_id);
    if (it != history.end() && it->second != pair.track_id) ++r.ids;
    history[pair.gt_id] = pair.track_id;
  }
  r.fn = r.n_gt - static_cast<int>(r.pairs.size());
  r.fp = r.n_pred - static_cast<int>(r.pairs.size());
  return r;
}

// ---------------------------------------------------------------------------
// Detection: AP and mAP

/// Area under the 101-point interpolated precision/recall curve. Matching
/// follows descending score: each prediction takes the lowest-cost unmatched
/// gt of its class in its frame.
inline double average_precision(const std::vector<EvalFrame>& frames, ObjectClass cls, double threshold,
                                MatchCriterion criterion = MatchCriterion::center_distance) {
  struct Item {
    double score;
    std::size_t f, p;
  };
  std::vector<Item> items;
  std::size_t n_gt = 0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    for (const auto& g : frames[f].gt) n_gt += g.class_label == cls;
    for (std::size_t p = 0; p < frames[f].predictions.size(); ++p)
      if (frames[f].predictions[p].box.class_label == cls) items.push_back({frames[f].predictions[p].box.score, f, p});
  }
  if (n_gt == 0 || items.empty()) return 0.0;
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });

  const double limit = max_cost(threshold, criterion);
  std::vector<std::vector<bool>> taken(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) taken[f].assign(frames[f].gt.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto& fr = frames[items[k].f];
    const Detection& d = fr.predictions[items[k].p].box;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < fr.gt.size(); ++g) {
      if (taken[items[k].f][g] || fr.gt[g].class_label != cls) continue;
      const double c = match_cost(fr.gt[g], d, criterion);
      if (c <= limit && c < best) {
        best = c;
        best_g = g;
      }
    }
    if (std::isfinite(best)) {
      taken[items[k].f][best_g] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  double ap = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    double p = 0.0;
    for (std::size_t k = 0; k < precision.size(); ++k)
      if (recall[k] >= r) p = std::max(p, precision[k]);
    ap += p;
  }
  return ap / 101.0;
}

struct ApTable {
  /// ap[class][threshold index]; classes without gt are absent.
  std::map<ObjectClass, std::vector<double>> ap;
  std::vector<double> thresholds;
  double mean = 0.0;
};

/// Mean AP over the class x threshold grid; classes with no gt are skipped.
inline ApTable mean_average_precision(const std::vector<EvalFrame>& frames, const std::vector<ObjectClass>& classes,
                                      const std::vector<double>& thresholds,
                                      MatchCriterion criterion = MatchCriterion::center_distance) {
  if (classes.empty()) throw ConfigError("metrics.classes", "need at least one class");
  if (thresholds.empty()) throw ConfigError("metrics.thresholds_m", "need at least one threshold");
  ApTable t;
  t.thresholds = thresholds;
  double sum = 0.0;
  int n = 0;
  for (ObjectClass c : classes) {
    bool any = false;
    for (const auto& f : frames)
      for (const auto& g : f.gt) any = any || g.class_label == c;
    if (!any) continue;
    auto& row = t.ap[c];
    for (double th : thresholds) {
      row.push_back(average_precision(frames, c, th, criterion));
      sum += row.back();
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("mean_average_precision: no ground truth for any requested class");
  t.mean = sum / n;
  return t;
}

// ---------------------------------------------------------------------------
// Tracking: MOTA / MOTP and their recall-averaged forms

struct ClearCounts {
  long gt = 0, fp = 0, fn = 0, ids = 0, matches = 0;
  double dist_sum = 0.0;

  double mota() const { return 1.0 - static_cast<double>(fp + fn + ids) / static_cast<double>(gt); }
  double motp() const { return matches > 0 ? dist_sum / static_cast<double>(matches) : 0.0; }
  double recall() const { return gt > 0 ? static_cast<double>(matches) / static_cast<double>(gt) : 0.0; }
};

struct FrameCounters {
  int frame = 0;
  int gt = 0, predictions = 0, matches = 0, fp = 0, fn = 0, ids = 0;
  double dist_sum = 0.0;
};

/// Sequential CLEAR accounting at one score cut, with a fresh id history.
inline ClearCounts clear_counts(const std::vector<EvalFrame>& frames, double score_cut, double threshold,
                                MatchCriterion criterion = MatchCriterion::center_distance,
                                std::vector<FrameCounters>* per_frame = nullptr) {
  ClearCounts c;
  IdHistory hist;
  for (const auto& f : frames) {
    const MatchResult m = match_frame(f, threshold, hist, score_cut, criterion);
    c.gt += m.n_gt;
    c.fp += m.fp;
    c.fn += m.fn;
    c.ids += m.ids;
    c.matches += static_cast<long>(m.pairs.size());
    double d = 0.0;
    for (const auto& p : m.pairs) d += p.distance;
    c.dist_sum += d;
    if (per_frame)
      per_frame->push_back({f.t, m.n_gt, m.n_pred, static_cast<int>(m.pairs.size()), m.fp, m.fn, m.ids, d});
  }
  return c;
}

/// 1 - (FP + FN + IDS) / GT over all frames; may be negative.
inline double mota(const std::vector<EvalFrame>& frames, double score_cut, double threshold,
                   MatchCriterion criterion = MatchCriterion::center_distance) {
  const ClearCounts c = clear_counts(frames, score_cut, threshold, criterion);
  if (c.gt == 0) throw std::invalid_argument("mota: no ground truth");
  return c.mota();
}

/// Sum of matched distances over the number of matches.
inline double motp(const std::vector<EvalFrame>& frames, double score_cut, double threshold,
                   MatchCriterion criterion = MatchCriterion::center_distance) {
  return clear_counts(frames, score_cut, threshold, criterion).motp();
}

struct RecallLevel {
  double target = 0.0;
  bool reachable = false;
  double score_cut = 0.0;
  double recall = 0.0;
  double mota = 0.0;  // raw, not floored
  double motp = 0.0;
};

struct TrackingSummary {
  double amota = 0.0;
  double amotp = 0.0;
  std::vector<RecallLevel> levels;
};

/// For r = 1..R, the highest score cut whose recall reaches r/R. AMOTA
/// averages max(0, MOTA_r) over all R levels (unreachable ones count 0);
/// AMOTP averages MOTP_r over reachable levels only and falls back to the
/// distance threshold when none is reachable.
inline TrackingSummary amota_amotp(const std::vector<EvalFrame>& frames, int R, double threshold,
                                   MatchCriterion criterion = MatchCriterion::center_distance) {
  if (R < 1) throw ConfigError("metrics.recall_levels", "must be >= 1");
  std::set<double, std::greater<>> cut_set;
  long total_gt = 0;
  for (const auto& f : frames) {
    total_gt += static_cast<long>(f.gt.size());
    for (const auto& p : f.predictions) cut_set.insert(p.box.score);
  }
  if (total_gt == 0) throw std::invalid_argument("amota: no ground truth");
  std::vector<double> cuts(cut_set.begin(), cut_set.end());
  std::vector<ClearCounts> at(cuts.size());
  parallel_for(cuts.size(), [&](std::size_t i) { at[i] = clear_counts(frames, cuts[i], threshold, criterion); });

  TrackingSummary s;
  double motp_sum = 0.0;
  int reachable = 0;
  for (int r = 1; r <= R; ++r) {
    RecallLevel lv;
    lv.target = static_cast<double>(r) / R;
    for (std::size_t i = 0; i < cuts.size(); ++i) {
      // Integer comparison avoids rounding at exact recall levels.
      if (at[i].matches * R >= static_cast<long>(r) * total_gt) {
        lv.reachable = true;
        lv.score_cut = cuts[i];
        lv.recall = at[i].recall();
        lv.mota = at[i].mota();
        lv.motp = at[i].motp();
        break;
      }
    }
    if (lv.reachable) {
      s.amota += std::max(0.0, lv.mota);
      motp_sum += lv.motp;
      ++reachable;
    }
    s.levels.push_back(lv);
  }
  s.amota /= R;
  s.amotp = reachable > 0 ? motp_sum / reachable
                          : (criterion == MatchCriterion::center_distance ? threshold : 0.0);
  return s;
}

// ---------------------------------------------------------------------------
// Report

struct MetricsConfig {
  std::vector<double> thresholds = {0.5, 1.0, 2.0, 4.0};
  int recall_levels = 40;
  double track_threshold = 2.0;
  MatchCriterion criterion = MatchCriterion::center_distance;

  void validate() const {
    if (thresholds.empty()) throw ConfigError("metrics.thresholds_m", "need at least one threshold");
    for (double t : thresholds) {
      if (!(t > 0)) throw ConfigError("metrics.thresholds_m", "thresholds must be > 0");
      if (criterion == MatchCriterion::bev_iou && t > 1) throw ConfigError("metrics.thresholds_m", "IoU thresholds must be <= 1");
    }
    if (recall_levels < 1) throw ConfigError("metrics.recall_levels", "must be >= 1");
    if (!(track_threshold > 0)) throw ConfigError("metrics.track_threshold_m", "must be > 0");
    if (criterion == MatchCriterion::bev_iou && track_threshold > 1)
      throw ConfigError("metrics.track_threshold_m", "IoU threshold must be <= 1");
  }
};

struct MetricsReport {
  double map = 0.0;
  ApTable ap;
  TrackingSummary tracking;
  /// CLEAR counts with every prediction kept.
  ClearCounts overall;
  std::vector<FrameCounters> frames;
};

inline MetricsReport evaluate(const std::vector<EvalFrame>& frames, const MetricsConfig& cfg) {
  cfg.validate();
  MetricsReport r;
  std::vector<ObjectClass> classes;
  for (int c = 0; c < kNumClasses; ++c) classes.push_back(static_cast<ObjectClass>(c));
  bool any_gt = false;
  for (const auto& f : frames) any_gt = any_gt || !f.gt.empty();
  if (any_gt) {
    r.ap = mean_average_precision(frames, classes, cfg.thresholds, cfg.criterion);
    r.map = r.ap.mean;
    r.tracking = amota_amotp(frames, cfg.recall_levels, cfg.track_threshold, cfg.criterion);
  } else {
    r.ap.thresholds = cfg.thresholds;
  }
  r.overall = clear_counts(frames, -std::numeric_limits<double>::infinity(), cfg.track_threshold, cfg.criterion,
                           &r.frames);
  return r;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  using J = nlohmann::ordered_json;
  J ap = J::object();
  for (const auto& [cls, row] : r.ap.ap) {
    J cells = J::object();
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::ostringstream k;
      k << r.ap.thresholds[i];
      cells[k.str()] = row[i];
    }
    ap[to_string(cls)] = cells;
  }
  J levels = J::array();
  for (const auto& lv : r.tracking.levels)
    levels.push_back(J{{"recall_target", lv.target},
                       {"reachable", lv.reachable},
                       {"score_cut", lv.score_cut},
                       {"recall", lv.recall},
                       {"mota", lv.mota},
                       {"motp_m", lv.motp}});
  const auto& o = r.overall;
  return J{{"mAP", r.map},
           {"AMOTA", r.tracking.amota},
           {"AMOTP_m", r.tracking.amotp},
           {"ap_table", ap},
           {"overall",
            J{{"gt", o.gt},
              {"matches", o.matches},
              {"fp", o.fp},
              {"fn", o.fn},
              {"ids", o.ids},
              {"recall", o.recall()},
              {"mota", o.gt > 0 ? o.mota() : 0.0},
              {"motp_m", o.motp()}}},
           {"recall_levels", levels}};
}

namespace detail {
inline std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}
}  // namespace detail

inline std::string frame_counters_csv(const std::vector<FrameCounters>& rows) {
  std::string s = "frame,gt,predictions,matches,fp,fn,ids,dist_sum_m\n";
  for (const auto& r : rows)
    s += std::to_string(r.frame) + "," + std::to_string(r.gt) + "," + std::to_string(r.predictions) + "," +
         std::to_string(r.matches) + "," + std::to_string(r.fp) + "," + std::to_string(r.fn) + "," +
         std::to_string(r.ids) + "," + detail::fmt(r.dist_sum) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Track output file

inline constexpr const char* kTrackCsvHeader = "frame,track_id,class,x_m,y_m,l_m,w_m,h_m,yaw_rad,score";

inline std::string tracks_csv(const std::vector<TrackRecord>& recs) {
  std::string s = std::string(kTrackCsvHeader) + "\n";
  for (const auto& r : recs) {
    const auto& b = r.box;
    s += std::to_string(r.frame) + "," + std::to_string(r.track_id) + "," + to_string(b.class_label) + "," +
         detail::fmt(b.center.x()) + "," + detail::fmt(b.center.y()) + "," + detail::fmt(b.size.x()) + "," +
         detail::fmt(b.size.y()) + "," + detail::fmt(b.size.z()) + "," + detail::fmt(b.yaw) + "," +
         detail::fmt(b.score, 9) + "\n";
  }
  return s;
}

inline std::vector<TrackRecord> parse_tracks_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kTrackCsvHeader) throw std::runtime_error("tracks csv: bad header");
  std::vector<TrackRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw std::runtime_error("tracks csv: line " + std::to_string(lineno) + " needs 10 fields");
    try {
      TrackRecord r;
      r.frame = std::stoi(f[0]);
      r.track_id = std::stoll(f[1]);
      r.box.class_label = object_class_from_string(f[2]);
      r.box.center = Vec2(std::stod(f[3]), std::stod(f[4]));
      r.box.size = Vec3(std::stod(f[5]), std::stod(f[6]), std::stod(f[7]));
      r.box.yaw = std::stod(f[8]);
      r.box.score = std::stod(f[9]);
      r.box.source = DetectionSource::tracked;
      out.push_back(r);
    } catch (const std::logic_error&) {
      throw std::runtime_error("tracks csv: line " + std::to_string(lineno) + " is malformed");
    }
  }
  return out;
}

/// Groups track records into per-frame predictions for `gt_by_frame`.
inline std::vector<EvalFrame> make_eval_frames(const std::vector<std::vector<ObjectState>>& gt_by_frame,
                                               const std::vector<TrackRecord>& recs) {
  std::vector<EvalFrame> frames(gt_by_frame.size());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    frames[t].t = static_cast<int>(t);
    frames[t].gt = gt_by_frame[t];
  }
  for (const auto& r : recs)
    if (r.frame >= 0 && r.frame < static_cast<int>(frames.size())) frames[r.frame].predictions.push_back({r.box, r.track_id});
  return frames;
}

}  // namespace coopbev
