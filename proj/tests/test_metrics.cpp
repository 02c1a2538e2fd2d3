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

#include "coopbev/metrics.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>
#include <numeric>

namespace coopbev {
namespace {

using namespace oracle;

// ---------------------------------------------------------------------------
// Ground truth fusion

TEST(FuseGroundTruth, UnionByIdVehicleRecordWins) {
  auto a = gt(1, 1.0, 0.0);
  auto b = gt(1, 9.0, 9.0);
  const auto out = fuse_ground_truth({a, gt(3, 2.0, 2.0)}, {b, gt(2, -4.0, 1.0)}, Roi{});
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].object_id, 1);
  EXPECT_EQ(out[0].center_xy(), Vec2(1.0, 0.0));
  EXPECT_EQ(out[1].object_id, 2);
  EXPECT_EQ(out[2].object_id, 3);
}

TEST(FuseGroundTruth, Idempotent) {
  const std::vector<ObjectState> v = {gt(4, 0, 0), gt(7, 5, 5)};
  const auto once = fuse_ground_truth(v, v, Roi{});
  const auto twice = fuse_ground_truth(once, once, Roi{});
  ASSERT_EQ(once.size(), twice.size());
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(once[i].object_id, twice[i].object_id);
}

TEST(FuseGroundTruth, RoiFilterIsClosed) {
  const Roi roi{-10, 10, -10, 10, -5, 3};
  const auto out = fuse_ground_truth({gt(1, 10.0, 0.0), gt(2, 10.01, 0.0)}, {gt(3, 0.0, -11.0)}, roi);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].object_id, 1);
}

TEST(FuseGroundTruth, ClassConflictThrows) {
  EXPECT_THROW(fuse_ground_truth({gt(1, 0, 0, ObjectClass::car)}, {gt(1, 0, 0, ObjectClass::truck)}, Roi{}),
               std::invalid_argument);
}

TEST(TransformObjects, MovesCentersAndRotatesHeading) {
  auto o = gt(1, 1.0, 0.0);
  o.velocity = Vec2(1.0, 0.0);
  const auto out = transform_objects({o}, RigidTransform2D::from_yaw(std::numbers::pi / 2, Vec2(0.0, 2.0)));
  EXPECT_NEAR(out[0].center.x(), 0.0, 1e-12);
  EXPECT_NEAR(out[0].center.y(), 3.0, 1e-12);
  EXPECT_NEAR(out[0].yaw, std::numbers::pi / 2, 1e-12);
  EXPECT_NEAR(out[0].velocity.y(), 1.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Matching

TEST(MatchFrame, PerfectFrame) {
  IdHistory h;
  const auto m = match_frame(frame(0, {gt(1, 0, 0), gt(2, 10, 0)}, {pred(5, 0, 0), pred(6, 10, 0)}), 2.0, h);
  EXPECT_EQ(m.pairs.size(), 2u);
  EXPECT_EQ(m.fp, 0);
  EXPECT_EQ(m.fn, 0);
  EXPECT_EQ(m.ids, 0);
  EXPECT_EQ(h.at(1), 5);
  EXPECT_EQ(h.at(2), 6);
}

TEST(MatchFrame, OutOfGateIsMissAndFalsePositive) {
  IdHistory h;
  const auto m = match_frame(frame(0, {gt(1, 0, 0), gt(2, 10, 0)}, {pred(5, 0.5, 0), pred(6, 13, 0)}), 2.0, h);
  EXPECT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.fn, 1);
  EXPECT_EQ(m.fp, 1);
}

TEST(MatchFrame, AgreesWithBruteForceAssignment) {
  const std::vector<ObjectState> g = {gt(1, 0, 0), gt(2, 10, 0), gt(3, 20, 0)};
  const std::vector<Prediction> p = {pred(7, 19, 0.2), pred(8, 0.3, 0), pred(9, 10.5, 0)};
  std::vector<int> perm = {0, 1, 2}, best;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (int i = 0; i < 3; ++i) c += (g[i].center_xy() - p[perm[i]].box.center).norm();
    if (c < best_cost) best_cost = c, best = perm;
  } while (std::next_permutation(perm.begin(), perm.end()));

  IdHistory h;
  const auto m = match_frame(frame(0, g, p), 2.0, h);
  ASSERT_EQ(m.pairs.size(), 3u);
  double total = 0;
  for (const auto& pr : m.pairs) {
    EXPECT_EQ(static_cast<int>(pr.pred_index), best[pr.gt_index]);
    total += pr.distance;
  }
  EXPECT_NEAR(total, best_cost, 1e-12);
}

TEST(MatchFrame, ScoreCutDropsPredictions) {
  IdHistory h;
  const auto m = match_frame(frame(0, {gt(1, 0, 0)}, {pred(5, 0, 0, 0.3), pred(6, 20, 0, 0.8)}), 2.0, h, 0.5);
  EXPECT_EQ(m.n_pred, 1);
  EXPECT_EQ(m.fp, 1);
  EXPECT_EQ(m.fn, 1);
}

TEST(MatchFrame, CountsConserveOnRandomFrames) {
  Rng rng(3);
  IdHistory h;
  for (int t = 0; t < 200; ++t) {
    std::vector<ObjectState> g;
    std::vector<Prediction> p;
    for (int i = rng.uniform_int(0, 6); i > 0; --i) g.push_back(gt(i, rng.uniform(0, 20), rng.uniform(0, 20)));
    for (int i = rng.uniform_int(0, 6); i > 0; --i)
      p.push_back(pred(rng.uniform_int(0, 4), rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform()));
    const auto m = match_frame(frame(t, g, p), 3.0, h, 0.2);
    const int matched = static_cast<int>(m.pairs.size());
    EXPECT_EQ(m.fn + matched, m.n_gt);
    EXPECT_EQ(m.fp + matched, m.n_pred);
    EXPECT_LE(m.ids, matched);
    for (const auto& pr : m.pairs) EXPECT_LE(pr.distance, 3.0);
  }
}

// ---------------------------------------------------------------------------
// AP and mAP

TEST(AveragePrecision, PerfectIsOne) {
  const std::vector<EvalFrame> f = {frame(0, {gt(1, 0, 0), gt(2, 10, 0)}, {pred(1, 0, 0), pred(2, 10, 0)})};
  EXPECT_DOUBLE_EQ(average_precision(f, ObjectClass::car, 1.0), 1.0);
}

TEST(AveragePrecision, NoPredictionsIsZero) {
  const std::vector<EvalFrame> f = {frame(0, {gt(1, 0, 0)}, {})};
  EXPECT_EQ(average_precision(f, ObjectClass::car, 1.0), 0.0);
}

TEST(AveragePrecision, HandCase) {
  // Ranked: hit, miss, hit over two gt. Precision 1 up to recall 0.5 (51
  // recall points), then 2/3 for the remaining 50: (51 + 100/3) / 101.
  const std::vector<EvalFrame> f = {
      frame(0, {gt(1, 0, 0), gt(2, 10, 0)}, {pred(1, 0, 0, 0.9), pred(2, 30, 0, 0.8), pred(3, 10, 0, 0.7)})};
  EXPECT_NEAR(average_precision(f, ObjectClass::car, 1.0), 253.0 / 303.0, 1e-15);
}

TEST(AveragePrecision, OtherClassesIgnored) {
  const std::vector<EvalFrame> f = {
      frame(0, {gt(1, 0, 0), gt(2, 10, 0, ObjectClass::truck)},
            {pred(1, 0, 0, 0.5), pred(2, 10, 0, 0.9, ObjectClass::pedestrian)})};
  EXPECT_DOUBLE_EQ(average_precision(f, ObjectClass::car, 1.0), 1.0);
  EXPECT_EQ(average_precision(f, ObjectClass::truck, 1.0), 0.0);
}

TEST(AveragePrecision, LoweringATruePositiveNeverHelps) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<EvalFrame> f;
    for (int t = 0; t < 3; ++t) {
      std::vector<ObjectState> g;
      std::vector<Prediction> p;
      for (int i = 0; i < 4; ++i) {
        g.push_back(gt(i, 10.0 * i, 0.0));
        if (rng.uniform() < 0.7) p.push_back(pred(i, 10.0 * i + rng.uniform(-0.4, 0.4), 0.0, rng.uniform(0.1, 1.0)));
        if (rng.uniform() < 0.4) p.push_back(pred(9, 10.0 * i + 5.0, 0.0, rng.uniform(0.1, 1.0)));
      }
      f.push_back(frame(t, g, p));
    }
    const double before = average_precision(f, ObjectClass::car, 1.0);
    for (auto& fr : f)
      for (auto& p : fr.predictions)
        if (p.track_id != 9) p.box.score *= 0.05;
    EXPECT_LE(average_precision(f, ObjectClass::car, 1.0), before + 1e-12);
  }
}

TEST(MeanAveragePrecision, AveragesClassesWithGroundTruth) {
  const std::vector<EvalFrame> f = {
      frame(0, {gt(1, 0, 0), gt(2, 10, 0, ObjectClass::truck)}, {pred(1, 0, 0)})};
  const auto t = mean_average_precision(f, {ObjectClass::car, ObjectClass::truck, ObjectClass::cyclist}, {1.0});
  EXPECT_DOUBLE_EQ(t.mean, 0.5);
  EXPECT_EQ(t.ap.size(), 2u);
  EXPECT_EQ(t.ap.count(ObjectClass::cyclist), 0u);
}

TEST(MeanAveragePrecision, ThresholdGrid) {
  // Best-scored prediction is 1.5 m off, the second 0.7 m off.
  // 0.5 m: nothing matches. 1 m: FP then TP, precision 0.5 at full recall.
  // 2 m and 4 m: the first prediction matches.
  const std::vector<EvalFrame> f = {frame(0, {gt(1, 0, 0)}, {pred(1, 1.5, 0, 0.9), pred(2, 0.7, 0, 0.8)})};
  const auto t = mean_average_precision(f, {ObjectClass::car}, {0.5, 1.0, 2.0, 4.0});
  const auto& row = t.ap.at(ObjectClass::car);
  EXPECT_EQ(row[0], 0.0);
  EXPECT_DOUBLE_EQ(row[1], 0.5);
  EXPECT_DOUBLE_EQ(row[2], 1.0);
  EXPECT_DOUBLE_EQ(row[3], 1.0);
  EXPECT_DOUBLE_EQ(t.mean, 0.625);
}

TEST(MeanAveragePrecision, NoGroundTruthThrows) {
  const std::vector<EvalFrame> f = {frame(0, {}, {pred(1, 0, 0)})};
  EXPECT_THROW(mean_average_precision(f, {ObjectClass::car}, {1.0}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// CLEAR MOT

TEST(Mota, HandCase) {
  const auto f = mota_hand_case();
  const auto c = clear_counts(f, 0.0, 2.0);
  EXPECT_EQ(c.gt, 10);
  EXPECT_EQ(c.ids, 1);
  EXPECT_EQ(c.fn, 2);
  EXPECT_EQ(c.fp, 1);
  EXPECT_DOUBLE_EQ(mota(f, 0.0, 2.0), 0.6);
}

TEST(Mota, PerfectIsOne) {
  const std::vector<EvalFrame> f = {frame(0, {gt(1, 0, 0)}, {pred(1, 0, 0)}),
                                    frame(1, {gt(1, 1, 0)}, {pred(1, 1, 0)})};
  EXPECT_EQ(mota(f, 0.0, 2.0), 1.0);
}

TEST(Mota, AllFalsePositivesGoNegative) {
  const std::vector<EvalFrame> f = {
      frame(0, {gt(1, 0, 0)}, {pred(1, 40, 0), pred(2, 50, 0), pred(3, 60, 0)}),
      frame(1, {gt(1, 0, 0)}, {pred(1, 40, 0), pred(2, 50, 0), pred(3, 60, 0)})};
  EXPECT_DOUBLE_EQ(mota(f, 0.0, 2.0), -3.0);
}

TEST(Mota, NoGroundTruthThrows) {
  const std::vector<EvalFrame> f = {frame(0, {}, {pred(1, 0, 0)})};
  EXPECT_THROW(mota(f, 0.0, 2.0), std::invalid_argument);
}

TEST(Motp, HandCase) {
  const std::vector<EvalFrame> f = {frame(0, {gt(1, 0, 0), gt(2, 10, 0)}, {pred(1, 0.5, 0), pred(2, 10, 1.5)}),
                                    frame(1, {gt(1, 0, 0), gt(2, 10, 0)}, {pred(1, 0, 0.25), pred(9, 40, 0)})};
  EXPECT_DOUBLE_EQ(motp(f, 0.0, 2.0), (0.5 + 1.5 + 0.25) / 3.0);
}

// ---------------------------------------------------------------------------
// AMOTA / AMOTP

TEST(Amota, PerfectSingleLevel) {
  const std::vector<EvalFrame> f = {frame(0, {gt(1, 0, 0)}, {pred(1, 0, 0)})};
  const auto s = amota_amotp(f, 1, 2.0);
  EXPECT_EQ(s.amota, 1.0);
  EXPECT_EQ(s.amotp, 0.0);
}

TEST(Amota, UnreachableLevelCountsZero) {
  // Recall tops out at 0.5 with MOTA 0.5 there; the level at recall 1 adds 0.
  const std::vector<EvalFrame> f = {frame(0, {gt(1, 0, 0), gt(2, 10, 0)}, {pred(1, 0.5, 0)})};
  const auto s = amota_amotp(f, 2, 2.0);
  ASSERT_EQ(s.levels.size(), 2u);
  EXPECT_TRUE(s.levels[0].reachable);
  EXPECT_FALSE(s.levels[1].reachable);
  EXPECT_DOUBLE_EQ(s.amota, 0.25);
  EXPECT_DOUBLE_EQ(s.amotp, 0.5);
}

TEST(Amota, NothingReachableFallsBackToThreshold) {
  const std::vector<EvalFrame> f = {frame(0, {gt(1, 0, 0)}, {pred(1, 30, 0)})};
  const auto s = amota_amotp(f, 4, 2.0);
  EXPECT_EQ(s.amota, 0.0);
  EXPECT_EQ(s.amotp, 2.0);
}

TEST(Amota, NegativeMotaFloorsAtZero) {
  const std::vector<EvalFrame> f = {frame(0, {gt(1, 0, 0)}, {pred(1, 0, 0), pred(2, 30, 0), pred(3, 40, 0)})};
  const auto s = amota_amotp(f, 1, 2.0);
  EXPECT_DOUBLE_EQ(s.levels[0].mota, -1.0);
  EXPECT_EQ(s.amota, 0.0);
}

TEST(Amota, MatchesExhaustiveScoreCutOracle) {
  Rng rng(2024);
  for (int scene = 0; scene < 60; ++scene) {
    const auto frames = random_track_scene(rng);
    const auto s = amota_amotp(frames, 4, 2.0);
    const auto [a, p] = oracle_amota(frames, 4, 2.0);
    EXPECT_NEAR(s.amota, a, 1e-9) << "scene " << scene;
    EXPECT_NEAR(s.amotp, p, 1e-9) << "scene " << scene;
  }
}

TEST(Amotp, HalvingErrorsHalvesIt) {
  std::vector<EvalFrame> f, g;
  Rng rng(5);
  for (int t = 0; t < 4; ++t) {
    std::vector<Prediction> a, b;
    std::vector<ObjectState> o;
    for (int i = 0; i < 3; ++i) {
      const Vec2 e(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6));
      o.push_back(gt(i, 10.0 * i, 0));
      a.push_back(pred(i, 10.0 * i + e.x(), e.y(), 0.1 * (i + 1)));
      b.push_back(pred(i, 10.0 * i + 0.5 * e.x(), 0.5 * e.y(), 0.1 * (i + 1)));
    }
    f.push_back(frame(t, o, a));
    g.push_back(frame(t, o, b));
  }
  const double full = amota_amotp(f, 3, 2.0).amotp;
  const double half = amota_amotp(g, 3, 2.0).amotp;
  EXPECT_GT(full, 0.0);
  EXPECT_NEAR(half, 0.5 * full, 1e-12);
}

// ---------------------------------------------------------------------------
// Reporting

TEST(Evaluate, DeterministicAndConsistent) {
  const auto f = mota_hand_case();
  MetricsConfig cfg;
  const auto a = evaluate(f, cfg);
  const auto b = evaluate(f, cfg);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(a.overall.ids, 1);
  ASSERT_EQ(a.frames.size(), 5u);
  long fp = 0;
  for (const auto& r : a.frames) fp += r.fp;
  EXPECT_EQ(fp, a.overall.fp);
}

TEST(Evaluate, NoGroundTruthLeavesZeros) {
  const auto r = evaluate({frame(0, {}, {pred(1, 0, 0)})}, MetricsConfig{});
  EXPECT_EQ(r.map, 0.0);
  EXPECT_EQ(r.overall.fp, 1);
}

TEST(MetricsConfig, RejectsBadValues) {
  MetricsConfig c;
  c.thresholds = {};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.recall_levels = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.criterion = MatchCriterion::bev_iou;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BevIou, SelfAndDisjoint) {
  EXPECT_NEAR(bev_iou(Vec2(0, 0), 4, 2, 0.3, Vec2(0, 0), 4, 2, 0.3), 1.0, 1e-12);
  EXPECT_EQ(bev_iou(Vec2(0, 0), 4, 2, 0.0, Vec2(10, 0), 4, 2, 0.0), 0.0);
  // Half-overlap along the length axis.
  EXPECT_NEAR(bev_iou(Vec2(0, 0), 4, 2, 0.0, Vec2(2, 0), 4, 2, 0.0), 1.0 / 3.0, 1e-12);
}

TEST(TracksCsv, RoundTrip) {
  std::vector<TrackRecord> recs(2);
  recs[0].frame = 0;
  recs[0].track_id = 3;
  recs[0].box.center = Vec2(1.5, -2.25);
  recs[0].box.size = Vec3(4.5, 1.875, 1.5);
  recs[0].box.yaw = 0.125;
  recs[0].box.score = 0.5;
  recs[1] = recs[0];
  recs[1].frame = 4;
  recs[1].track_id = 12;
  recs[1].box.class_label = ObjectClass::cyclist;
  const std::string text = tracks_csv(recs);
  const auto back = parse_tracks_csv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(tracks_csv(back), text);
  EXPECT_EQ(back[1].box.class_label, ObjectClass::cyclist);
  EXPECT_EQ(back[0].box.center, recs[0].box.center);
}

TEST(TracksCsv, RejectsMalformed) {
  EXPECT_THROW(parse_tracks_csv("frame,id\n"), std::runtime_error);
  EXPECT_THROW(parse_tracks_csv(std::string(kTrackCsvHeader) + "\n0,1,car,1,2\n"), std::runtime_error);
  EXPECT_THROW(parse_tracks_csv(std::string(kTrackCsvHeader) + "\n0,1,car,x,2,1,1,1,0,0.5\n"), std::runtime_error);
}

TEST(MakeEvalFrames, GroupsByFrameAndDropsOutOfRange) {
  std::vector<TrackRecord> recs(3);
  recs[0].frame = 1;
  recs[1].frame = 1;
  recs[2].frame = 7;
  const auto f = make_eval_frames({{gt(1, 0, 0)}, {}}, recs);
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0].predictions.size(), 0u);
  EXPECT_EQ(f[1].predictions.size(), 2u);
  EXPECT_EQ(f[1].t, 1);
}

}  // namespace
}  // namespace coopbev
