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

#include "coopbev/harness.hpp"

#include <gtest/gtest.h>

namespace coopbev {
namespace {

// Short runs keep the suite quick; the full-length runs live in the
// acceptance binary.
ExperimentConfig small_config(std::uint64_t seed = 3) {
  ExperimentConfig c;
  c.scenario.frames = 5;
  c.scenario.num_objects = 4;
  c.seeds.scenario = seed;
  return c;
}

std::string metrics_text(const RunReport& r) { return to_json(r.metrics).dump(); }

TEST(RunExperiment, Deterministic) {
  const auto cfg = small_config();
  const RunReport a = run_experiment(cfg), b = run_experiment(cfg);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(tracks_csv(a.tracks), tracks_csv(b.tracks));
}

TEST(RunExperiment, ShapesFollowScenario) {
  const RunReport r = run_experiment(small_config());
  EXPECT_EQ(r.consumed_infra_frame.size(), 5u);
  EXPECT_EQ(r.gt_by_frame.size(), 5u);
  long total = 0;
  for (const auto& f : r.gt_by_frame) total += static_cast<long>(f.size());
  EXPECT_EQ(total, r.gt_total);
  EXPECT_LE(r.gt_vehicle_occluded, r.gt_total);
  for (const auto& t : r.tracks) EXPECT_TRUE(t.frame >= 0 && t.frame < 5);
}

TEST(RunExperiment, VehicleOnlyNeverTouchesTheChannel) {
  auto cfg = small_config();
  cfg.mode = Mode::vehicle_only;
  ForbiddenChannel forbidden;
  RunReport r;
  EXPECT_NO_THROW(r = run_experiment(cfg, &forbidden));
  for (int f : r.consumed_infra_frame) EXPECT_EQ(f, -1);
  EXPECT_EQ(r.payload.messages, 0);

  cfg.mode = Mode::cooperative;
  EXPECT_THROW(run_experiment(cfg, &forbidden), ChannelAccessError);
}

TEST(RunExperiment, UnreachableInfrastructureMatchesVehicleOnly) {
  // An infrastructure sensor far outside the vehicle ROI contributes no
  // valid samples, so the masked fusion collapses to the vehicle branch.
  auto cfg = small_config();
  cfg.scenario.infra_position = Vec2(900.0, 900.0);
  const RunReport coop = run_experiment(cfg);
  cfg.mode = Mode::vehicle_only;
  const RunReport veh = run_experiment(cfg);
  EXPECT_GT(coop.payload.messages, 0);
  EXPECT_EQ(tracks_csv(coop.tracks), tracks_csv(veh.tracks));
  EXPECT_EQ(metrics_text(coop), metrics_text(veh));
}

TEST(RunExperiment, LatencyLagsInfrastructureFrames) {
  auto cfg = small_config();
  cfg.channel.latency_ms = 200;
  const RunReport r = run_experiment(cfg);
  for (int t = 0; t < 5; ++t) EXPECT_EQ(r.consumed_infra_frame[t], t >= 2 ? t - 2 : -1) << "t=" << t;
}

TEST(RunExperiment, PayloadOrdering) {
  const RunReport r = run_experiment(small_config());
  EXPECT_EQ(r.payload.messages, 5);
  EXPECT_GT(r.payload.mean_feature_bytes, 0);
  EXPECT_EQ(r.payload.ordering_raw_feature_instance,
            r.payload.mean_raw_bytes > r.payload.mean_feature_bytes &&
                r.payload.mean_feature_bytes > r.payload.mean_instance_bytes);
}

TEST(RunExperiment, GroundTruthSequenceAgreesWithRun) {
  const auto cfg = small_config();
  const RunReport r = run_experiment(cfg);
  const auto gt = ground_truth_sequence(cfg);
  ASSERT_EQ(gt.size(), r.gt_by_frame.size());
  for (std::size_t t = 0; t < gt.size(); ++t) {
    ASSERT_EQ(gt[t].size(), r.gt_by_frame[t].size());
    for (std::size_t i = 0; i < gt[t].size(); ++i) EXPECT_EQ(gt[t][i].object_id, r.gt_by_frame[t][i].object_id);
  }
}

TEST(RunExperiment, TracksCsvReevaluatesToSameMetrics) {
  const auto cfg = small_config();
  const RunReport r = run_experiment(cfg);
  // The CSV keeps six decimals, so distances can move in the last digits.
  const auto m = evaluate(make_eval_frames(r.gt_by_frame, parse_tracks_csv(tracks_csv(r.tracks))), cfg.metrics);
  EXPECT_NEAR(m.map, r.metrics.map, 1e-6);
  EXPECT_NEAR(m.tracking.amota, r.metrics.tracking.amota, 1e-6);
  EXPECT_EQ(m.overall.ids, r.metrics.overall.ids);
}

TEST(SweepLatency, FirstCellEqualsPlainRun) {
  auto cfg = small_config();
  cfg.scenario.frames = 3;
  const SweepResult s = sweep_latency(cfg, {0.0, 100.0});
  ASSERT_EQ(s.cells.size(), 2u);
  ASSERT_TRUE(s.cells[0].report.has_value());
  EXPECT_EQ(to_json(*s.cells[0].report).dump(), to_json(run_experiment(cfg)).dump());
  EXPECT_EQ(s.cells[1].report->consumed_infra_frame, (std::vector<int>{-1, 0, 1}));
}

TEST(SweepLatency, BadLatencyIsReportedPerCell) {
  auto cfg = small_config();
  cfg.scenario.frames = 2;
  const SweepResult s = sweep_latency(cfg, {0.0, -50.0});
  EXPECT_TRUE(s.cells[0].report.has_value());
  EXPECT_FALSE(s.cells[1].report.has_value());
  EXPECT_FALSE(s.cells[1].error.empty());
  EXPECT_FALSE(s.amota_non_increasing);
  EXPECT_THROW(sweep_latency(cfg, {}), ConfigError);
}

TEST(AblateCec, PairsDifferOnlyInCompensation) {
  auto cfg = small_config();
  cfg.scenario.frames = 3;
  const CecAblation a = ablate_cec(cfg, Vec2(0.5, -0.25));
  EXPECT_TRUE(a.with_cec.cec.enabled);
  EXPECT_FALSE(a.without_cec.cec.enabled);
  EXPECT_EQ(a.with_cec.cec.injected, Vec2(0.5, -0.25));
  EXPECT_EQ(a.with_cec.gt_total, a.without_cec.gt_total);
  EXPECT_TRUE(a.with_cec.cec.fitted || !a.with_cec.cec.failure.empty());
}

TEST(AblateCec, RejectsErrorsBeyondTheBound) {
  const auto cfg = small_config();
  EXPECT_THROW(ablate_cec(cfg, Vec2(6.0, 0.0)), ConfigError);
  EXPECT_THROW(ablate_cec(cfg, Vec2(std::nan(""), 0.0)), ConfigError);
}

TEST(Calibration, RecoversInjectedOffsetOnPreset) {
  ExperimentConfig cfg;
  cfg.cec.enabled = true;
  cfg.scenario = calibration_scenario(Vec2(1.2, -0.7));
  cfg.seeds.scenario = 5;
  const CecFitResult fit = calibrate_frame0(cfg);
  EXPECT_NEAR(fit.offsets.d_inf.x(), 1.2, 0.1);
  EXPECT_NEAR(fit.offsets.d_inf.y(), -0.7, 0.1);
  EXPECT_EQ(fit.offsets.d_veh, Vec2::Zero());
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c;
  c.scenario.num_objects = 5;
  c.channel.latency_ms = 150;
  c.cec.enabled = true;
  c.mode = Mode::vehicle_only;
  c.seeds.channel = 99;
  const ExperimentConfig back = parse_config(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(Config, EmptyDocumentGivesDefaults) {
  EXPECT_EQ(to_json(parse_config_text("{}")).dump(), to_json(ExperimentConfig{}).dump());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_config_text(R"({"scenario": {"nmu_objects": 3}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"bogus": 1})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"scenario": {"frames": 0}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"scenario": {"frames": "ten"}})"), ConfigError);
  EXPECT_THROW(parse_config_text("{not json"), ConfigError);
}

TEST(Config, MiscalibrationBeyondBoundRejected) {
  ExperimentConfig c;
  c.scenario.true_miscalibration = Vec2(0.0, 5.5);
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ScenarioJson, CarriesSceneAndVisibility) {
  const auto cfg = small_config();
  const ojson j = scenario_json(generate_scenario(cfg.seeds.scenario, cfg.scenario));
  for (const char* k : {"units", "seed", "frames", "objects", "ego_trajectory", "visibility", "infrastructure_pose"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["frames"].get<int>(), 5);
  EXPECT_EQ(j["visibility"].size(), 5u);
  // Traffic plus the parked occluders of the occlusion layout.
  EXPECT_EQ(j["objects"].size(), static_cast<std::size_t>(cfg.scenario.num_objects + cfg.scenario.occluders));
}

}  // namespace
}  // namespace coopbev
