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

#include <optional>

namespace coopbev {

/// Position-wise two-layer MLP with ReLU: w2 * relu(w1 x + b1) + b2.
struct FeedForward {
  MatX w1;  // hidden x C
  VecX b1;
  MatX w2;  // C x hidden
  VecX b2;

  static FeedForward zeros(int channels, int hidden) {
    return {MatX::Zero(hidden, channels), VecX::Zero(hidden), MatX::Zero(channels, hidden), VecX::Zero(channels)};
  }

  static FeedForward seeded(int channels, int hidden, std::uint64_t seed) {
    FeedForward f = zeros(channels, hidden);
    Rng rng(seed);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(channels));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    f.w1 = f.w1.unaryExpr([&](double) { return rng.normal() * s1; });
    f.w2 = f.w2.unaryExpr([&](double) { return rng.normal() * s2; });
    return f;
  }

  VecX apply(const VecX& x) const { return w2 * (w1 * x + b1).cwiseMax(0.0) + b2; }

  void validate(int channels) const {
    require_dims(w1.cols() == channels && w1.rows() == b1.size() && w2.rows() == channels &&
                     w2.cols() == w1.rows() && b2.size() == channels,
                 "FeedForward: shape mismatch");
  }
};

/// One encoder layer: q1 = q0 + TSA(q0), q2 = q1 + VIC(q1), bev = q2 + FFN(q2).
struct BevEncoderParams {
  Roi roi = Roi::vehicle_default();
  double cell_size = 1.6;
  VecX query_init;  // C, shared by all cells
  DeformAttnParams temporal;
  DeformAttnParams vic_veh;
  DeformAttnParams vic_inf;
  bool share_vic = false;
  FeedForward ffn;
  int n_ref = 4;

  int channels() const { return static_cast<int>(query_init.size()); }
  const DeformAttnParams& inf_params() const { return share_vic ? vic_veh : vic_inf; }

  void validate() const {
    const int c = channels();
    require_dims(c >= 1, "BevEncoderParams: empty query_init");
    temporal.validate();
    vic_veh.validate();
    inf_params().validate();
    require_dims(temporal.channels == c && vic_veh.channels == c && inf_params().channels == c,
                 "BevEncoderParams: attention channels != query channels");
    require_dims(temporal.levels == 1, "BevEncoderParams: temporal attention is single-level");
    ffn.validate(c);
    reference_pattern(n_ref);
  }

  BevQueryGrid make_grid() const { return BevQueryGrid::make(roi, cell_size, channels()); }
};

struct ModelDims {
  int channels = 8;
  int heads = 2;
  int levels = 4;
  int points = 4;
  int n_ref = 4;
  double query_cell = 1.6;
  int ffn_hidden = 8;

  void validate() const {
    if (channels < 4) throw ConfigError("model.channels", "must be >= 4");
    if (heads < 1 || channels % heads != 0) throw ConfigError("model.heads", "must divide channels");
    if (levels < 1 || levels > 6) throw ConfigError("model.levels", "must be in [1, 6]");
    if (points < 1 || points > 8) throw ConfigError("model.points", "must be in [1, 8]");
    reference_pattern(n_ref);
    if (!(query_cell > 0)) throw ConfigError("model.query_cell_m", "must be > 0");
    if (ffn_hidden < 1) throw ConfigError("model.ffn_hidden", "must be >= 1");
  }
};

inline BevEncoderParams seeded_encoder(const ModelDims& d, std::uint64_t seed) {
  d.validate();
  BevEncoderParams p;
  p.cell_size = d.query_cell;
  p.n_ref = d.n_ref;
  Rng rng(derive_seed(seed, 0xE0));
  p.query_init = VecX::NullaryExpr(d.channels, [&](Eigen::Index) { return 0.1 * rng.normal(); });
  p.temporal = DeformAttnParams::seeded(d.channels, d.heads, 1, d.points, derive_seed(seed, 0xE1));
  p.vic_veh = DeformAttnParams::seeded(d.channels, d.heads, d.levels, d.points, derive_seed(seed, 0xE2));
  p.vic_inf = DeformAttnParams::seeded(d.channels, d.heads, d.levels, d.points, derive_seed(seed, 0xE3));
  p.ffn = FeedForward::seeded(d.channels, d.ffn_hidden, derive_seed(seed, 0xE4));
  return p;
}

/// Hand-set weights that route the occupancy channel (0) of the pillar
/// features into BEV channel 0, so downstream heads read a fused occupancy
/// map:
///  * VIC head 0 samples channel 0 at the pyramid level closest to the query
///    cell (K points on a small square) and writes it to channel 0, scaled
///    by 1/N_ref so the sum over reference points is a mean;
///  * the FFN clips channel 0 at `occupancy_cap`, which makes the map
///    insensitive to how many returns an object produced;
///  * temporal attention copies the ego-aligned previous occupancy into
///    channel 1 scaled by `history_gain` (a memory channel the decoder does
///    not read).
struct RoutedEncoderOptions {
  double occupancy_cap = 0.02;
  double history_gain = 0.5;
  double base_voxel = 0.2;
};

inline int routed_level(const ModelDims& d, double base_voxel) {
  int best = 0;
  for (int l = 0; l < d.levels; ++l)
    if (base_voxel * (1 << l) <= d.query_cell + 1e-9) best = l;
  return best;
}

inline BevEncoderParams routed_encoder(const ModelDims& d, const RoutedEncoderOptions& o = {}) {
  d.validate();
  BevEncoderParams p;
  p.cell_size = d.query_cell;
  p.n_ref = d.n_ref;
  p.query_init = VecX::Zero(d.channels);

  p.temporal = DeformAttnParams::zeros(d.channels, d.heads, 1, d.points);
  p.temporal.value_proj[0](0, 0) = 1.0;
  p.temporal.output_proj[0](1, 0) = o.history_gain;

  auto vic = DeformAttnParams::zeros(d.channels, d.heads, d.levels, d.points);
  vic.value_proj[0](0, 0) = 1.0;
  vic.output_proj[0](0, 0) = 1.0 / d.n_ref;
  const int lvl = routed_level(d, o.base_voxel);
  static const std::array<Vec2, 8> kSquare = {Vec2(-0.5, -0.5), Vec2(0.5, -0.5), Vec2(-0.5, 0.5), Vec2(0.5, 0.5),
                                              Vec2(0.0, -0.5),  Vec2(0.0, 0.5),  Vec2(-0.5, 0.0), Vec2(0.5, 0.0)};
  for (int m = 0; m < d.heads; ++m)
    for (int l = 0; l < d.levels; ++l)
      for (int k = 0; k < d.points; ++k) {
        const int j = vic.sample_index(m, l, k);
        vic.attn_bias(j) = l == lvl ? 0.0 : -60.0;
        if (d.points > 1) {
          vic.offset_bias(2 * j) = kSquare[k].x();
          vic.offset_bias(2 * j + 1) = kSquare[k].y();
        }
      }
  p.vic_veh = vic;
  p.vic_inf = vic;

  p.ffn = FeedForward::zeros(d.channels, d.ffn_hidden);
  p.ffn.w1(0, 0) = 1.0;
  p.ffn.b1(0) = -o.occupancy_cap;
  p.ffn.w2(0, 0) = -1.0;
  return p;
}

struct EncoderInputs {
  const MultiScaleFeatures* f_veh = nullptr;
  /// Null when no infrastructure message is available this frame.
  const MultiScaleFeatures* f_inf = nullptr;
  ProjectionContext ctx;
  CalibrationOffsets offsets;
  /// Maps current ego coordinates into the previous frame's ego frame.
  RigidTransform2D curr_to_prev;
};

/// Runs one encoder layer and stores the result as the next frame's history.
inline BevQueryGrid encode_bev(const BevEncoderParams& p, const EncoderInputs& in, TemporalState& state) {
  p.validate();
  require_dims(in.f_veh != nullptr, "encode_bev: vehicle features required");
  BevQueryGrid q0 = p.make_grid();
  for (std::size_t i = 0; i < q0.size(); ++i) q0.set_query(i, p.query_init);

  BevQueryGrid tsa = temporal_self_attn(q0, state, in.curr_to_prev, p.temporal);
  BevQueryGrid q1 = q0;
  for (std::size_t i = 0; i < q1.map.data.size(); ++i) q1.map.data[i] += tsa.map.data[i];

  ProjectionContext ctx = in.ctx;
  ctx.infrastructure_present = ctx.infrastructure_present && in.f_inf != nullptr;
  const auto refs = make_query_references(q1, ctx, in.offsets, p.n_ref);
  static const MultiScaleFeatures kEmpty;
  BevQueryGrid vic = vic_cross_attn(q1, *in.f_veh, in.f_inf ? *in.f_inf : kEmpty, refs, p.vic_veh, p.inf_params());
  BevQueryGrid q2 = q1;
  for (std::size_t i = 0; i < q2.map.data.size(); ++i) q2.map.data[i] += vic.map.data[i];

  BevQueryGrid out = q2;
  parallel_for(out.size(), [&](std::size_t i) {
    const VecX x = q2.query(i);
    out.set_query(i, x + p.ffn.apply(x));
  });
  state.prev_bev = out;
  return out;
}

}  // namespace coopbev
