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
#include "coopbev/pillars.hpp"

#include <algorithm>
#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace coopbev {

// ---------------------------------------------------------------------------
// Bilinear sampling
//
// Normalized coordinates u in [0,1]^2 map to continuous pixel coordinates
// x = u.x * nx - 0.5 (cell centers sit at integer x). This is the
// align_corners=false convention; it keeps cell centers of every pyramid
// level at the same metric location.

enum class PaddingMode { zeros, clamp };

struct BilinearStencil {
  std::array<int, 4> ix{};
  std::array<int, 4> iy{};
  std::array<double, 4> w{};
  std::array<double, 4> dw_dx{};
  std::array<double, 4> dw_dy{};
  std::array<bool, 4> valid{};
};

inline BilinearStencil bilinear_stencil(int nx, int ny, double x, double y, PaddingMode pad = PaddingMode::zeros) {
  BilinearStencil s;
  bool clamped_x = false, clamped_y = false;
  if (pad == PaddingMode::clamp) {
    const double cx = std::clamp(x, 0.0, static_cast<double>(nx - 1));
    const double cy = std::clamp(y, 0.0, static_cast<double>(ny - 1));
    clamped_x = cx != x;
    clamped_y = cy != y;
    x = cx;
    y = cy;
  }
  const double x0f = std::floor(x), y0f = std::floor(y);
  const int x0 = static_cast<int>(x0f), y0 = static_cast<int>(y0f);
  const double fx = x - x0f, fy = y - y0f;
  s.ix = {x0, x0 + 1, x0, x0 + 1};
  s.iy = {y0, y0, y0 + 1, y0 + 1};
  s.w = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  s.dw_dx = {-(1 - fy), (1 - fy), -fy, fy};
  s.dw_dy = {-(1 - fx), -fx, (1 - fx), fx};
  if (clamped_x) s.dw_dx.fill(0.0);
  if (clamped_y) s.dw_dy.fill(0.0);
  for (int k = 0; k < 4; ++k) s.valid[k] = s.ix[k] >= 0 && s.ix[k] < nx && s.iy[k] >= 0 && s.iy[k] < ny;
  return s;
}

/// Samples `f` at continuous pixel coordinates; accumulates `scale * value`
/// into `out` (length f.channels).
inline void bilinear_accumulate(const BevFeatureMap& f, double x, double y, double scale, double* out,
                                PaddingMode pad = PaddingMode::zeros) {
  if (pad == PaddingMode::zeros && (x <= -1.0 || y <= -1.0 || x >= f.nx || y >= f.ny)) return;
  const auto s = bilinear_stencil(f.nx, f.ny, x, y, pad);
  for (int k = 0; k < 4; ++k) {
    if (!s.valid[k] || s.w[k] == 0.0) continue;
    const double wk = scale * s.w[k];
    const double* v = f.cell(s.ix[k], s.iy[k]);
    for (int c = 0; c < f.channels; ++c) out[c] += wk * v[c];
  }
}

inline VecX bilinear_sample_pixel(const BevFeatureMap& f, double x, double y, PaddingMode pad = PaddingMode::zeros) {
  VecX out = VecX::Zero(f.channels);
  bilinear_accumulate(f, x, y, 1.0, out.data(), pad);
  return out;
}

inline Vec2 to_pixel(const BevFeatureMap& f, const Vec2& u) { return {u.x() * f.nx - 0.5, u.y() * f.ny - 0.5}; }

/// Feature vector at normalized location `p`; zero outside the map.
inline VecX bilinear_sample(const BevFeatureMap& f, const Vec2& p, PaddingMode pad = PaddingMode::zeros) {
  require_dims(!f.empty(), "bilinear_sample: empty feature map");
  const Vec2 px = to_pixel(f, p);
  return bilinear_sample_pixel(f, px.x(), px.y(), pad);
}

/// d sample / d p for normalized `p`; C x 2.
inline MatX bilinear_sample_jacobian(const BevFeatureMap& f, const Vec2& p, PaddingMode pad = PaddingMode::zeros) {
  const Vec2 px = to_pixel(f, p);
  MatX j = MatX::Zero(f.channels, 2);
  const auto s = bilinear_stencil(f.nx, f.ny, px.x(), px.y(), pad);
  for (int k = 0; k < 4; ++k) {
    if (!s.valid[k]) continue;
    const double* v = f.cell(s.ix[k], s.iy[k]);
    for (int c = 0; c < f.channels; ++c) {
      j(c, 0) += s.dw_dx[k] * v[c] * f.nx;
      j(c, 1) += s.dw_dy[k] * v[c] * f.ny;
    }
  }
  return j;
}

/// Gradient of <g, bilinear_sample(f, p)> w.r.t. the map values, scattered
/// into `grad_f` (same shape as f).
inline void bilinear_sample_backward_features(const BevFeatureMap& f, const Vec2& p, const VecX& g,
                                              BevFeatureMap& grad_f, PaddingMode pad = PaddingMode::zeros) {
  const Vec2 px = to_pixel(f, p);
  const auto s = bilinear_stencil(f.nx, f.ny, px.x(), px.y(), pad);
  for (int k = 0; k < 4; ++k) {
    if (!s.valid[k]) continue;
    double* d = grad_f.cell(s.ix[k], s.iy[k]);
    for (int c = 0; c < f.channels; ++c) d[c] += s.w[k] * g(c);
  }
}

// ---------------------------------------------------------------------------
// Multi-scale deformable attention

struct DeformAttnParams {
  int heads = 1;
  int levels = 1;
  int points = 1;
  int channels = 1;
  std::vector<MatX> value_proj;   // per head: (C/M) x C
  std::vector<MatX> output_proj;  // per head: C x (C/M)
  MatX offset_weight;             // (M*L*K*2) x C, pixel units of each level
  VecX offset_bias;
  MatX attn_weight;  // (M*L*K) x C
  VecX attn_bias;
  PaddingMode padding = PaddingMode::zeros;

  int head_dim() const { return channels / heads; }
  int samples() const { return heads * levels * points; }
  int sample_index(int m, int l, int k) const { return (m * levels + l) * points + k; }

  /// Zero offsets, uniform attention, W_m * W'_m = I (block identity).
  static DeformAttnParams identity(int channels, int heads, int levels, int points) {
    DeformAttnParams p = zeros(channels, heads, levels, points);
    const int d = p.head_dim();
    for (int m = 0; m < heads; ++m) {
      p.value_proj[m].block(0, m * d, d, d).setIdentity();
      p.output_proj[m].block(m * d, 0, d, d).setIdentity();
    }
    return p;
  }

  static DeformAttnParams zeros(int channels, int heads, int levels, int points) {
    if (heads < 1 || levels < 1 || points < 1 || channels < 1)
      throw ConfigError("model", "deformable attention dims must be positive");
    if (channels % heads != 0) throw ConfigError("model.heads", "channels must be divisible by heads");
    DeformAttnParams p;
    p.heads = heads;
    p.levels = levels;
    p.points = points;
    p.channels = channels;
    const int d = channels / heads;
    p.value_proj.assign(heads, MatX::Zero(d, channels));
    p.output_proj.assign(heads, MatX::Zero(channels, d));
    p.offset_weight = MatX::Zero(p.samples() * 2, channels);
    p.offset_bias = VecX::Zero(p.samples() * 2);
    p.attn_weight = MatX::Zero(p.samples(), channels);
    p.attn_bias = VecX::Zero(p.samples());
    return p;
  }

  /// Gaussian random weights; offsets have roughly `offset_scale` pixels std.
  static DeformAttnParams seeded(int channels, int heads, int levels, int points, std::uint64_t seed,
                                 double offset_scale = 1.0) {
    DeformAttnParams p = zeros(channels, heads, levels, points);
    Rng rng(seed);
    const double sc = 1.0 / std::sqrt(static_cast<double>(channels));
    const double sd = 1.0 / std::sqrt(static_cast<double>(p.head_dim()));
    for (auto& w : p.value_proj) w = w.unaryExpr([&](double) { return rng.normal() * sc; });
    for (auto& w : p.output_proj) w = w.unaryExpr([&](double) { return rng.normal() * sd; });
    p.offset_weight = p.offset_weight.unaryExpr([&](double) { return rng.normal() * sc * 0.5 * offset_scale; });
    p.offset_bias = p.offset_bias.unaryExpr([&](double) { return rng.normal() * offset_scale; });
    p.attn_weight = p.attn_weight.unaryExpr([&](double) { return rng.normal() * sc; });
    p.attn_bias = p.attn_bias.unaryExpr([&](double) { return rng.normal() * 0.5; });
    return p;
  }

  void validate() const {
    require_dims(heads >= 1 && levels >= 1 && points >= 1 && channels >= 1, "DeformAttnParams: dims must be positive");
    require_dims(channels % heads == 0, "DeformAttnParams: channels not divisible by heads");
    require_dims(static_cast<int>(value_proj.size()) == heads && static_cast<int>(output_proj.size()) == heads,
                 "DeformAttnParams: one projection pair per head");
    for (int m = 0; m < heads; ++m) {
      require_dims(value_proj[m].rows() == head_dim() && value_proj[m].cols() == channels,
                   "DeformAttnParams: value_proj must be (C/M) x C");
      require_dims(output_proj[m].rows() == channels && output_proj[m].cols() == head_dim(),
                   "DeformAttnParams: output_proj must be C x (C/M)");
    }
    require_dims(offset_weight.rows() == 2 * samples() && offset_weight.cols() == channels &&
                     offset_bias.size() == 2 * samples(),
                 "DeformAttnParams: offset net shape");
    require_dims(attn_weight.rows() == samples() && attn_weight.cols() == channels && attn_bias.size() == samples(),
                 "DeformAttnParams: attention net shape");
  }
};

/// Query-dependent sampling offsets (pixels) and softmax attention weights.
struct AttnSampling {
  VecX offsets;  // 2 * samples, (dx, dy) pairs
  VecX weights;  // samples, softmax-normalized per head
};

inline AttnSampling attention_sampling(const DeformAttnParams& p, const VecX& q) {
  require_dims(q.size() == p.channels, "attention_sampling: query size != channels");
  AttnSampling s;
  s.offsets = p.offset_weight * q + p.offset_bias;
  VecX logits = p.attn_weight * q + p.attn_bias;
  s.weights.resize(p.samples());
  const int per_head = p.levels * p.points;
  for (int m = 0; m < p.heads; ++m) {
    const auto seg = logits.segment(m * per_head, per_head);
    const double mx = seg.maxCoeff();
    double z = 0.0;
    for (int j = 0; j < per_head; ++j) z += std::exp(seg(j) - mx);
    for (int j = 0; j < per_head; ++j) s.weights(m * per_head + j) = std::exp(seg(j) - mx) / z;
  }
  return s;
}

inline void check_feature_compat(const MultiScaleFeatures& feats, const DeformAttnParams& p) {
  require_dims(feats.num_levels() == p.levels, "ms_deform_attn: feature level count != params.levels");
  for (const auto& lvl : feats.levels)
    require_dims(lvl.channels == p.channels, "ms_deform_attn: feature channels != params.channels");
}

/// Deformable attention of one query at normalized reference `p`, literal
/// form: W_m [ sum_l sum_k A * W'_m * F^l(R_l(p) + dp) ] summed over heads.
inline VecX ms_deform_attn(const VecX& q, const Vec2& p, const MultiScaleFeatures& feats, const DeformAttnParams& params) {
  params.validate();
  check_feature_compat(feats, params);
  const auto s = attention_sampling(params, q);
  VecX out = VecX::Zero(params.channels);
  VecX v(params.channels);
  for (int m = 0; m < params.heads; ++m) {
    VecX head = VecX::Zero(params.head_dim());
    for (int l = 0; l < params.levels; ++l) {
      const auto& f = feats.levels[l];
      const Vec2 base = to_pixel(f, p);
      for (int k = 0; k < params.points; ++k) {
        const int j = params.sample_index(m, l, k);
        v.setZero();
        bilinear_accumulate(f, base.x() + s.offsets(2 * j), base.y() + s.offsets(2 * j + 1), 1.0, v.data(),
                            params.padding);
        head.noalias() += s.weights(j) * (params.value_proj[m] * v);
      }
    }
    out.noalias() += params.output_proj[m] * head;
  }
  return out;
}

struct DeformAttnGrad {
  MultiScaleFeatures grad_feats;
  Vec2 grad_p = Vec2::Zero();
};

/// Gradient of <g, ms_deform_attn(q, p, feats)> w.r.t. the feature maps and
/// the normalized reference point (offsets and weights held fixed by q).
inline DeformAttnGrad ms_deform_attn_backward(const VecX& q, const Vec2& p, const MultiScaleFeatures& feats,
                                              const DeformAttnParams& params, const VecX& g) {
  params.validate();
  check_feature_compat(feats, params);
  require_dims(g.size() == params.channels, "ms_deform_attn_backward: upstream gradient size");
  const auto s = attention_sampling(params, q);
  DeformAttnGrad out;
  for (const auto& lvl : feats.levels) out.grad_feats.levels.emplace_back(lvl.nx, lvl.ny, lvl.channels, 0.0);
  for (int m = 0; m < params.heads; ++m) {
    const VecX g_head = params.output_proj[m].transpose() * g;
    const VecX g_val = params.value_proj[m].transpose() * g_head;  // d/d(sampled C-vector), before A
    for (int l = 0; l < params.levels; ++l) {
      const auto& f = feats.levels[l];
      auto& gf = out.grad_feats.levels[l];
      const Vec2 base = to_pixel(f, p);
      for (int k = 0; k < params.points; ++k) {
        const int j = params.sample_index(m, l, k);
        const double a = s.weights(j);
        const auto st = bilinear_stencil(f.nx, f.ny, base.x() + s.offsets(2 * j), base.y() + s.offsets(2 * j + 1),
                                         params.padding);
        for (int n = 0; n < 4; ++n) {
          if (!st.valid[n]) continue;
          const double* v = f.cell(st.ix[n], st.iy[n]);
          double* d = gf.cell(st.ix[n], st.iy[n]);
          double dot = 0.0;
          for (int c = 0; c < f.channels; ++c) {
            d[c] += a * st.w[n] * g_val(c);
            dot += g_val(c) * v[c];
          }
          out.grad_p.x() += a * st.dw_dx[n] * dot * f.nx;
          out.grad_p.y() += a * st.dw_dy[n] * dot * f.ny;
        }
      }
    }
  }
  return out;
}

/// Per-level, per-head value maps V = W'_m F^l, computed once and reused by
/// every query of a layer. Sampling is linear, so sampling V equals W'_m
/// applied to the sampled features.
struct ProjectedValues {
  std::vector<std::vector<BevFeatureMap>> maps;  // [level][head], C/M channels
};

inline ProjectedValues project_values(const MultiScaleFeatures& feats, const DeformAttnParams& params) {
  params.validate();
  check_feature_compat(feats, params);
  ProjectedValues pv;
  const int d = params.head_dim();
  for (const auto& f : feats.levels) {
    std::vector<BevFeatureMap> heads;
    for (int m = 0; m < params.heads; ++m) {
      BevFeatureMap v(f.nx, f.ny, d);
      const MatX& w = params.value_proj[m];
      const std::size_t cells = static_cast<std::size_t>(f.nx) * f.ny;
      Eigen::Map<const MatX> src(f.data.data(), f.channels, static_cast<Eigen::Index>(cells));
      Eigen::Map<MatX> dst(v.data.data(), d, static_cast<Eigen::Index>(cells));
      dst.noalias() = w * src;
      heads.push_back(std::move(v));
    }
    pv.maps.push_back(std::move(heads));
  }
  return pv;
}

/// Same result as ms_deform_attn (up to rounding) using projected values.
inline VecX ms_deform_attn_projected(const VecX& q, const Vec2& p, const ProjectedValues& values,
                                     const DeformAttnParams& params) {
  const auto s = attention_sampling(params, q);
  VecX out = VecX::Zero(params.channels);
  VecX head(params.head_dim());
  for (int m = 0; m < params.heads; ++m) {
    head.setZero();
    for (int l = 0; l < params.levels; ++l) {
      const auto& f = values.maps[l][m];
      const Vec2 base = to_pixel(f, p);
      for (int k = 0; k < params.points; ++k) {
        const int j = params.sample_index(m, l, k);
        bilinear_accumulate(f, base.x() + s.offsets(2 * j), base.y() + s.offsets(2 * j + 1), s.weights(j), head.data(),
                            params.padding);
      }
    }
    out.noalias() += params.output_proj[m] * head;
  }
  return out;
}

// ---------------------------------------------------------------------------
// BEV query grid

struct BevQueryGrid {
  BevFeatureMap map;  // W = map.nx, H = map.ny
  Roi roi = Roi::vehicle_default();
  double cell_size = 0.512;

  int width() const { return map.nx; }
  int height() const { return map.ny; }
  int channels() const { return map.channels; }
  std::size_t size() const { return static_cast<std::size_t>(map.nx) * map.ny; }
  std::size_t cell_index(int ix, int iy) const { return static_cast<std::size_t>(iy) * map.nx + ix; }

  static BevQueryGrid make(const Roi& roi, double cell_size, int channels, double fill = 0.0) {
    BevQueryGrid g;
    g.roi = roi;
    g.cell_size = cell_size;
    const int w = grid_cells(roi.width(), cell_size), h = grid_cells(roi.height(), cell_size);
    if (w < 1 || h < 1) throw ConfigError("model.query_cell_size", "query grid would be empty");
    g.map = BevFeatureMap(w, h, channels, fill);
    return g;
  }

  Vec2 cell_center(int ix, int iy) const {
    return {roi.x_min + (ix + 0.5) * cell_size, roi.y_min + (iy + 0.5) * cell_size};
  }
  Vec2 cell_center(std::size_t idx) const {
    return cell_center(static_cast<int>(idx % map.nx), static_cast<int>(idx / map.nx));
  }
  VecX query(std::size_t idx) const {
    return Eigen::Map<const VecX>(map.data.data() + idx * map.channels, map.channels);
  }
  void set_query(std::size_t idx, const VecX& v) {
    Eigen::Map<VecX>(map.data.data() + idx * map.channels, map.channels) = v;
  }
  bool all_finite() const { return map.all_finite(); }
};

using QueryReferences = std::vector<std::vector<ReferencePoint>>;

/// N_ref reference points per query cell, projected into both sensors.
inline QueryReferences make_query_references(const BevQueryGrid& grid, const ProjectionContext& ctx,
                                             const CalibrationOffsets& offsets, int n_ref) {
  const auto pattern = reference_pattern(n_ref);
  if (offsets.granularity == OffsetGranularity::per_query_cell)
    require_dims(offsets.cell_veh.size() == grid.size() && offsets.cell_inf.size() == grid.size(),
                 "make_query_references: per-cell offsets must match the query grid");
  QueryReferences refs(grid.size());
  for (std::size_t q = 0; q < grid.size(); ++q) {
    const Vec2 c = grid.cell_center(q);
    refs[q].reserve(pattern.size());
    for (const auto& jit : pattern)
      refs[q].push_back(make_reference_point(c + grid.cell_size * jit, ctx, offsets.veh_at(q), offsets.inf_at(q)));
  }
  return refs;
}

// ---------------------------------------------------------------------------
// VIC cross-attention

/// Masked fusion of both branches summed over reference points:
///   out = sum_i 1/(1+M_i) * (A_veh(Q, P_veh_i) + M_i * A_inf(Q, P_inf_i)).
/// `f_inf` may be empty only when every mask is zero.
inline BevQueryGrid vic_cross_attn(const BevQueryGrid& queries, const MultiScaleFeatures& f_veh,
                                   const MultiScaleFeatures& f_inf, const QueryReferences& refs,
                                   const DeformAttnParams& params_veh, const DeformAttnParams& params_inf) {
  require_dims(refs.size() == queries.size(), "vic_cross_attn: reference list count != query count");
  require_dims(params_veh.channels == queries.channels() && params_inf.channels == queries.channels(),
               "vic_cross_attn: params channels != query channels");
  bool any_inf = false;
  for (const auto& r : refs) {
    require_dims(!r.empty(), "vic_cross_attn: every query needs at least one reference point");
    for (const auto& p : r) any_inf = any_inf || p.inf_in_bounds;
  }
  const ProjectedValues v_veh = project_values(f_veh, params_veh);
  std::optional<ProjectedValues> v_inf;
  if (any_inf) {
    require_dims(f_inf.num_levels() > 0, "vic_cross_attn: mask set but no infrastructure features");
    v_inf = project_values(f_inf, params_inf);
  }
  BevQueryGrid out = queries;
  std::fill(out.map.data.begin(), out.map.data.end(), 0.0);
  parallel_for(queries.size(), [&](std::size_t q) {
    const VecX query = queries.query(q);
    VecX acc = VecX::Zero(queries.channels());
    for (const auto& ref : refs[q]) {
      const VecX veh = ms_deform_attn_projected(query, ref.veh_normalized, v_veh, params_veh);
      if (!ref.inf_in_bounds) {
        acc += veh;
        continue;
      }
      const double mask = 1.0;
      const VecX inf = ms_deform_attn_projected(query, ref.inf_normalized, *v_inf, params_inf);
      acc += (1.0 / (1.0 + mask)) * (veh + mask * inf);
    }
    out.set_query(q, acc);
  });
  return out;
}

/// Single branch summed over reference points (the M = 0 reduction).
inline BevQueryGrid single_branch_attn(const BevQueryGrid& queries, const MultiScaleFeatures& feats,
                                       const QueryReferences& refs, const DeformAttnParams& params, bool infra_side) {
  require_dims(refs.size() == queries.size(), "single_branch_attn: reference list count != query count");
  const ProjectedValues v = project_values(feats, params);
  BevQueryGrid out = queries;
  std::fill(out.map.data.begin(), out.map.data.end(), 0.0);
  parallel_for(queries.size(), [&](std::size_t q) {
    const VecX query = queries.query(q);
    VecX acc = VecX::Zero(queries.channels());
    for (const auto& ref : refs[q])
      acc += ms_deform_attn_projected(query, infra_side ? ref.inf_normalized : ref.veh_normalized, v, params);
    out.set_query(q, acc);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Temporal self-attention

struct TemporalState {
  std::optional<BevQueryGrid> prev_bev;
  RigidTransform2D prev_ego_pose;
};

/// Resamples `prev` into the current ego frame. `curr_to_prev` maps current
/// ego coordinates into the previous ego frame.
inline BevQueryGrid warp_bev(const BevQueryGrid& prev, const RigidTransform2D& curr_to_prev) {
  BevQueryGrid out = prev;
  std::fill(out.map.data.begin(), out.map.data.end(), 0.0);
  for (int iy = 0; iy < prev.height(); ++iy)
    for (int ix = 0; ix < prev.width(); ++ix) {
      const Vec2 src = curr_to_prev.apply(prev.cell_center(ix, iy));
      const Vec2 u = normalize_point(src, prev.roi).coord;
      const Vec2 px = to_pixel(prev.map, u);
      bilinear_accumulate(prev.map, px.x(), px.y(), 1.0, out.map.cell(ix, iy));
    }
  return out;
}

inline MultiScaleFeatures as_single_level(const BevQueryGrid& g) {
  MultiScaleFeatures f;
  f.levels.push_back(g.map);
  return f;
}

/// Deformable self-attention of every query over its own grid; with history,
/// the average of attention over the ego-aligned previous BEV and over the
/// current grid.
inline BevQueryGrid temporal_self_attn(const BevQueryGrid& queries, const TemporalState& state,
                                       const RigidTransform2D& curr_to_prev, const DeformAttnParams& params) {
  require_dims(params.levels == 1, "temporal_self_attn: params must have a single level");
  require_dims(params.channels == queries.channels(), "temporal_self_attn: params channels != query channels");
  if (state.prev_bev)
    require_dims(state.prev_bev->width() == queries.width() && state.prev_bev->height() == queries.height() &&
                     state.prev_bev->channels() == queries.channels(),
                 "temporal_self_attn: history dims != query dims");
  const ProjectedValues cur = project_values(as_single_level(queries), params);
  std::optional<ProjectedValues> hist;
  if (state.prev_bev) hist = project_values(as_single_level(warp_bev(*state.prev_bev, curr_to_prev)), params);
  BevQueryGrid out = queries;
  parallel_for(queries.size(), [&](std::size_t q) {
    const VecX query = queries.query(q);
    const Vec2 p = normalize_point(queries.cell_center(q), queries.roi).coord;
    const VecX c = ms_deform_attn_projected(query, p, cur, params);
    if (!hist) {
      out.set_query(q, c);
    } else {
      const VecX h = ms_deform_attn_projected(query, p, *hist, params);
      out.set_query(q, 0.5 * (h + c));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Calibration error compensation (self-supervised offset fit)

/// Single-channel pyramid for the offset fit: channel `c` of `base`, then
/// repeated 2x2 pooling, with [a, 1-2a, a] smoothing applied at every level
/// including the finest so the loss stays smooth across cell boundaries.
inline MultiScaleFeatures cec_pyramid(const BevFeatureMap& base, int c, int levels, double smoothing) {
  if (levels < 1) throw ConfigError("cec.levels", "must be >= 1");
  if (!(smoothing >= 0 && smoothing <= 0.5)) throw ConfigError("cec.smoothing", "must be in [0, 0.5]");
  require_dims(c >= 0 && c < base.channels, "cec_pyramid: channel out of range");
  const int div = 1 << (levels - 1);
  require_dims(base.nx % div == 0 && base.ny % div == 0, "cec_pyramid: base dims must be divisible by 2^(L-1)");
  BevFeatureMap m(base.nx, base.ny, 1);
  for (int iy = 0; iy < base.ny; ++iy)
    for (int ix = 0; ix < base.nx; ++ix) m.at(ix, iy, 0) = base.at(ix, iy, c);
  MultiScaleFeatures out;
  out.levels.push_back(smooth(m, smoothing));
  for (int l = 1; l < levels; ++l) out.levels.push_back(smooth(average_pool2(out.levels.back()), smoothing));
  return out;
}

/// BEV points (ego frame) on a regular lattice that project inside both
/// sensors' ROIs under the reported transforms.
inline std::vector<Vec2> overlap_points(const ProjectionContext& ctx, double spacing, double margin = 0.0) {
  std::vector<Vec2> pts;
  const Roi& r = ctx.roi_veh;
  for (double y = r.y_min + 0.5 * spacing; y < r.y_max; y += spacing)
    for (double x = r.x_min + 0.5 * spacing; x < r.x_max; x += spacing) {
      const Vec2 b(x, y);
      const Vec2 v = ctx.bev2veh.apply(b), i = ctx.bev2inf.apply(b);
      auto inside = [&](const Vec2& p, const Roi& roi) {
        return p.x() >= roi.x_min + margin && p.x() <= roi.x_max - margin && p.y() >= roi.y_min + margin &&
               p.y() <= roi.y_max - margin;
      };
      if (inside(v, ctx.roi_veh) && inside(i, ctx.roi_inf)) pts.push_back(b);
    }
  return pts;
}

struct CecProblem {
  const MultiScaleFeatures* f_veh = nullptr;
  const MultiScaleFeatures* f_inf = nullptr;
  ProjectionContext ctx;
  std::vector<Vec2> points;          // ego BEV frame
  std::vector<double> level_weights; // empty = 1 per level
};

struct CecLoss {
  double value = 0.0;
  Vec2 grad_veh = Vec2::Zero();
  Vec2 grad_inf = Vec2::Zero();
};

/// Mean over points of sum_{min_level <= l <= max_level} w_l * |S_veh^l -
/// S_inf^l|^2 and its analytic gradient w.r.t. both global offsets (meters).
/// max_level < 0 means the coarsest level.
inline CecLoss cec_loss(const CecProblem& pb, const Vec2& d_veh, const Vec2& d_inf, int min_level = 0,
                        int max_level = -1) {
  require_dims(pb.f_veh && pb.f_inf, "cec_loss: missing features");
  require_dims(pb.f_veh->num_levels() == pb.f_inf->num_levels(), "cec_loss: pyramids differ in level count");
  require_dims(pb.f_veh->channels() == pb.f_inf->channels(), "cec_loss: pyramids differ in channels");
  if (pb.points.empty()) throw ConvergenceError("cec_loss: empty overlap between vehicle and infrastructure ROIs");
  CecLoss out;
  const int L = pb.f_veh->num_levels();
  const int C = pb.f_veh->channels();
  const double sx_veh = 1.0 / pb.ctx.roi_veh.width(), sy_veh = 1.0 / pb.ctx.roi_veh.height();
  const double sx_inf = 1.0 / pb.ctx.roi_inf.width(), sy_inf = 1.0 / pb.ctx.roi_inf.height();
  std::vector<double> diff(C);
  for (const auto& b : pb.points) {
    const Vec2 uv = normalize_point(compensate_reference_point(b, pb.ctx.bev2veh, d_veh), pb.ctx.roi_veh).coord;
    const Vec2 ui = normalize_point(compensate_reference_point(b, pb.ctx.bev2inf, d_inf), pb.ctx.roi_inf).coord;
    const int top = max_level < 0 ? L - 1 : std::min(max_level, L - 1);
    for (int l = std::max(min_level, 0); l <= top; ++l) {
      const double w = pb.level_weights.empty() ? 1.0 : pb.level_weights.at(l);
      if (w == 0.0) continue;
      const auto& fv = pb.f_veh->levels[l];
      const auto& fi = pb.f_inf->levels[l];
      const Vec2 pv = to_pixel(fv, uv), pi = to_pixel(fi, ui);
      const auto sv = bilinear_stencil(fv.nx, fv.ny, pv.x(), pv.y());
      const auto si = bilinear_stencil(fi.nx, fi.ny, pi.x(), pi.y());
      std::fill(diff.begin(), diff.end(), 0.0);
      for (int n = 0; n < 4; ++n) {
        if (sv.valid[n]) {
          const double* v = fv.cell(sv.ix[n], sv.iy[n]);
          for (int c = 0; c < C; ++c) diff[c] += sv.w[n] * v[c];
        }
        if (si.valid[n]) {
          const double* v = fi.cell(si.ix[n], si.iy[n]);
          for (int c = 0; c < C; ++c) diff[c] -= si.w[n] * v[c];
        }
      }
      for (int c = 0; c < C; ++c) out.value += w * diff[c] * diff[c];
      // d loss / d pixel = 2 w diff . dS/dpixel; sign flips for the infra side.
      for (int n = 0; n < 4; ++n) {
        if (sv.valid[n]) {
          const double* v = fv.cell(sv.ix[n], sv.iy[n]);
          double dot = 0.0;
          for (int c = 0; c < C; ++c) dot += diff[c] * v[c];
          out.grad_veh.x() += 2.0 * w * dot * sv.dw_dx[n] * fv.nx * sx_veh;
          out.grad_veh.y() += 2.0 * w * dot * sv.dw_dy[n] * fv.ny * sy_veh;
        }
        if (si.valid[n]) {
          const double* v = fi.cell(si.ix[n], si.iy[n]);
          double dot = 0.0;
          for (int c = 0; c < C; ++c) dot += diff[c] * v[c];
          out.grad_inf.x() -= 2.0 * w * dot * si.dw_dx[n] * fi.nx * sx_inf;
          out.grad_inf.y() -= 2.0 * w * dot * si.dw_dy[n] * fi.ny * sy_inf;
        }
      }
    }
  }
  const double n = static_cast<double>(pb.points.size());
  out.value /= n;
  out.grad_veh /= n;
  out.grad_inf /= n;
  return out;
}

/// Per-level weights w_l = gain * h_l^2 / E_l, with h_l the vehicle-side cell
/// size (m) and E_l the mean squared feature magnitude of both sides at the
/// given offsets. Each level then has comparable curvature in meters, which
/// lets one fixed step size serve every stage.
inline std::vector<double> balanced_level_weights(const CecProblem& pb, const Vec2& d_veh, const Vec2& d_inf,
                                                  double gain) {
  require_dims(pb.f_veh && pb.f_inf, "balanced_level_weights: missing features");
  const int L = pb.f_veh->num_levels();
  std::vector<double> energy(L, 0.0);
  for (const auto& b : pb.points) {
    const Vec2 uv = normalize_point(compensate_reference_point(b, pb.ctx.bev2veh, d_veh), pb.ctx.roi_veh).coord;
    const Vec2 ui = normalize_point(compensate_reference_point(b, pb.ctx.bev2inf, d_inf), pb.ctx.roi_inf).coord;
    for (int l = 0; l < L; ++l)
      energy[l] += 0.5 * (bilinear_sample(pb.f_veh->levels[l], uv).squaredNorm() +
                          bilinear_sample(pb.f_inf->levels[l], ui).squaredNorm());
  }
  std::vector<double> w(L, 0.0);
  for (int l = 0; l < L; ++l) {
    const double e = energy[l] / static_cast<double>(std::max<std::size_t>(pb.points.size(), 1));
    const double h = pb.ctx.roi_veh.width() / pb.f_veh->levels[l].nx;
    w[l] = e > 0.0 ? gain * h * h / e : 0.0;
  }
  return w;
}

struct CecOptions {
  double lr = 0.05;
  int iters = 200;
  bool fit_vehicle = false;
  /// One stage per level from the coarsest down to 0, each stage fitting its
  /// own level only and splitting `iters` evenly. Off: all levels jointly.
  bool coarse_to_fine = true;
  int divergence_window = 10;
  /// Used when the problem carries no level weights.
  double curvature_gain = 1.0;
};

struct CecFitResult {
  CalibrationOffsets offsets;
  std::vector<double> loss_history;
  double final_loss = 0.0;
};

/// Plain gradient descent on the feature-alignment loss. Throws
/// ConvergenceError on empty overlap or when the loss rises for
/// `divergence_window` consecutive steps.
inline CecFitResult cec_fit_detailed(const CecProblem& problem, const CalibrationOffsets& init,
                                     const CecOptions& opt) {
  if (problem.points.empty()) throw ConvergenceError("cec_fit: empty overlap between vehicle and infrastructure ROIs");
  if (!(opt.lr > 0) || opt.iters < 1) throw ConfigError("cec.lr", "lr must be > 0 and iters >= 1");
  CecProblem pb = problem;
  if (pb.level_weights.empty()) pb.level_weights = balanced_level_weights(pb, init.d_veh, init.d_inf, opt.curvature_gain);
  CecFitResult res;
  res.offsets = init;
  res.offsets.granularity = OffsetGranularity::global;
  Vec2 dv = init.d_veh, di = init.d_inf;
  const int L = pb.f_veh->num_levels();
  const int stages = opt.coarse_to_fine ? L : 1;
  int rises = 0;
  for (int stage = 0; stage < stages; ++stage) {
    const int min_level = opt.coarse_to_fine ? L - 1 - stage : 0;
    const int max_level = opt.coarse_to_fine ? min_level : L - 1;
    const int stage_iters = opt.iters / stages + (stage < opt.iters % stages ? 1 : 0);
    double prev = std::numeric_limits<double>::infinity();
    rises = 0;
    for (int it = 0; it < stage_iters; ++it) {
      const CecLoss loss = cec_loss(pb, dv, di, min_level, max_level);
      res.loss_history.push_back(loss.value);
      if (!std::isfinite(loss.value)) throw ConvergenceError("cec_fit: non-finite loss");
      rises = loss.value > prev ? rises + 1 : 0;
      if (rises >= opt.divergence_window) {
        std::ostringstream os;
        os << "cec_fit: loss increased for " << rises << " consecutive steps (stage " << stage << ", iter " << it
           << ", loss " << loss.value << ", d_inf " << di.x() << "," << di.y() << ", lr " << opt.lr << ")";
        throw ConvergenceError(os.str());
      }
      prev = loss.value;
      di -= opt.lr * loss.grad_inf;
      if (opt.fit_vehicle) dv -= opt.lr * loss.grad_veh;
    }
  }
  res.offsets.d_veh = dv;
  res.offsets.d_inf = di;
  res.final_loss = cec_loss(pb, dv, di, 0).value;
  if (init.granularity == OffsetGranularity::per_query_cell) {
    res.offsets.granularity = OffsetGranularity::per_query_cell;
    res.offsets.cell_veh.assign(init.cell_veh.size(), dv);
    res.offsets.cell_inf.assign(init.cell_inf.size(), di);
  }
  return res;
}

inline CalibrationOffsets cec_fit(const MultiScaleFeatures& f_veh, const MultiScaleFeatures& f_inf,
                                  const ProjectionContext& transforms, const CalibrationOffsets& init, double lr,
                                  int iters, double point_spacing = 0.5) {
  CecProblem pb;
  pb.f_veh = &f_veh;
  pb.f_inf = &f_inf;
  pb.ctx = transforms;
  pb.points = overlap_points(transforms, point_spacing);
  CecOptions opt;
  opt.lr = lr;
  opt.iters = iters;
  return cec_fit_detailed(pb, init, opt).offsets;
}

}  // namespace coopbev
