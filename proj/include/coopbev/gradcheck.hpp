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

// Central finite-difference checks for the differentiable kernels. Random
// instances are rejected and redrawn when any bilinear sample lands within
// `kink_margin` pixels of a grid line, where the interpolant is not
// differentiable.

#include "coopbev/fusion.hpp"

#include <chrono>
#include <functional>
#include <string>

namespace coopbev {

struct GradCheckOptions {
  int instances = 50;
  double step = 1e-6;
  double tolerance = 1e-4;
  double kink_margin = 1e-3;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  std::string name;
  int instances = 0;
  int failures = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;

  bool passed() const { return instances > 0 && failures == 0; }
};

/// ||a - n|| / max(||a||, ||n||, 1e-8).
inline double relative_error(const VecX& analytic, const VecX& numeric) {
  const double den = std::max({analytic.norm(), numeric.norm(), 1e-8});
  return (analytic - numeric).norm() / den;
}

/// Central differences of a scalar function of a vector.
inline VecX numeric_gradient(const std::function<double(const VecX&)>& f, const VecX& x, double h) {
  VecX g(x.size());
  VecX xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double x0 = xp(i);
    xp(i) = x0 + h;
    const double fp = f(xp);
    xp(i) = x0 - h;
    const double fm = f(xp);
    xp(i) = x0;
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

namespace detail {

inline BevFeatureMap random_map(int nx, int ny, int c, Rng& rng) {
  BevFeatureMap m(nx, ny, c);
  for (double& v : m.data) v = rng.normal();
  return m;
}

inline bool near_kink(double px, double margin) {
  const double f = px - std::floor(px);
  return f < margin || f > 1.0 - margin;
}

inline bool near_kink(const Vec2& px, double margin) { return near_kink(px.x(), margin) || near_kink(px.y(), margin); }

template <class Instance>
GradCheckReport run_checks(const std::string& name, const GradCheckOptions& opt, Instance&& one) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport r;
  r.name = name;
  Rng rng(opt.seed);
  for (int i = 0; i < opt.instances; ++i) {
    const double e = one(rng);
    ++r.instances;
    r.max_rel_error = std::max(r.max_rel_error, e);
    if (!(e <= opt.tolerance)) ++r.failures;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace detail

/// bilinear_sample: Jacobian w.r.t. the normalized location and the
/// gradient of <g, sample> w.r.t. the map values.
inline GradCheckReport gradcheck_bilinear(const GradCheckOptions& opt = {}) {
  return detail::run_checks("bilinear_sample", opt, [&](Rng& rng) {
    const int nx = rng.uniform_int(2, 9), ny = rng.uniform_int(2, 9), c = rng.uniform_int(1, 4);
    const BevFeatureMap f = detail::random_map(nx, ny, c, rng);
    Vec2 p;
    do p = Vec2(rng.uniform(-0.1, 1.1), rng.uniform(-0.1, 1.1));
    while (detail::near_kink(to_pixel(f, p), opt.kink_margin));
    VecX g(c);
    for (int k = 0; k < c; ++k) g(k) = rng.normal();

    const VecX a_p = bilinear_sample_jacobian(f, p).transpose() * g;
    const VecX n_p = numeric_gradient([&](const VecX& x) { return g.dot(bilinear_sample(f, Vec2(x(0), x(1)))); },
                                      Vec2(p), opt.step);

    BevFeatureMap gf(nx, ny, c);
    bilinear_sample_backward_features(f, p, g, gf);
    const VecX x0 = Eigen::Map<const VecX>(f.data.data(), static_cast<Eigen::Index>(f.data.size()));
    const VecX n_f = numeric_gradient(
        [&](const VecX& x) {
          BevFeatureMap m = f;
          std::copy(x.data(), x.data() + x.size(), m.data.begin());
          return g.dot(bilinear_sample(m, p));
        },
        x0, opt.step);
    const VecX a_f = Eigen::Map<const VecX>(gf.data.data(), static_cast<Eigen::Index>(gf.data.size()));
    return std::max(relative_error(a_p, n_p), relative_error(a_f, n_f));
  });
}

/// ms_deform_attn: gradient of <g, out> w.r.t. the reference point and all
/// feature values, on random instances with C <= 8, L <= 3, M <= 4, K <= 4.
inline GradCheckReport gradcheck_ms_deform_attn(const GradCheckOptions& opt = {}) {
  return detail::run_checks("ms_deform_attn", opt, [&](Rng& rng) {
    static constexpr std::array<std::pair<int, int>, 6> kShapes = {{{4, 1}, {4, 2}, {4, 4}, {6, 3}, {8, 2}, {8, 4}}};
    const auto [c, heads] = kShapes[rng.uniform_int(0, static_cast<int>(kShapes.size()) - 1)];
    const int levels = rng.uniform_int(1, 3), points = rng.uniform_int(1, 4);
    const auto params = DeformAttnParams::seeded(c, heads, levels, points, rng.next_u64());
    MultiScaleFeatures feats;
    int nx = rng.uniform_int(4, 6) * 2, ny = rng.uniform_int(4, 6) * 2;
    for (int l = 0; l < levels; ++l, nx = std::max(nx / 2, 1), ny = std::max(ny / 2, 1))
      feats.levels.push_back(detail::random_map(nx, ny, c, rng));
    VecX q(c), g(c);
    for (int k = 0; k < c; ++k) q(k) = rng.normal(), g(k) = rng.normal();
    const auto s = attention_sampling(params, q);

    auto kinked = [&](const Vec2& p) {
      for (int m = 0; m < heads; ++m)
        for (int l = 0; l < levels; ++l) {
          const Vec2 base = to_pixel(feats.levels[l], p);
          for (int k = 0; k < points; ++k) {
            const int j = params.sample_index(m, l, k);
            if (detail::near_kink(base + Vec2(s.offsets(2 * j), s.offsets(2 * j + 1)), opt.kink_margin)) return true;
          }
        }
      return false;
    };
    Vec2 p;
    do p = Vec2(rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95));
    while (kinked(p));

    const auto grad = ms_deform_attn_backward(q, p, feats, params, g);
    const VecX n_p = numeric_gradient(
        [&](const VecX& x) { return g.dot(ms_deform_attn(q, Vec2(x(0), x(1)), feats, params)); }, Vec2(p), opt.step);

    VecX a_f, x0;
    for (int l = 0; l < levels; ++l) {
      const auto& d = grad.grad_feats.levels[l].data;
      const auto& v = feats.levels[l].data;
      const Eigen::Index at = a_f.size();
      a_f.conservativeResize(at + static_cast<Eigen::Index>(d.size()));
      x0.conservativeResize(at + static_cast<Eigen::Index>(v.size()));
      std::copy(d.begin(), d.end(), a_f.data() + at);
      std::copy(v.begin(), v.end(), x0.data() + at);
    }
    const VecX n_f = numeric_gradient(
        [&](const VecX& x) {
          MultiScaleFeatures f = feats;
          const double* src = x.data();
          for (auto& lv : f.levels) {
            std::copy(src, src + lv.data.size(), lv.data.begin());
            src += lv.data.size();
          }
          return g.dot(ms_deform_attn(q, p, f, params));
        },
        x0, opt.step);
    return std::max(relative_error(grad.grad_p, n_p), relative_error(a_f, n_f));
  });
}

/// cec_loss: gradient w.r.t. both global offsets (meters) on small random
/// two-sensor problems with random level weights.
inline GradCheckReport gradcheck_cec_loss(const GradCheckOptions& opt = {}) {
  return detail::run_checks("cec_loss", opt, [&](Rng& rng) {
    const int levels = rng.uniform_int(1, 3), c = rng.uniform_int(1, 3);
    MultiScaleFeatures fv, fi;
    int nx = 16, ny = 16;
    for (int l = 0; l < levels; ++l, nx /= 2, ny /= 2) {
      fv.levels.push_back(detail::random_map(nx, ny, c, rng));
      fi.levels.push_back(detail::random_map(nx, ny, c, rng));
    }
    CecProblem pb;
    pb.f_veh = &fv;
    pb.f_inf = &fi;
    pb.ctx.roi_veh = Roi{-8.0, 8.0, -8.0, 8.0, -5.0, 3.0};
    pb.ctx.roi_inf = Roi{0.0, 16.0, -8.0, 8.0, -5.0, 3.0};
    pb.ctx.bev2veh = RigidTransform2D::from_yaw(rng.uniform(-0.2, 0.2), Vec2(rng.uniform(-1, 1), rng.uniform(-1, 1)));
    pb.ctx.bev2inf = RigidTransform2D::from_yaw(rng.uniform(-0.5, 0.5), Vec2(rng.uniform(7, 9), rng.uniform(-1, 1)));
    for (int l = 0; l < levels; ++l) pb.level_weights.push_back(rng.uniform(0.2, 2.0));
    const Vec2 dv(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    const Vec2 di(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));

    auto kinked = [&](const Vec2& b) {
      const Vec2 uv = normalize_point(compensate_reference_point(b, pb.ctx.bev2veh, dv), pb.ctx.roi_veh).coord;
      const Vec2 ui = normalize_point(compensate_reference_point(b, pb.ctx.bev2inf, di), pb.ctx.roi_inf).coord;
      for (int l = 0; l < levels; ++l)
        if (detail::near_kink(to_pixel(fv.levels[l], uv), opt.kink_margin) ||
            detail::near_kink(to_pixel(fi.levels[l], ui), opt.kink_margin))
          return true;
      return false;
    };
    const int n_points = rng.uniform_int(3, 8);
    while (static_cast<int>(pb.points.size()) < n_points) {
      const Vec2 b(rng.uniform(-6, 6), rng.uniform(-6, 6));
      if (!kinked(b)) pb.points.push_back(b);
    }

    const CecLoss loss = cec_loss(pb, dv, di);
    VecX a(4), x0(4);
    a << loss.grad_veh, loss.grad_inf;
    x0 << dv, di;
    const VecX n = numeric_gradient(
        [&](const VecX& x) { return cec_loss(pb, Vec2(x(0), x(1)), Vec2(x(2), x(3))).value; }, x0, opt.step);
    return relative_error(a, n);
  });
}

}  // namespace coopbev
