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
#include "coopbev/scenario.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace coopbev {

// ---------------------------------------------------------------------------
// Feature containers

/// Dense BEV grid, x fastest: index = (iy * nx + ix) * channels + c.
struct BevFeatureMap {
  int nx = 0;
  int ny = 0;
  int channels = 0;
  std::vector<double> data;

  BevFeatureMap() = default;
  BevFeatureMap(int nx_, int ny_, int channels_, double fill = 0.0)
      : nx(nx_), ny(ny_), channels(channels_), data(static_cast<std::size_t>(nx_) * ny_ * channels_, fill) {
    require_dims(nx_ > 0 && ny_ > 0 && channels_ > 0, "BevFeatureMap: dims must be positive");
  }

  bool empty() const { return data.empty(); }
  std::size_t offset(int ix, int iy) const { return (static_cast<std::size_t>(iy) * nx + ix) * channels; }
  double& at(int ix, int iy, int c) { return data[offset(ix, iy) + c]; }
  double at(int ix, int iy, int c) const { return data[offset(ix, iy) + c]; }
  const double* cell(int ix, int iy) const { return data.data() + offset(ix, iy); }
  double* cell(int ix, int iy) { return data.data() + offset(ix, iy); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
  double channel_mean(int c) const {
    double s = 0.0;
    for (std::size_t i = c; i < data.size(); i += channels) s += data[i];
    return s / (static_cast<double>(nx) * ny);
  }
  bool operator==(const BevFeatureMap&) const = default;
};

/// Feature pyramid; level l has dims (nx / 2^l, ny / 2^l).
struct MultiScaleFeatures {
  std::vector<BevFeatureMap> levels;

  int num_levels() const { return static_cast<int>(levels.size()); }
  int channels() const { return levels.empty() ? 0 : levels.front().channels; }
  bool operator==(const MultiScaleFeatures&) const = default;
};

/// Single-channel pyramid taken from channel `c` of every level.
inline MultiScaleFeatures channel_slice(const MultiScaleFeatures& f, int c) {
  MultiScaleFeatures out;
  for (const auto& lvl : f.levels) {
    require_dims(c >= 0 && c < lvl.channels, "channel_slice: channel out of range");
    BevFeatureMap m(lvl.nx, lvl.ny, 1);
    for (int iy = 0; iy < lvl.ny; ++iy)
      for (int ix = 0; ix < lvl.nx; ++ix) m.at(ix, iy, 0) = lvl.at(ix, iy, c);
    out.levels.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Voxelization

struct PillarKey {
  int ix = 0;
  int iy = 0;
  auto operator<=>(const PillarKey&) const = default;
};

struct PillarGrid {
  Roi roi;
  Vec3 voxel_size = Vec3(0.2, 0.2, 8.0);
  int nx = 0;
  int ny = 0;
  std::map<PillarKey, std::vector<Vec3>> cells;
  std::size_t dropped = 0;

  std::size_t point_count() const {
    std::size_t n = 0;
    for (const auto& [k, pts] : cells) n += pts.size();
    return n;
  }
  Vec2 cell_center(int ix, int iy) const {
    return {roi.x_min + (ix + 0.5) * voxel_size.x(), roi.y_min + (iy + 0.5) * voxel_size.y()};
  }
};

inline int grid_cells(double extent, double voxel) { return static_cast<int>(std::lround(extent / voxel)); }

/// Bins points into BEV pillars. x/y use half-open [min, max) so every kept
/// point falls into exactly one cell; z is a single closed slab.
inline PillarGrid voxelize(std::span<const Vec3> points, const Roi& roi, const Vec3& voxel_size) {
  if (!(voxel_size.x() > 0 && voxel_size.y() > 0 && voxel_size.z() > 0))
    throw ConfigError("pillars.voxel_size", "must be positive");
  roi.validate("pillars.roi");
  PillarGrid g;
  g.roi = roi;
  g.voxel_size = voxel_size;
  g.nx = grid_cells(roi.width(), voxel_size.x());
  g.ny = grid_cells(roi.height(), voxel_size.y());
  for (const auto& p : points) {
    if (p.z() < roi.z_min || p.z() > roi.z_max) {
      ++g.dropped;
      continue;
    }
    const int ix = static_cast<int>(std::floor((p.x() - roi.x_min) / voxel_size.x()));
    const int iy = static_cast<int>(std::floor((p.y() - roi.y_min) / voxel_size.y()));
    if (ix < 0 || iy < 0 || ix >= g.nx || iy >= g.ny) {
      ++g.dropped;
      continue;
    }
    g.cells[{ix, iy}].push_back(p);
  }
  return g;
}

inline PillarGrid voxelize(const PointCloud& cloud, const Roi& roi, const Vec3& voxel_size) {
  return voxelize(std::span<const Vec3>(cloud.points), roi, voxel_size);
}

// ---------------------------------------------------------------------------
// Encoder

inline constexpr int kPillarInputDim = 9;

/// Stand-in for trained PillarFeatureNet / backbone parameters.
struct EncoderWeights {
  MatX pillar_linear;  // channels x 9
  VecX pillar_bias;    // channels
  /// Per-level separable smoothing strength a: 1D kernel [a, 1 - 2a, a].
  std::vector<double> smoothing;
  std::uint64_t seed = 0;

  int channels() const { return static_cast<int>(pillar_bias.size()); }

  /// Random weights. With `occupancy_channel` set, channel 0 has zero weights
  /// and unit bias so it reads 1 on every non-empty pillar.
  static EncoderWeights seeded(int channels, int levels, std::uint64_t seed, bool occupancy_channel = true,
                               double smoothing_strength = 0.25) {
    if (channels < 1) throw ConfigError("model.channels", "must be >= 1");
    if (levels < 1) throw ConfigError("model.levels", "must be >= 1");
    EncoderWeights w;
    w.seed = seed;
    Rng rng(derive_seed(seed, 0x91A7));
    w.pillar_linear.resize(channels, kPillarInputDim);
    w.pillar_bias.resize(channels);
    const double scale = 1.0 / std::sqrt(static_cast<double>(kPillarInputDim));
    for (int c = 0; c < channels; ++c) {
      for (int j = 0; j < kPillarInputDim; ++j) w.pillar_linear(c, j) = rng.normal() * scale;
      w.pillar_bias(c) = 0.1 * rng.normal();
    }
    if (occupancy_channel) {
      w.pillar_linear.row(0).setZero();
      w.pillar_bias(0) = 1.0;
    }
    w.smoothing.assign(levels, smoothing_strength);
    w.smoothing[0] = 0.0;
    return w;
  }

  void validate() const {
    require_dims(pillar_linear.cols() == kPillarInputDim, "EncoderWeights: pillar_linear must have 9 columns");
    require_dims(pillar_linear.rows() == pillar_bias.size(), "EncoderWeights: bias size != channels");
    require_dims(pillar_linear.allFinite() && pillar_bias.allFinite(), "EncoderWeights: non-finite weights");
    for (double a : smoothing) require_dims(a >= 0.0 && a <= 0.5, "EncoderWeights: smoothing must be in [0, 0.5]");
  }
};

/// Nine-feature point augmentation: x, y, z, offsets from the pillar
/// centroid, offsets from the pillar center, and the point range.
inline Eigen::Matrix<double, kPillarInputDim, 1> augment_point(const Vec3& p, const Vec3& centroid,
                                                               const Vec2& pillar_center) {
  Eigen::Matrix<double, kPillarInputDim, 1> a;
  a << p.x(), p.y(), p.z(), p.x() - centroid.x(), p.y() - centroid.y(), p.z() - centroid.z(), p.x() - pillar_center.x(),
      p.y() - pillar_center.y(), p.norm();
  return a;
}

inline BevFeatureMap pillar_encode(const PillarGrid& grid, const EncoderWeights& w) {
  w.validate();
  const int channels = w.channels();
  BevFeatureMap out(grid.nx, grid.ny, channels, 0.0);
  VecX h(channels);
  for (const auto& [key, pts] : grid.cells) {
    if (pts.empty()) continue;
    Vec3 centroid = Vec3::Zero();
    for (const auto& p : pts) centroid += p;
    centroid /= static_cast<double>(pts.size());
    const Vec2 center = grid.cell_center(key.ix, key.iy);
    double* dst = out.cell(key.ix, key.iy);
    // ReLU outputs are >= 0, so a zero-initialised max-pool is exact.
    for (const auto& p : pts) {
      h.noalias() = w.pillar_linear * augment_point(p, centroid, center) + w.pillar_bias;
      for (int c = 0; c < channels; ++c) dst[c] = std::max(dst[c], std::max(0.0, h(c)));
    }
  }
  return out;
}

/// Separable [a, 1-2a, a] smoothing with symmetric edge padding. Preserves
/// the per-channel sum exactly (up to rounding).
inline BevFeatureMap smooth(const BevFeatureMap& in, double a) {
  if (a == 0.0) return in;
  const double b = 1.0 - 2.0 * a;
  BevFeatureMap tmp(in.nx, in.ny, in.channels), out(in.nx, in.ny, in.channels);
  const int C = in.channels;
  for (int iy = 0; iy < in.ny; ++iy)
    for (int ix = 0; ix < in.nx; ++ix) {
      const double* l = in.cell(std::max(ix - 1, 0), iy);
      const double* m = in.cell(ix, iy);
      const double* r = in.cell(std::min(ix + 1, in.nx - 1), iy);
      double* d = tmp.cell(ix, iy);
      for (int c = 0; c < C; ++c) d[c] = a * l[c] + b * m[c] + a * r[c];
    }
  for (int iy = 0; iy < in.ny; ++iy)
    for (int ix = 0; ix < in.nx; ++ix) {
      const double* l = tmp.cell(ix, std::max(iy - 1, 0));
      const double* m = tmp.cell(ix, iy);
      const double* r = tmp.cell(ix, std::min(iy + 1, in.ny - 1));
      double* d = out.cell(ix, iy);
      for (int c = 0; c < C; ++c) d[c] = a * l[c] + b * m[c] + a * r[c];
    }
  return out;
}

inline BevFeatureMap average_pool2(const BevFeatureMap& in) {
  require_dims(in.nx % 2 == 0 && in.ny % 2 == 0, "average_pool2: dims must be even");
  BevFeatureMap out(in.nx / 2, in.ny / 2, in.channels);
  for (int iy = 0; iy < out.ny; ++iy)
    for (int ix = 0; ix < out.nx; ++ix) {
      const double* a = in.cell(2 * ix, 2 * iy);
      const double* b = in.cell(2 * ix + 1, 2 * iy);
      const double* c = in.cell(2 * ix, 2 * iy + 1);
      const double* d = in.cell(2 * ix + 1, 2 * iy + 1);
      double* o = out.cell(ix, iy);
      for (int k = 0; k < in.channels; ++k) o[k] = 0.25 * ((a[k] + b[k]) + (c[k] + d[k]));
    }
  return out;
}

/// Level 0 is the base smoothed with `smoothing[0]`; level l is the 2x2
/// average pool of level l-1 smoothed with `smoothing[l]` (0 when absent).
inline MultiScaleFeatures build_pyramid(const BevFeatureMap& base, const EncoderWeights& w, int levels) {
  if (levels < 1) throw ConfigError("model.levels", "must be >= 1");
  const int div = 1 << (levels - 1);
  require_dims(base.nx % div == 0 && base.ny % div == 0,
               "build_pyramid: base dims must be divisible by 2^(L-1)");
  auto strength = [&](int l) { return l < static_cast<int>(w.smoothing.size()) ? w.smoothing[l] : 0.0; };
  MultiScaleFeatures out;
  out.levels.push_back(smooth(base, strength(0)));
  for (int l = 1; l < levels; ++l) out.levels.push_back(smooth(average_pool2(out.levels.back()), strength(l)));
  return out;
}

// ---------------------------------------------------------------------------
// Feature-map dump: 32-byte header then float32 little-endian, x fastest.
//
//   0  magic "CBFM"   4  u16 version (1)   6  u16 reserved
//   8  u32 nx        12  u32 ny           16  u32 channels
//  20  u32 level     24  u64 reserved (0)

namespace le {

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f32(std::vector<std::uint8_t>& b, float f) { put_u32(b, std::bit_cast<std::uint32_t>(f)); }

inline std::uint16_t get_u16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}
inline std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}
inline float get_f32(std::span<const std::uint8_t> b, std::size_t at) { return std::bit_cast<float>(get_u32(b, at)); }

}  // namespace le

inline constexpr std::size_t kFeatureDumpHeader = 32;

inline std::vector<std::uint8_t> dump_feature_map(const BevFeatureMap& m, int level) {
  std::vector<std::uint8_t> b;
  b.reserve(kFeatureDumpHeader + m.data.size() * 4);
  for (char ch : {'C', 'B', 'F', 'M'}) b.push_back(static_cast<std::uint8_t>(ch));
  le::put_u16(b, 1);
  le::put_u16(b, 0);
  le::put_u32(b, static_cast<std::uint32_t>(m.nx));
  le::put_u32(b, static_cast<std::uint32_t>(m.ny));
  le::put_u32(b, static_cast<std::uint32_t>(m.channels));
  le::put_u32(b, static_cast<std::uint32_t>(level));
  le::put_u32(b, 0);
  le::put_u32(b, 0);
  for (double v : m.data) le::put_f32(b, static_cast<float>(v));
  return b;
}

inline std::pair<BevFeatureMap, int> load_feature_map(std::span<const std::uint8_t> b) {
  if (b.size() < kFeatureDumpHeader || b[0] != 'C' || b[1] != 'B' || b[2] != 'F' || b[3] != 'M')
    throw std::runtime_error("feature dump: bad magic");
  if (le::get_u16(b, 4) != 1) throw std::runtime_error("feature dump: unsupported version");
  const int nx = static_cast<int>(le::get_u32(b, 8));
  const int ny = static_cast<int>(le::get_u32(b, 12));
  const int c = static_cast<int>(le::get_u32(b, 16));
  const int level = static_cast<int>(le::get_u32(b, 20));
  BevFeatureMap m(nx, ny, c);
  if (b.size() != kFeatureDumpHeader + m.data.size() * 4) throw std::runtime_error("feature dump: truncated payload");
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = le::get_f32(b, kFeatureDumpHeader + 4 * i);
  return {std::move(m), level};
}

}  // namespace coopbev
