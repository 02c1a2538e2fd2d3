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

#include "coopbev/pillars.hpp"
#include "coopbev/scenario.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace coopbev {

// Logical time is kept in integer microseconds so that latency and frame
// arithmetic (e.g. 200 ms at 10 Hz) is exact.
using Micros = std::int64_t;

inline Micros to_micros(double seconds) { return static_cast<Micros>(std::llround(seconds * 1e6)); }
inline double to_seconds(Micros us) { return static_cast<double>(us) * 1e-6; }
inline Micros ms_to_micros(double ms) { return static_cast<Micros>(std::llround(ms * 1e3)); }

enum class PayloadKind : std::uint8_t { raw = 0, feature = 1, instance = 2 };

inline std::string to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::raw: return "raw";
    case PayloadKind::feature: return "feature";
    case PayloadKind::instance: return "instance";
  }
  return "feature";
}

struct ChannelConfig {
  double latency_ms = 0.0;
  /// Extra delay drawn uniformly from [0, jitter_ms] per message.
  double jitter_ms = 0.0;
  double drop_prob = 0.0;
  /// Size-only knob: reported wire sizes are divided by this factor.
  double compression_factor = 1.0;

  void validate() const {
    if (!(latency_ms >= 0) || !std::isfinite(latency_ms)) throw ConfigError("channel.latency_ms", "must be >= 0");
    if (!(jitter_ms >= 0) || !std::isfinite(jitter_ms)) throw ConfigError("channel.jitter_ms", "must be >= 0");
    if (!(drop_prob >= 0 && drop_prob <= 1)) throw ConfigError("channel.drop_prob", "must be in [0,1]");
    if (!(compression_factor >= 1) || !std::isfinite(compression_factor))
      throw ConfigError("channel.compression_factor", "must be >= 1");
  }
};

struct V2XMessage {
  PayloadKind payload_kind = PayloadKind::feature;
  std::vector<std::uint8_t> payload;
  Micros t_send = 0;
  Micros t_arrive = 0;
  std::size_t size_bytes = 0;
  bool dropped = false;
  /// Capture frame of the infrastructure data and the pose the
  /// infrastructure reports for itself at that time; both travel with the
  /// payload and are therefore delayed together.
  int frame_index = 0;
  RigidTransform2D reported_pose;

  double t_send_s() const { return to_seconds(t_send); }
  double t_arrive_s() const { return to_seconds(t_arrive); }
};

// ---------------------------------------------------------------------------
// Wire format (all little-endian):
//
//   0   magic "CBV2"
//   4   u16 version (1)
//   6   u8  payload kind
//   7   u8  L (number of levels)
//   8   L x (u32 nx, u32 ny)
//   8+8L      u32 C
//   12+8L     u32 CRC32 of the body
//   16+8L     body: float32 values, level-major, then row-major cells with
//             channels innermost (the in-memory order of BevFeatureMap)

inline constexpr std::uint16_t kWireVersion = 1;

inline std::size_t wire_header_size(int levels) { return 16 + 8 * static_cast<std::size_t>(levels); }

inline std::vector<std::uint8_t> serialize_features(const MultiScaleFeatures& f) {
  const int L = f.num_levels();
  if (L < 1 || L > 255) throw DimensionError("serialize_features: need 1..255 levels");
  const int C = f.channels();
  std::size_t n = 0;
  for (const auto& lv : f.levels) {
    require_dims(lv.channels == C, "serialize_features: levels disagree on channels");
    n += lv.data.size();
  }
  std::vector<std::uint8_t> body;
  body.reserve(4 * n);
  for (const auto& lv : f.levels)
    for (double v : lv.data) le::put_f32(body, static_cast<float>(v));

  std::vector<std::uint8_t> b;
  b.reserve(wire_header_size(L) + body.size());
  for (char ch : {'C', 'B', 'V', '2'}) b.push_back(static_cast<std::uint8_t>(ch));
  le::put_u16(b, kWireVersion);
  b.push_back(static_cast<std::uint8_t>(PayloadKind::feature));
  b.push_back(static_cast<std::uint8_t>(L));
  for (const auto& lv : f.levels) {
    le::put_u32(b, static_cast<std::uint32_t>(lv.nx));
    le::put_u32(b, static_cast<std::uint32_t>(lv.ny));
  }
  le::put_u32(b, static_cast<std::uint32_t>(C));
  le::put_u32(b, crc32(body));
  b.insert(b.end(), body.begin(), body.end());
  return b;
}

/// Inverse of serialize_features. Throws std::runtime_error on a bad magic,
/// version, length or checksum.
inline MultiScaleFeatures deserialize_features(std::span<const std::uint8_t> b) {
  if (b.size() < 16 || b[0] != 'C' || b[1] != 'B' || b[2] != 'V' || b[3] != '2')
    throw std::runtime_error("v2x wire: bad magic");
  if (le::get_u16(b, 4) != kWireVersion) throw std::runtime_error("v2x wire: unsupported version");
  if (b[6] != static_cast<std::uint8_t>(PayloadKind::feature)) throw std::runtime_error("v2x wire: not a feature payload");
  const int L = b[7];
  const std::size_t head = wire_header_size(L);
  if (L < 1 || b.size() < head) throw std::runtime_error("v2x wire: truncated header");
  const int C = static_cast<int>(le::get_u32(b, 8 + 8 * L));
  MultiScaleFeatures f;
  std::size_t n = 0;
  for (int l = 0; l < L; ++l) {
    const int nx = static_cast<int>(le::get_u32(b, 8 + 8 * l));
    const int ny = static_cast<int>(le::get_u32(b, 12 + 8 * l));
    f.levels.emplace_back(nx, ny, C);
    n += f.levels.back().data.size();
  }
  if (b.size() != head + 4 * n) throw std::runtime_error("v2x wire: payload length mismatch");
  if (crc32(b.subspan(head)) != le::get_u32(b, 12 + 8 * L)) throw std::runtime_error("v2x wire: checksum mismatch");
  std::size_t at = head;
  for (auto& lv : f.levels)
    for (double& v : lv.data) {
      v = le::get_f32(b, at);
      at += 4;
    }
  return f;
}

// ---------------------------------------------------------------------------
// Payload accounting (body bytes, header excluded except for instances)

inline constexpr std::size_t kInstanceHeaderBytes = 16;
/// id u32, class u32, then x y z l w h yaw score as float32.
inline constexpr std::size_t kInstanceRecordBytes = 40;

inline std::size_t raw_payload_size(std::size_t n_points) { return n_points * 3 * 4; }

inline std::size_t feature_payload_size(const MultiScaleFeatures& f) {
  std::size_t n = 0;
  for (const auto& lv : f.levels) n += static_cast<std::size_t>(lv.nx) * lv.ny * lv.channels * 4;
  return n;
}

inline std::size_t feature_payload_size(const std::vector<std::pair<int, int>>& dims, int channels) {
  std::size_t n = 0;
  for (const auto& [nx, ny] : dims) n += static_cast<std::size_t>(nx) * ny * channels * 4;
  return n;
}

inline std::size_t instance_payload_size(std::size_t n_objects) {
  return kInstanceHeaderBytes + n_objects * kInstanceRecordBytes;
}

// ---------------------------------------------------------------------------
// Transmission and receiver policy

/// Serializes `feats` and stamps the send/arrival times. A dropped message
/// keeps its timestamps but has no payload and is never consumed.
inline V2XMessage transmit(const MultiScaleFeatures& feats, Micros t_send, const ChannelConfig& cfg,
                           std::uint64_t rng_seed) {
  cfg.validate();
  V2XMessage m;
  m.payload_kind = PayloadKind::feature;
  m.t_send = t_send;
  Rng rng(rng_seed);
  const double jitter = cfg.jitter_ms > 0 ? rng.uniform(0.0, cfg.jitter_ms) : 0.0;
  const double u = rng.uniform();
  m.t_arrive = t_send + ms_to_micros(cfg.latency_ms) + ms_to_micros(jitter);
  if (cfg.drop_prob > 0 && u < cfg.drop_prob) {
    m.dropped = true;
    return m;
  }
  m.payload = serialize_features(feats);
  m.size_bytes = m.payload.size();
  return m;
}

/// The arrived, undropped message with the largest t_send; ties go to the
/// earlier mailbox entry.
inline std::optional<V2XMessage> latest_available(const std::vector<V2XMessage>& mailbox, Micros t_now) {
  const V2XMessage* best = nullptr;
  for (const auto& m : mailbox) {
    if (m.dropped || m.t_arrive > t_now) continue;
    if (best == nullptr || m.t_send > best->t_send) best = &m;
  }
  if (best == nullptr) return std::nullopt;
  return *best;
}

/// Event queue between the infrastructure sender and the vehicle receiver.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(V2XMessage msg) = 0;
  virtual std::optional<V2XMessage> receive(Micros t_now) = 0;
};

/// Fixed-latency channel. Messages older than the last consumed one are
/// discarded on receive, so the mailbox stays small.
class LatencyChannel final : public Channel {
 public:
  explicit LatencyChannel(ChannelConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void send(V2XMessage msg) override {
    auto it = mailbox_.begin();
    while (it != mailbox_.end() && it->t_arrive <= msg.t_arrive) ++it;
    mailbox_.insert(it, std::move(msg));
  }

  std::optional<V2XMessage> receive(Micros t_now) override {
    auto m = latest_available(mailbox_, t_now);
    if (m) std::erase_if(mailbox_, [&](const V2XMessage& x) { return x.t_send <= m->t_send && x.t_arrive <= t_now; });
    return m;
  }

  const ChannelConfig& config() const { return cfg_; }
  std::size_t pending() const { return mailbox_.size(); }

 private:
  ChannelConfig cfg_;
  std::vector<V2XMessage> mailbox_;
};

class ChannelAccessError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Stub that fails on any use; stands in for the link in vehicle-only runs.
class ForbiddenChannel final : public Channel {
 public:
  void send(V2XMessage) override { throw ChannelAccessError("channel used in a vehicle-only run (send)"); }
  std::optional<V2XMessage> receive(Micros) override {
    throw ChannelAccessError("channel used in a vehicle-only run (receive)");
  }
};

}  // namespace coopbev
