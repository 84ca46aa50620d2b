#pragma once

#include <array>
#include <string>
#include <vector>

#include "padtrack/action.hpp"
#include "padtrack/geometry.hpp"

namespace padtrack {

// Per-frame Stage-2 outputs before normalization: button states plus raw
// 11x11 grid readings.
struct RawTrackFrame {
  std::array<bool, kNumButtons> buttons{};
  GridReading grid;

  bool operator==(const RawTrackFrame& o) const = default;
};

struct RawTrack {
  std::string video_id;
  double fps = 60.0;
  std::string controller_family;
  std::vector<RawTrackFrame> frames;

  void validate() const;
  bool operator==(const RawTrack& o) const = default;
};

// Fully normalized per-frame actions plus the per-video normalization state
// (stick centers in crop pixels and p99 scale divisors).
struct NormalizedTrack {
  std::string video_id;
  double fps = 60.0;
  std::string controller_family;
  std::vector<ActionFrame> frames;
  std::array<Vec2, 2> centers{};          // left, right stick centers (crop px)
  std::array<double, 4> scales{1, 1, 1, 1};  // per-axis divisors, > 0

  void validate() const;
  bool operator==(const NormalizedTrack& o) const = default;
};

// Line-delimited track format, one record per frame:
//   header  PADTRACK v1 <video_id> <fps> <controller_family>
//   meta    # kind raw            (raw tracks)
//           # kind normalized centers <4 reals> scales <4 reals>
//   record  <16 chars of 0/1> <4 ints 0..10>      (raw: l.cx l.cy r.cx r.cy)
//           <16 chars of 0/1> <4 reals>           (normalized: lx ly rx ry)
// UTF-8, LF line endings. Numbers are shortest-round-trip decimal, so
// read(write(t)) == t bit-exactly.
void write_raw_track(const RawTrack& track, const std::string& path);
RawTrack read_raw_track(const std::string& path);

void write_normalized_track(const NormalizedTrack& track, const std::string& path);
NormalizedTrack read_normalized_track(const std::string& path);

}  // namespace padtrack
