#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "padtrack/action.hpp"
#include "padtrack/locate.hpp"
#include "padtrack/parse.hpp"
#include "padtrack/synth.hpp"
#include "padtrack/track.hpp"

namespace padtrack {

// One curation window over a track; frames are half-open [start, end).
struct Segment {
  std::string video_id;
  int start_frame = 0;
  int end_frame = 0;
  double density = 0.0;  // non-null timesteps / length, exact
  bool kept = false;

  bool operator==(const Segment& o) const = default;
};

// A frame counts as null when no button is pressed and both sticks quantize
// to the center cell.
bool is_null_frame(const RawTrackFrame& frame);
bool is_null_frame(const ActionFrame& frame);

// Fraction of non-null timesteps over [start, end); empty or out-of-range
// slices are rejected.
double action_density(const RawTrack& track, int start, int end);
double action_density(const NormalizedTrack& track, int start, int end);

// Consecutive non-overlapping windows of segment_len frames; the final
// partial window is kept as its own segment. Densities are filled in,
// kept flags are left to filter_segments.
std::vector<Segment> segment_track(const RawTrack& track, int segment_len = 600);
std::vector<Segment> segment_track(const NormalizedTrack& track, int segment_len = 600);

struct FilterResult {
  std::vector<Segment> kept;
  std::vector<Segment> discarded;
  double kept_fraction = 0.0;  // of total timesteps, by duration
};

// Keep rule: density >= 0.5, boundary inclusive.
FilterResult filter_segments(const std::vector<Segment>& segments);

// 1 - SSE/SST. Zero truth variance is undefined: returns 1 when the
// prediction is exact, -infinity otherwise.
double r2_score(const std::vector<double>& predicted, const std::vector<double>& truth);

// Fraction of frames where all 16 buttons match.
double button_frame_accuracy(const std::vector<std::array<bool, kNumButtons>>& predicted,
                             const std::vector<std::array<bool, kNumButtons>>& truth);

// Per-button match rates, for diagnosis.
std::array<double, kNumButtons> per_button_accuracy(
    const std::vector<std::array<bool, kNumButtons>>& predicted,
    const std::vector<std::array<bool, kNumButtons>>& truth);

std::vector<std::array<bool, kNumButtons>> buttons_of(const RawTrack& track);
std::vector<std::array<bool, kNumButtons>> buttons_of(const NormalizedTrack& track);

// Mean joystick R^2 (over axes with defined scores) and all-16 button
// accuracy for a group of videos.
struct MetricGroup {
  std::string name;
  double r2 = 0.0;
  double button_accuracy = 0.0;
  int n_videos = 0;
};

struct EvalReport {
  std::uint64_t master_seed = 0;
  int n_videos = 0;
  MetricGroup overall;
  std::vector<MetricGroup> per_family;  // manifest family order
  std::vector<MetricGroup> per_tier;    // manifest tier order
  std::array<double, kNumButtons> per_button{};
  std::vector<std::string> not_found;  // video ids where locate failed
  int r2_undefined_axes = 0;           // zero-variance truth axes skipped
};

struct EvalConfig {
  LocateConfig locate;
  ParserConfig parser;
  int segment_len = 600;
};

struct EvalOutcome {
  EvalReport report;
  std::vector<Segment> segments;  // all videos, manifest entry order
};

// Runs locate + parse + normalize end-to-end over every benchmark entry and
// scores it against the stored truth track. Truth axes are the grid cells
// mapped back to stick units and normalized by the same percentile rule the
// parser applies, so both sides live on the same scale. Videos whose overlay
// is never found score zero and are listed in not_found. Per-video work is
// parallel; aggregation runs in manifest order, so the report is identical
// for any job count.
EvalOutcome evaluate_parser(const BenchmarkManifest& manifest, const std::string& root_dir,
                            const EvalConfig& cfg = {});

void save_eval_report(const std::string& path, const EvalReport& report);
EvalReport load_eval_report(const std::string& path);

// One JSON object per line.
void write_segments_jsonl(const std::string& path, const std::vector<Segment>& segments);
std::vector<Segment> read_segments_jsonl(const std::string& path);

}  // namespace padtrack
