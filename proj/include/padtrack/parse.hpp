#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "padtrack/action.hpp"
#include "padtrack/frames.hpp"
#include "padtrack/geometry.hpp"
#include "padtrack/image.hpp"
#include "padtrack/locate.hpp"
#include "padtrack/synth.hpp"
#include "padtrack/track.hpp"

namespace padtrack {

// Reference parser settings. canonical_* is the crop size all parsing runs
// at; it must match the template art dimensions.
struct ParserConfig {
  double button_margin = 0.0;     // pressed must beat released by this much
  double blob_threshold = 0.25;   // normalized color distance for indicator px
  double percentile = 99.0;       // normalization percentile, (0, 100]
  int canonical_width = 256;
  int canonical_height = 128;

  void validate() const;
};

// One frame's parse: decisions plus the subpixel indicator centroids (crop
// px, image-space y down) retained for center estimation. A missing centroid
// means the segmentation came up empty and the grid fell back to (5, 5).
struct ParsedFrame {
  std::array<bool, kNumButtons> buttons{};
  GridReading grid;
  std::array<std::optional<Vec2>, 2> centroids;  // left, right

  bool operator==(const ParsedFrame& o) const = default;
};

// Per-button pressed/released decision by template matching. Each region is
// compared to both reference patches under a least-squares gain/bias fit
// (gain shared across channels, bias per channel) that absorbs overlay
// opacity and the local background shift; similarity is the negative mean
// absolute residual. Pressed wins iff it beats released by button_margin.
std::array<bool, kNumButtons> classify_buttons(const ImageU8& crop, const ControllerTemplate& tmpl,
                                               const ParserConfig& cfg = {});

// Joystick readout. A gain/bias fit of the crop against the indicator-free
// base art predicts how the indicator color looks under the current opacity
// and background; pixels inside each stick's reachable disc closer than
// blob_threshold to that prediction are segmented, and the largest
// 4-connected component's centroid maps to the 11x11 cell:
//   cell = round(5 + 5 * displacement / travel_radius), clamped to 0..10.
// Empty segmentation reads as centered (5, 5).
GridReading read_stick_grid(const ImageU8& crop, const ControllerTemplate& tmpl,
                            const ParserConfig& cfg = {});

// Buttons + grid + centroids in one pass.
ParsedFrame parse_frame(const ImageU8& crop, const ControllerTemplate& tmpl,
                        const ParserConfig& cfg = {});

// Parsing seam: implementations receive the previous frame's crop alongside
// the current one (equal images on frame 0) so temporal models can slot in.
class FrameParser {
 public:
  virtual ~FrameParser() = default;
  virtual ParsedFrame parse(const ImageU8& prev_crop, const ImageU8& crop) const = 0;
  virtual int canonical_width() const = 0;
  virtual int canonical_height() const = 0;
};

// Deterministic template-matching parser; ignores the previous frame.
class ReferenceParser final : public FrameParser {
 public:
  explicit ReferenceParser(ControllerTemplate tmpl, ParserConfig cfg = {});

  ParsedFrame parse(const ImageU8& prev_crop, const ImageU8& crop) const override;
  int canonical_width() const override { return cfg_.canonical_width; }
  int canonical_height() const override { return cfg_.canonical_height; }
  const ControllerTemplate& controller() const { return tmpl_; }
  const ParserConfig& config() const { return cfg_; }

 private:
  ControllerTemplate tmpl_;
  ParserConfig cfg_;
};

struct ParseMeta {
  std::string video_id = "video";
  double fps = 60.0;
  std::string controller_family;  // empty falls back to "unknown"
};

struct ParsedVideo {
  RawTrack raw;
  std::vector<std::array<std::optional<Vec2>, 2>> centroids;  // frame-aligned
};

// Crops every frame through the placement and parses in frame order. Frames
// are independent, so the loop is parallel; outputs land in per-frame slots
// and are identical for any job count. A frame that fails to load aborts
// with the underlying error (the frame source names the index).
ParsedVideo parse_video(const FrameSource& frames, const OverlayPlacement& placement,
                        const FrameParser& parser, const ParseMeta& meta = {});

// Convenience wrapper running the reference parser; the controller family is
// taken from the template.
ParsedVideo parse_video(const FrameSource& frames, const OverlayPlacement& placement,
                        const ControllerTemplate& tmpl, const ParserConfig& cfg = {},
                        const ParseMeta& meta = {});

// Nearest-rank percentile: sorted ascending, element ceil(pct/100 * n) - 1.
// The single percentile definition every normalization in the pipeline uses.
double nearest_rank_percentile(std::vector<double> values, double percentile);

struct CenterEstimate {
  std::array<Vec2, 2> centers{};   // crop px
  std::array<bool, 2> fallback{};  // true when a stick never read centered
};

// Per-stick mean of the subpixel centroids over frames whose grid cell is
// (5, 5). A stick with no such frame falls back to the template's nominal
// center and is flagged.
CenterEstimate estimate_centers(const ParsedVideo& video, const ControllerTemplate& tmpl);

// Maps raw centroids to normalized actions: per stick per axis, displacement
// from the estimated center is divided by the nearest-rank percentile of its
// absolute values over the video (scale under 1e-6 becomes 1), clamped to
// [-1, 1], with y flipped to stick-up-positive. Frames without a centroid
// count as zero displacement.
NormalizedTrack normalize_track(const ParsedVideo& video, const CenterEstimate& centers,
                                const ParserConfig& cfg = {});

// Blacks out every frame pixel the placed template's alpha footprint touches
// (the same sampling rule the renderer paints with); all other pixels pass
// through unchanged.
ImageU8 mask_overlay(const ImageU8& frame, const Affine2& placement,
                     const ControllerTemplate& tmpl);

// Per-video parse summary for downstream tooling.
struct ParseReport {
  std::string video_id;
  std::string template_name;
  std::string controller_family;
  int n_frames = 0;
  std::array<Vec2, 2> centers{};
  std::array<bool, 2> center_fallback{};
  std::array<double, 4> scales{1.0, 1.0, 1.0, 1.0};
  std::array<int, 2> frames_without_indicator{};
  double percentile = 99.0;
};

ParseReport build_parse_report(const ParsedVideo& video, const CenterEstimate& centers,
                               const NormalizedTrack& track, const OverlayPlacement& placement);

void save_parse_report(const std::string& path, const ParseReport& report);
ParseReport load_parse_report(const std::string& path);

}  // namespace padtrack
