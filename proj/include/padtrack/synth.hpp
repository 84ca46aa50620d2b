#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "padtrack/action.hpp"
#include "padtrack/geometry.hpp"
#include "padtrack/image.hpp"
#include "padtrack/rng.hpp"

namespace padtrack {

// One button control: an axis-aligned region in template pixels plus two
// same-sized RGBA appearance patches. Pressed and released looks differ in
// structure (filled vs outlined), not just intensity, so classification stays
// possible after opacity and lighting changes.
struct ButtonControl {
  std::string label;
  Rect region;
  ImageU8 released;  // RGBA, region-sized
  ImageU8 pressed;   // RGBA, region-sized
};

struct StickControl {
  Vec2 center;              // template px
  double travel_radius;     // px, full deflection distance of the indicator
  double indicator_radius;  // px
  std::array<std::uint8_t, 3> indicator_color{};
};

// Controller overlay art with exactly known geometry. base_image carries the
// all-released, indicator-free look; the renderer adds pressed patches and
// stick indicators per frame.
struct ControllerTemplate {
  std::string name;
  std::string family;  // xboxlike | playstationlike | generic
  ImageU8 base_image;  // RGBA
  std::array<ButtonControl, kNumButtons> buttons;
  std::array<StickControl, 2> sticks;  // left, right

  // Checks region bounds, pairwise disjointness (including the sticks'
  // travel-disc footprints) and patch dimensions.
  void validate() const;
};

// The family names shipped by the procedural generator.
std::vector<std::string> template_families();

// Deterministically draws one template of the given family; the seed varies
// colors, never geometry.
ControllerTemplate make_template(const std::string& family, std::uint64_t seed);

void save_template(const std::string& path, const ControllerTemplate& tmpl);
ControllerTemplate load_template(const std::string& path);

// How one overlay instance is placed into frames.
struct RenderSpec {
  Affine2 placement;     // template -> frame px
  double opacity = 1.0;  // (0, 1]
  int jpeg_quality = 0;  // 0 = lossless, else 10..100
  int frame_width = 640;
  int frame_height = 360;

  void validate() const;  // non-degenerate, |scale| in [0.1, 2], opacity in (0, 1]
};

// Composites the overlay in the given action state onto a background frame.
// Returns the composited frame plus the tight axis-aligned bound of the
// transformed template rectangle, clamped to the frame.
std::pair<ImageU8, Rect> render_overlay(const ImageU8& background, const ControllerTemplate& tmpl,
                                        const ActionFrame& action, const RenderSpec& spec);

// Procedural gameplay-like background: gradient, drifting shapes, pixel noise.
// Pure function of (seed, frame_index, w, h); safe to evaluate in any order.
ImageU8 make_background(int width, int height, std::uint64_t seed, int frame_index);

// Per-frame action generation. Iid mode samples each button independently and
// places stick axes on the 11-point grid lattice (so quantized truth is exact);
// scripted mode replays a fixed sequence.
struct ActionScript {
  enum class Mode { kIid, kScripted };
  Mode mode = Mode::kIid;
  double button_prob = 0.08;        // per-button press probability per frame
  double stick_center_prob = 0.55;  // probability a stick rests at (0, 0)
  std::vector<ActionFrame> script;  // scripted mode, cycled if shorter than n

  std::vector<ActionFrame> generate(int n_frames, Rng& rng) const;
};

// Per-video randomization ranges for RenderSpec.
struct SpecRange {
  double opacity_lo = 0.8, opacity_hi = 1.0;
  double scale_lo = 0.8, scale_hi = 1.2;
  int quality_lo = 90, quality_hi = 100;  // 0,0 = no re-encode
  double rotation_deg = 0.0;              // max |rotation|
  bool integer_translation = false;       // pixel-exact placement for oracle tiers
  int frame_width = 640;
  int frame_height = 360;

  void validate() const;
};

struct SynthVideo {
  std::string video_id;
  std::vector<ImageU8> frames;      // RGB
  std::vector<ActionFrame> truth;   // continuous stick displacements, y up
  RenderSpec truth_placement;
  Rect overlay_bbox;                // constant: placement is static per video
  std::string template_name;
  std::string family;
  std::uint64_t seed = 0;
  double fps = 60.0;
};

// Renders a full labeled video. Everything (placement, actions, backgrounds)
// derives from the seed, so equal seeds give byte-identical output.
SynthVideo synth_video(const ControllerTemplate& tmpl, int n_frames, const ActionScript& script,
                       const SpecRange& range, std::uint64_t seed);

// Writes frames as frame_%06d.png plus truth.track (raw grid quantization of
// the truth) and truth.json (placement, bbox, ids) into dir.
void write_video(const std::string& dir, const SynthVideo& video);

struct TierConfig {
  std::string name;
  SpecRange range;
};

// mild / medium / harsh as shipped defaults.
std::vector<TierConfig> default_tiers();

// Pixel-exact tier: opacity 1, scale 1, no rotation, integer placement, no
// re-encode. The regime where parsing must be perfect.
TierConfig exact_tier();

struct BenchmarkConfig {
  std::vector<std::string> families;  // default: all shipped families
  std::vector<TierConfig> tiers;      // default: mild/medium/harsh
  int videos_per_cell = 2;            // per (family, tier)
  int frames_per_video = 300;
  double fps = 60.0;
  ActionScript script;

  void validate() const;  // rejects tiers with jointly overlapping range interiors
};

struct BenchmarkEntry {
  std::string video_id;
  std::string family;
  std::string tier;
  std::string template_name;
  std::uint64_t video_seed = 0;
  std::string video_dir;  // relative to benchmark root
  int n_frames = 0;
};

struct BenchmarkManifest {
  std::uint64_t master_seed = 0;
  BenchmarkConfig config;
  std::vector<std::string> template_files;  // relative paths under root
  std::vector<BenchmarkEntry> entries;
};

// Generates templates and all (family x tier x video) cells under out_dir and
// writes manifest.json. Fully regenerable from the manifest alone.
BenchmarkManifest make_benchmark(const BenchmarkConfig& config, std::uint64_t seed,
                                 const std::string& out_dir);

void save_manifest(const std::string& path, const BenchmarkManifest& m);
BenchmarkManifest load_manifest(const std::string& path);

// Re-renders one manifest entry from its recorded seed (used to prove the
// manifest is self-sufficient).
SynthVideo regenerate_entry(const BenchmarkManifest& m, const BenchmarkEntry& entry);

}  // namespace padtrack
