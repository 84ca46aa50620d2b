#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "padtrack/common.hpp"
#include "padtrack/frames.hpp"
#include "padtrack/locate.hpp"
#include "padtrack/parallel.hpp"
#include "padtrack/parse.hpp"
#include "padtrack/synth.hpp"

using namespace padtrack;

namespace {

TEST_SUITE_BEGIN("parse");

RenderSpec exact_spec() {
  RenderSpec spec;
  spec.placement = Affine2::identity();
  spec.opacity = 1.0;
  spec.jpeg_quality = 0;
  return spec;
}

ImageU8 exact_crop(const ControllerTemplate& tmpl, const ActionFrame& action) {
  const ImageU8 bg = make_background(640, 360, 404, 0);
  const ImageU8 frame = render_overlay(bg, tmpl, action, exact_spec()).first;
  return crop_overlay(frame, Affine2::identity());
}

OverlayPlacement truth_as_placement(const SynthVideo& video) {
  OverlayPlacement p;
  p.template_name = video.template_name;
  p.affine = video.truth_placement.placement;
  p.inlier_count = 999;
  p.score = 999;
  p.frame_index = 0;
  p.crop_bbox = video.overlay_bbox;
  return p;
}

// Hand-built single-stick video: every frame reads grid (5, 5) unless a cell
// is given, and carries the supplied left-stick centroid.
ParsedVideo synthetic_video(const std::vector<std::optional<Vec2>>& left_centroids,
                            const std::vector<GridReading>& grids) {
  REQUIRE(left_centroids.size() == grids.size());
  ParsedVideo v;
  v.raw.video_id = "hand";
  v.raw.controller_family = "generic";
  v.raw.frames.resize(grids.size());
  v.centroids.resize(grids.size());
  for (std::size_t i = 0; i < grids.size(); ++i) {
    v.raw.frames[i].grid = grids[i];
    v.centroids[i][0] = left_centroids[i];
    v.centroids[i][1] = Vec2{210.0, 78.0};
    v.raw.frames[i].grid.right_cx = 5;
    v.raw.frames[i].grid.right_cy = 5;
  }
  return v;
}

TEST_CASE("parser config validation rejects out-of-range settings") {
  ParserConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.percentile = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.percentile = 100.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.blob_threshold = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.blob_threshold = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.button_margin = -0.01;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.canonical_width = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("classify_buttons is exact on opaque uncompressed composites") {
  const ControllerTemplate tmpl = make_template("xboxlike", 1);
  for (int pressed = -1; pressed < kNumButtons; ++pressed) {
    ActionFrame action;
    if (pressed >= 0) action.buttons[pressed] = true;
    const auto out = classify_buttons(exact_crop(tmpl, action), tmpl);
    for (int i = 0; i < kNumButtons; ++i) CHECK(out[i] == (i == pressed));
  }
}

TEST_CASE("classify_buttons handles chords and non-canonical crops") {
  const ControllerTemplate tmpl = make_template("generic", 2);
  ActionFrame action;
  action.buttons[kFaceA] = action.buttons[kShoulderLB] = action.buttons[kStart] = true;
  const auto out = classify_buttons(exact_crop(tmpl, action), tmpl);
  for (int i = 0; i < kNumButtons; ++i) CHECK(out[i] == action.buttons[i]);

  CHECK_THROWS_AS(classify_buttons(ImageU8(64, 64, 3), tmpl), DimensionError);
  CHECK_THROWS_AS(classify_buttons(ImageU8(256, 128, 4), tmpl), ValidationError);
}

TEST_CASE("classify_buttons survives low opacity over a textured background") {
  const ControllerTemplate tmpl = make_template("playstationlike", 3);
  RenderSpec spec = exact_spec();
  spec.opacity = 0.3;
  const ImageU8 bg = make_background(640, 360, 909, 3);
  const ImageU8 frame = render_overlay(bg, tmpl, ActionFrame{}, spec).first;
  const auto out = classify_buttons(crop_overlay(frame, spec.placement), tmpl);
  int correct = 0;
  for (int i = 0; i < kNumButtons; ++i) correct += out[i] ? 0 : 1;
  CHECK(correct >= 14);
}

TEST_CASE("read_stick_grid maps nominal center and full deflection to the right cells") {
  const ControllerTemplate tmpl = make_template("xboxlike", 4);

  ActionFrame centered;
  GridReading g = read_stick_grid(exact_crop(tmpl, centered), tmpl);
  CHECK(g == GridReading{});

  ActionFrame right;
  right.sticks = {1.0, 0.0, 0.0, 0.0};  // indicator at center + (travel_radius, 0)
  g = read_stick_grid(exact_crop(tmpl, right), tmpl);
  CHECK(g.left_cx == 10);
  CHECK(g.left_cy == 5);
  CHECK(g.centered_right());

  ActionFrame up;
  up.sticks = {0.0, 1.0, 0.0, -1.0};  // stick up = image up; right stick down
  g = read_stick_grid(exact_crop(tmpl, up), tmpl);
  CHECK(g.left_cx == 5);
  CHECK(g.left_cy == 0);
  CHECK(g.right_cx == 5);
  CHECK(g.right_cy == 10);
}

TEST_CASE("grid readout is symmetric about the center cell") {
  const ControllerTemplate tmpl = make_template("generic", 5);
  for (const auto [cx, cy] : {std::pair{8, 3}, std::pair{10, 5}, std::pair{6, 6}}) {
    GridReading want;
    want.left_cx = cx;
    want.left_cy = cy;
    ActionFrame a;
    const auto s = grid_to_sticks(want);
    a.sticks = {s[0], s[1], 0.0, 0.0};
    const GridReading got = read_stick_grid(exact_crop(tmpl, a), tmpl);
    CHECK(got.left_cx == cx);
    CHECK(got.left_cy == cy);

    ActionFrame m;
    m.sticks = {-s[0], -s[1], 0.0, 0.0};
    const GridReading mir = read_stick_grid(exact_crop(tmpl, m), tmpl);
    CHECK(mir.left_cx == 10 - cx);
    CHECK(mir.left_cy == 10 - cy);
  }
}

TEST_CASE("parse_video matches truth on a mild-tier video") {
  const ControllerTemplate tmpl = make_template("xboxlike", 6);
  const SpecRange mild = default_tiers().at(0).range;
  const SynthVideo video = synth_video(tmpl, 60, ActionScript{}, mild, 31337);
  const FrameSource src = memory_frame_source(video.frames);

  const ParsedVideo parsed = parse_video(src, truth_as_placement(video), tmpl);
  REQUIRE(parsed.raw.frames.size() == 60);
  REQUIRE(parsed.centroids.size() == 60);
  CHECK(parsed.raw.controller_family == "xboxlike");

  int frames_all16 = 0, sticks_right = 0;
  for (int i = 0; i < 60; ++i) {
    const GridReading truth = quantize_sticks(video.truth[i]);
    const GridReading& got = parsed.raw.frames[i].grid;
    if (got.left_cx == truth.left_cx && got.left_cy == truth.left_cy) ++sticks_right;
    if (got.right_cx == truth.right_cx && got.right_cy == truth.right_cy) ++sticks_right;
    bool all = true;
    for (int b = 0; b < kNumButtons; ++b)
      all = all && parsed.raw.frames[i].buttons[b] == video.truth[i].buttons[b];
    frames_all16 += all ? 1 : 0;
  }
  CHECK(frames_all16 >= 58);   // >= 0.96 of 60
  CHECK(sticks_right >= 114);  // >= 0.95 of 120 stick readings
}

TEST_CASE("parse_video is parallel-invariant and propagates frame read errors") {
  const ControllerTemplate tmpl = make_template("generic", 7);
  const SynthVideo video = synth_video(tmpl, 8, ActionScript{}, exact_tier().range, 99);
  const FrameSource src = memory_frame_source(video.frames);
  const OverlayPlacement placement = truth_as_placement(video);

  par::set_jobs(4);
  const ParsedVideo a = parse_video(src, placement, tmpl);
  par::set_jobs(1);
  const ParsedVideo b = parse_video(src, placement, tmpl);
  CHECK(a.raw == b.raw);
  CHECK(a.centroids == b.centroids);

  const std::string dir = "parse_err_video";
  std::filesystem::remove_all(dir);
  write_video(dir, video);
  std::filesystem::remove(dir + "/frame_000001.png");
  std::filesystem::remove(dir + "/truth.track");

  // The directory listing is validated at construction time, so drop the
  // file after building the source to hit the lazy read path.
  std::error_code ec;
  FrameSource broken;
  bool constructed = false;
  try {
    broken = directory_frame_source(dir);
    constructed = true;
  } catch (const FormatError&) {
    // construction already rejects the gap; rebuild with a corrupt file instead
  }
  if (!constructed) {
    std::FILE* f = std::fopen((dir + "/frame_000001.png").c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("not a png", f);
    std::fclose(f);
    broken = directory_frame_source(dir);
  }
  try {
    parse_video(broken, placement, tmpl);
    FAIL("expected an I/O error for the unreadable frame");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("frame 1") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("estimate_centers averages centered frames and flags the fallback") {
  const ControllerTemplate tmpl = make_template("generic", 8);
  const Vec2 nominal = tmpl.sticks[0].center;

  // Jittered centered frames stay within the jitter radius of nominal.
  std::vector<std::optional<Vec2>> cents;
  std::vector<GridReading> grids(9);
  for (int i = 0; i < 9; ++i)
    cents.push_back(Vec2{nominal.x + 0.5 * std::cos(i * 0.7), nominal.y + 0.5 * std::sin(i * 0.7)});
  ParsedVideo v = synthetic_video(cents, grids);
  CenterEstimate est = estimate_centers(v, tmpl);
  CHECK_FALSE(est.fallback[0]);
  CHECK(std::abs(est.centers[0].x - nominal.x) <= 0.5);
  CHECK(std::abs(est.centers[0].y - nominal.y) <= 0.5);

  // Deflected frames are excluded from the mean.
  cents.clear();
  grids.clear();
  for (int i = 0; i < 6; ++i) {
    GridReading g;
    if (i % 2 == 0) {
      cents.push_back(Vec2{10.0, 10.0});
    } else {
      g.left_cx = 9;
      cents.push_back(Vec2{40.0, 78.0});
    }
    grids.push_back(g);
  }
  v = synthetic_video(cents, grids);
  est = estimate_centers(v, tmpl);
  CHECK_FALSE(est.fallback[0]);
  CHECK(est.centers[0].x == 10.0);
  CHECK(est.centers[0].y == 10.0);

  // No centered frame at all: nominal center plus the flag.
  cents.clear();
  grids.clear();
  for (int i = 0; i < 4; ++i) {
    GridReading g;
    g.left_cx = 0;
    grids.push_back(g);
    cents.push_back(Vec2{1.0, 2.0});
  }
  v = synthetic_video(cents, grids);
  est = estimate_centers(v, tmpl);
  CHECK(est.fallback[0]);
  CHECK(est.centers[0].x == nominal.x);
  CHECK(est.centers[0].y == nominal.y);
  CHECK_FALSE(est.fallback[1]);
}

TEST_CASE("normalize_track reproduces the nearest-rank percentile scale") {
  const ControllerTemplate tmpl = make_template("generic", 9);
  const Vec2 c = tmpl.sticks[0].center;

  // 100 x-displacements with a known value list; the p99 scale must equal
  // the brute-force nearest-rank value: sorted, k = ceil(0.99 * 100) = 99.
  std::vector<double> mags;
  std::vector<std::optional<Vec2>> cents;
  std::vector<GridReading> grids;
  Rng rng(77);
  for (int i = 0; i < 100; ++i) {
    const double m = rng.uniform(0.0, 17.0) * (i % 2 == 0 ? 1.0 : -1.0);
    mags.push_back(std::abs(m));
    cents.push_back(Vec2{c.x + m, c.y});
    GridReading g;
    g.left_cx = m >= 0 ? 7 : 3;
    grids.push_back(g);
  }
  const ParsedVideo v = synthetic_video(cents, grids);
  CenterEstimate est;
  est.centers = {c, tmpl.sticks[1].center};

  const NormalizedTrack t = normalize_track(v, est);
  std::sort(mags.begin(), mags.end());
  const double p99 = mags[98];
  CHECK(t.scales[0] == p99);
  CHECK(t.scales[1] == 1.0);  // all-zero y displacements fall back to 1
  for (int i = 0; i < 100; ++i) {
    const double want = std::clamp((cents[i]->x - c.x) / p99, -1.0, 1.0);
    CHECK(t.frames[i].sticks[0] == doctest::Approx(want).epsilon(1e-12));
    CHECK(t.frames[i].sticks[1] == 0.0);
  }
}

TEST_CASE("normalize_track clamps outliers, flips y, and is scale-equivariant") {
  const ControllerTemplate tmpl = make_template("xboxlike", 10);
  const Vec2 c = tmpl.sticks[0].center;

  for (const double gain : {1.0, 3.0}) {
    std::vector<std::optional<Vec2>> cents;
    std::vector<GridReading> grids;
    // 99 small y-displacements (down = positive dy) and one huge outlier.
    for (int i = 0; i < 99; ++i) {
      cents.push_back(Vec2{c.x, c.y + gain * 4.0});
      GridReading g;
      g.left_cy = 6;
      grids.push_back(g);
    }
    cents.push_back(Vec2{c.x, c.y + gain * 8.0});
    GridReading g;
    g.left_cy = 7;
    grids.push_back(g);

    const ParsedVideo v = synthetic_video(cents, grids);
    CenterEstimate est;
    est.centers = {c, tmpl.sticks[1].center};
    const NormalizedTrack t = normalize_track(v, est);

    // p99 over {4g x99, 8g} is 4g; the outlier is 2x the scale and clamps.
    CHECK(t.scales[1] == doctest::Approx(gain * 4.0).epsilon(1e-12));
    CHECK(t.frames[0].sticks[1] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(t.frames[99].sticks[1] == -1.0);
  }

  // All-idle stick: unit scale, zero output.
  std::vector<std::optional<Vec2>> cents(10, Vec2{c.x, c.y});
  const ParsedVideo v = synthetic_video(cents, std::vector<GridReading>(10));
  CenterEstimate est;
  est.centers = {c, tmpl.sticks[1].center};
  const NormalizedTrack t = normalize_track(v, est);
  for (int a = 0; a < 4; ++a) CHECK(t.scales[a] == 1.0);
  for (const auto& f : t.frames)
    for (double s : f.sticks) CHECK(s == 0.0);
}

TEST_CASE("mask_overlay blacks out exactly the overlay footprint") {
  const ControllerTemplate tmpl = make_template("playstationlike", 11);
  const ImageU8 bg = make_background(640, 360, 55, 0);
  RenderSpec spec;
  spec.placement = Affine2::similarity(1.05, 0.1, 180.0, 120.0);
  const ImageU8 frame = render_overlay(bg, tmpl, ActionFrame{}, spec).first;

  const ImageU8 masked = mask_overlay(frame, spec.placement, tmpl);
  REQUIRE(masked.size() == frame.size());
  int black = 0, changed = 0;
  for (int y = 0; y < frame.height(); ++y)
    for (int x = 0; x < frame.width(); ++x) {
      const bool zero = masked.at(x, y, 0) == 0 && masked.at(x, y, 1) == 0 &&
                        masked.at(x, y, 2) == 0;
      const bool same = masked.at(x, y, 0) == frame.at(x, y, 0) &&
                        masked.at(x, y, 1) == frame.at(x, y, 1) &&
                        masked.at(x, y, 2) == frame.at(x, y, 2);
      CHECK((zero || same));
      black += zero ? 1 : 0;
      changed += same ? 0 : 1;
    }
  // The footprint covers at least the opaque template area times the
  // placement's area scaling (boundary taps only dilate it).
  int opaque = 0;
  for (int y = 0; y < tmpl.base_image.height(); ++y)
    for (int x = 0; x < tmpl.base_image.width(); ++x)
      opaque += tmpl.base_image.at(x, y, 3) > 0 ? 1 : 0;
  CHECK(black >= static_cast<int>(opaque * std::abs(spec.placement.det())));
  CHECK(changed > 0);

  const ImageU8 diff_free = mask_overlay(bg, spec.placement, tmpl);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x)
      CHECK(diff_free.at(x, y, 0) == bg.at(x, y, 0));  // far corner untouched
}

TEST_CASE("locate_overlay reports not-found after masking") {
  const std::vector<ControllerTemplate> templates = {make_template("xboxlike", 1),
                                                     make_template("playstationlike", 1),
                                                     make_template("generic", 1)};
  const ControllerTemplate& tmpl = templates[2];
  SpecRange range = default_tiers().at(0).range;
  const SynthVideo video = synth_video(tmpl, 6, ActionScript{}, range, 2024);

  std::vector<ImageU8> masked;
  for (const auto& f : video.frames)
    masked.push_back(mask_overlay(f, video.truth_placement.placement, tmpl));
  const auto found = locate_overlay(memory_frame_source(masked), templates, 5);
  CHECK_FALSE(found.has_value());
}

TEST_CASE("parse report survives a save/load round trip") {
  const ControllerTemplate tmpl = make_template("xboxlike", 12);
  const SynthVideo video = synth_video(tmpl, 6, ActionScript{}, exact_tier().range, 7);
  const FrameSource src = memory_frame_source(video.frames);
  const OverlayPlacement placement = truth_as_placement(video);

  ParseMeta meta;
  meta.video_id = video.video_id;
  const ParsedVideo parsed = parse_video(src, placement, tmpl, {}, meta);
  const CenterEstimate est = estimate_centers(parsed, tmpl);
  const NormalizedTrack track = normalize_track(parsed, est);
  const ParseReport report = build_parse_report(parsed, est, track, placement);
  CHECK(report.n_frames == 6);
  CHECK(report.video_id == video.video_id);
  CHECK(report.template_name == video.template_name);

  const std::string path = "parse_report_test.json";
  save_parse_report(path, report);
  const ParseReport loaded = load_parse_report(path);
  CHECK(loaded.video_id == report.video_id);
  CHECK(loaded.template_name == report.template_name);
  CHECK(loaded.controller_family == report.controller_family);
  CHECK(loaded.n_frames == report.n_frames);
  CHECK(loaded.scales == report.scales);
  CHECK(loaded.centers[0] == report.centers[0]);
  CHECK(loaded.centers[1] == report.centers[1]);
  CHECK(loaded.center_fallback == report.center_fallback);
  CHECK(loaded.frames_without_indicator == report.frames_without_indicator);
  std::filesystem::remove(path);

  std::FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f != nullptr);
  std::fputs("{\"format\": \"padtrack-parse-report-v1\", \"video_id\": 3}", f);
  std::fclose(f);
  CHECK_THROWS_AS(load_parse_report(path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("reference parser validates template and canonical size agreement") {
  const ControllerTemplate tmpl = make_template("generic", 13);
  ParserConfig cfg;
  cfg.canonical_width = 128;
  cfg.canonical_height = 64;
  CHECK_THROWS_AS(ReferenceParser(tmpl, cfg), ConfigError);

  const ReferenceParser parser(tmpl);
  const ImageU8 crop = exact_crop(tmpl, ActionFrame{});
  const ParsedFrame once = parser.parse(crop, crop);
  const ParsedFrame twice = parser.parse(crop, crop);
  CHECK(once == twice);
  CHECK(once.grid == GridReading{});
}

TEST_SUITE_END();

}  // namespace
