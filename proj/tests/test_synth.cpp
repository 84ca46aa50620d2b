#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "padtrack/imageio.hpp"
#include "padtrack/jsonio.hpp"
#include "padtrack/parallel.hpp"
#include "padtrack/synth.hpp"
#include "padtrack/track.hpp"

using namespace padtrack;

namespace {

ImageU8 black_frame(int w, int h) { return ImageU8(w, h, 3); }

RenderSpec identity_spec(int w = 320, int h = 180) {
  RenderSpec s;
  s.frame_width = w;
  s.frame_height = h;
  return s;
}

// Independent centroid oracle: threshold on distance to the indicator color,
// then average the hit coordinates inside the stick's travel footprint.
Vec2 measure_indicator(const ImageU8& frame, const StickControl& stick) {
  double sx = 0, sy = 0, n = 0;
  const double fr = stick.travel_radius + stick.indicator_radius + 2;
  for (int y = std::max(0, (int)(stick.center.y - fr)); y < std::min(frame.height(), (int)(stick.center.y + fr) + 1); ++y)
    for (int x = std::max(0, (int)(stick.center.x - fr)); x < std::min(frame.width(), (int)(stick.center.x + fr) + 1); ++x) {
      int dist = 0;
      for (int c = 0; c < 3; ++c) dist += std::abs((int)frame.at(x, y, c) - (int)stick.indicator_color[c]);
      if (dist < 150) {
        sx += x;
        sy += y;
        n += 1;
      }
    }
  REQUIRE(n > 0);
  return {sx / n, sy / n};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE_BEGIN("synth");

TEST_CASE("template families validate and differ") {
  for (const auto& family : template_families()) {
    const auto t = make_template(family, 7);
    CHECK(t.family == family);
    CHECK(t.base_image.width() == 256);
    CHECK(t.base_image.height() == 128);
    CHECK_NOTHROW(t.validate());
  }
  const auto a = make_template("xboxlike", 7);
  const auto b = make_template("playstationlike", 7);
  CHECK_FALSE(a.base_image == b.base_image);
  CHECK_THROWS_AS(make_template("gamecube", 7), ConfigError);
}

TEST_CASE("template validation rejects overlapping regions") {
  auto t = make_template("generic", 3);
  t.buttons[kFaceA].region = t.buttons[kFaceB].region;
  CHECK_THROWS_AS(t.validate(), ValidationError);
}

TEST_CASE("template json round-trip") {
  namespace fs = std::filesystem;
  const auto t = make_template("playstationlike", 99);
  const auto path = (fs::temp_directory_path() / "padtrack_tmpl.json").string();
  save_template(path, t);
  const auto back = load_template(path);
  CHECK(back.name == t.name);
  CHECK(back.family == t.family);
  CHECK(back.base_image == t.base_image);
  for (int i = 0; i < kNumButtons; ++i) {
    CHECK(back.buttons[i].label == t.buttons[i].label);
    CHECK(back.buttons[i].released == t.buttons[i].released);
    CHECK(back.buttons[i].pressed == t.buttons[i].pressed);
  }
  for (int s = 0; s < 2; ++s) {
    CHECK(back.sticks[s].center == t.sticks[s].center);
    CHECK(back.sticks[s].travel_radius == t.sticks[s].travel_radius);
    CHECK(back.sticks[s].indicator_color == t.sticks[s].indicator_color);
  }
  fs::remove(path);
}

TEST_CASE("opaque identity render reproduces released patches exactly") {
  const auto t = make_template("xboxlike", 5);
  const auto [frame, bbox] = render_overlay(black_frame(320, 180), t, ActionFrame{}, identity_spec());
  CHECK(bbox.x0 == 0);
  CHECK(bbox.y0 == 0);
  CHECK(bbox.x1 == 256);
  CHECK(bbox.y1 == 128);
  for (const auto& b : t.buttons) {
    const int x0 = (int)b.region.x0, y0 = (int)b.region.y0;
    for (int y = 0; y < b.released.height(); ++y)
      for (int x = 0; x < b.released.width(); ++x)
        for (int c = 0; c < 3; ++c)
          REQUIRE(frame.at(x0 + x, y0 + y, c) == b.released.at(x, y, c));
  }
}

TEST_CASE("pressed buttons render pressed patches") {
  const auto t = make_template("generic", 5);
  ActionFrame a;
  a.buttons[kFaceA] = true;
  const auto [frame, bbox] = render_overlay(black_frame(320, 180), t, a, identity_spec());
  const auto& b = t.buttons[kFaceA];
  const int x0 = (int)b.region.x0, y0 = (int)b.region.y0;
  int diff = 0;
  for (int y = 0; y < b.pressed.height(); ++y)
    for (int x = 0; x < b.pressed.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        REQUIRE(frame.at(x0 + x, y0 + y, c) == b.pressed.at(x, y, c));
        if (b.pressed.at(x, y, c) != b.released.at(x, y, c)) ++diff;
      }
  CHECK(diff > 50);  // pressed and released looks genuinely differ
}

TEST_CASE("indicator lands at center plus displacement times radius") {
  const auto t = make_template("xboxlike", 5);
  for (const auto& sticks : {std::array<double, 4>{1, 0, 0, 0}, std::array<double, 4>{0, 0, -0.6, 0.8},
                             std::array<double, 4>{0, 1, 0, 0}}) {
    ActionFrame a;
    a.sticks = sticks;
    const auto [frame, _] = render_overlay(black_frame(320, 180), t, a, identity_spec());
    for (int s = 0; s < 2; ++s) {
      const auto& sc = t.sticks[s];
      const Vec2 expect{sc.center.x + sticks[s * 2] * sc.travel_radius,
                        sc.center.y - sticks[s * 2 + 1] * sc.travel_radius};
      const Vec2 got = measure_indicator(frame, sc);
      CHECK((got - expect).norm() < 1.0);
    }
  }
}

TEST_CASE("half opacity over black halves the overlay") {
  const auto t = make_template("xboxlike", 5);
  RenderSpec spec = identity_spec();
  spec.opacity = 0.5;
  const auto [half, b1] = render_overlay(black_frame(320, 180), t, ActionFrame{}, spec);
  const auto [full, b2] = render_overlay(black_frame(320, 180), t, ActionFrame{}, identity_spec());
  // Compare over fully opaque template pixels (away from antialiased edges).
  for (int y = 10; y < 120; y += 3)
    for (int x = 10; x < 250; x += 3) {
      if (t.base_image.at(x, y, 3) != 255) continue;
      for (int c = 0; c < 3; ++c) {
        const double expect = 0.5 * full.at(x, y, c);
        REQUIRE(std::abs(half.at(x, y, c) - expect) <= 1.0);
      }
    }
}

TEST_CASE("degenerate placement is rejected") {
  const auto t = make_template("xboxlike", 5);
  RenderSpec spec = identity_spec();
  spec.placement = {0, 0, 10, 0, 0, 10};
  CHECK_THROWS_AS(render_overlay(black_frame(320, 180), t, ActionFrame{}, spec), ValidationError);
  spec.placement = Affine2::similarity(0.05, 0, 10, 10);  // |scale| below 0.1
  CHECK_THROWS_AS(render_overlay(black_frame(320, 180), t, ActionFrame{}, spec), ValidationError);
}

TEST_CASE("synth video is deterministic and static per video") {
  const auto t = make_template("generic", 11);
  SpecRange range;
  range.frame_width = 480;
  range.frame_height = 270;
  range.scale_hi = 1.0;
  ActionScript script;
  const auto a = synth_video(t, 5, script, range, 42);
  const auto b = synth_video(t, 5, script, range, 42);
  REQUIRE(a.frames.size() == 5);
  REQUIRE(a.truth.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(a.frames[i] == b.frames[i]);
    CHECK(a.truth[i] == b.truth[i]);
  }
  CHECK(a.truth_placement.placement.coeffs() == b.truth_placement.placement.coeffs());

  const auto c = synth_video(t, 5, script, range, 43);
  CHECK_FALSE(a.frames[0] == c.frames[0]);
}

TEST_CASE("iid button frequency stays near its probability") {
  ActionScript script;
  script.button_prob = 0.5;
  Rng rng(2025);
  const auto actions = script.generate(1000, rng);
  for (int b = 0; b < kNumButtons; ++b) {
    int presses = 0;
    for (const auto& a : actions) presses += a.buttons[b] ? 1 : 0;
    const double freq = presses / 1000.0;
    // Binomial(1000, 0.5): +-0.05 is +-3.16 sigma, so this holds with
    // probability well above 99% per button.
    CHECK(freq >= 0.45);
    CHECK(freq <= 0.55);
  }
}

TEST_CASE("iid sticks stay on the lattice") {
  ActionScript script;
  Rng rng(7);
  for (const auto& a : script.generate(500, rng))
    for (double s : a.sticks) {
      const double cell = s * 5.0;
      CHECK(cell == std::round(cell));
    }
}

TEST_CASE("scripted mode replays the script") {
  ActionScript script;
  script.mode = ActionScript::Mode::kScripted;
  Rng seedgen(3);
  for (int i = 0; i < 10; ++i) {
    ActionFrame f;
    f.buttons[i % kNumButtons] = true;
    f.sticks[0] = (i % 11 - 5) / 5.0;
    script.script.push_back(f);
  }
  Rng rng(1);
  const auto actions = script.generate(10, rng);
  REQUIRE(actions.size() == 10);
  for (int i = 0; i < 10; ++i) CHECK(actions[i] == script.script[i]);

  ActionScript empty;
  empty.mode = ActionScript::Mode::kScripted;
  Rng rng2(1);
  CHECK_THROWS_AS(empty.generate(5, rng2), ConfigError);
}

TEST_CASE("benchmark counting, ranges and manifest round-trip") {
  namespace fs = std::filesystem;
  const auto dir = (fs::temp_directory_path() / "padtrack_bench_test").string();
  fs::remove_all(dir);

  BenchmarkConfig cfg;
  cfg.families = template_families();
  cfg.tiers = default_tiers();
  cfg.videos_per_cell = 2;
  cfg.frames_per_video = 4;
  const auto m = make_benchmark(cfg, 77, dir);
  CHECK(m.entries.size() == 18);  // 3 families x 3 tiers x 2 videos

  for (const auto& e : m.entries) {
    const Json truth = read_json(dir + "/" + e.video_dir + "/truth.json");
    const double opacity = truth.at("opacity").get<double>();
    if (e.tier == "harsh") CHECK(opacity < 0.5);
    if (e.tier == "mild") CHECK(opacity >= 0.8);
    CHECK(fs::exists(dir + "/" + e.video_dir + "/frame_000003.png"));
    CHECK(fs::exists(dir + "/" + e.video_dir + "/truth.track"));
  }

  const auto loaded = load_manifest(dir + "/manifest.json");
  CHECK(loaded.master_seed == m.master_seed);
  CHECK(loaded.entries.size() == m.entries.size());
  CHECK(loaded.config.families == m.config.families);

  // Manifest alone regenerates identical content.
  const auto& entry = loaded.entries[0];
  const auto video = regenerate_entry(loaded, entry);
  RawTrack expect = read_raw_track(dir + "/" + entry.video_dir + "/truth.track");
  REQUIRE(video.truth.size() == expect.frames.size());
  for (std::size_t i = 0; i < video.truth.size(); ++i) {
    CHECK(video.truth[i].buttons == expect.frames[i].buttons);
    CHECK(quantize_sticks(video.truth[i]) == expect.frames[i].grid);
  }
  const auto png = png_decode([&] {
    const auto raw = slurp(dir + "/" + entry.video_dir + "/frame_000000.png");
    return std::vector<unsigned char>(raw.begin(), raw.end());
  }());
  CHECK(png == video.frames[0]);

  fs::remove_all(dir);
}

TEST_CASE("overlapping tiers are rejected") {
  BenchmarkConfig cfg;
  cfg.families = {"generic"};
  cfg.tiers = default_tiers();
  cfg.tiers.push_back(cfg.tiers[0]);  // exact duplicate of mild
  cfg.tiers.back().name = "mild2";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg.tiers = default_tiers();
  cfg.tiers.push_back(exact_tier());  // point ranges never overlap
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("benchmark truth files are identical across job counts") {
  namespace fs = std::filesystem;
  const auto dir1 = (fs::temp_directory_path() / "padtrack_bench_j1").string();
  const auto dirN = (fs::temp_directory_path() / "padtrack_bench_j4").string();
  fs::remove_all(dir1);
  fs::remove_all(dirN);

  BenchmarkConfig cfg;
  cfg.families = {"xboxlike"};
  cfg.tiers = {default_tiers()[0]};
  cfg.videos_per_cell = 2;
  cfg.frames_per_video = 3;

  par::set_jobs(1);
  make_benchmark(cfg, 5, dir1);
  par::set_jobs(4);
  make_benchmark(cfg, 5, dirN);
  par::set_jobs(0);

  for (const auto& e : load_manifest(dir1 + "/manifest.json").entries) {
    CHECK(slurp(dir1 + "/" + e.video_dir + "/truth.track") ==
          slurp(dirN + "/" + e.video_dir + "/truth.track"));
    CHECK(slurp(dir1 + "/" + e.video_dir + "/frame_000000.png") ==
          slurp(dirN + "/" + e.video_dir + "/frame_000000.png"));
  }
  CHECK(slurp(dir1 + "/manifest.json") == slurp(dirN + "/manifest.json"));

  fs::remove_all(dir1);
  fs::remove_all(dirN);
}

TEST_CASE("exact tier renders pixel-identical overlay regions") {
  const auto t = make_template("xboxlike", 9);
  const auto v = synth_video(t, 2, ActionScript{}, exact_tier().range, 31);
  const auto& p = v.truth_placement;
  CHECK(p.opacity == 1.0);
  CHECK(p.jpeg_quality == 0);
  CHECK(p.placement.a == 1.0);
  CHECK(p.placement.tx == std::floor(p.placement.tx));
  // Opaque template pixels away from any control must land byte-exact.
  const int tx = (int)p.placement.tx, ty = (int)p.placement.ty;
  int checked = 0;
  for (int y = 0; y < 128; y += 5)
    for (int x = 0; x < 256; x += 5) {
      bool in_control = false;
      for (const auto& b : t.buttons)
        if (b.region.contains(x, y)) in_control = true;
      for (const auto& s : t.sticks)
        if (std::hypot(x - s.center.x, y - s.center.y) < s.travel_radius + s.indicator_radius + 3)
          in_control = true;
      if (in_control || t.base_image.at(x, y, 3) != 255) continue;
      for (int c = 0; c < 3; ++c)
        REQUIRE(v.frames[0].at(tx + x, ty + y, c) == t.base_image.at(x, y, c));
      ++checked;
    }
  CHECK(checked > 100);
}

TEST_SUITE_END();
