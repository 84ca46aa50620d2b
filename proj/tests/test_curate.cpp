#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "padtrack/common.hpp"
#include "padtrack/curate.hpp"
#include "padtrack/synth.hpp"

using namespace padtrack;

namespace {

TEST_SUITE_BEGIN("curate");

// Raw track whose first `active` frames press a button and the rest idle.
RawTrack leading_activity_track(int n, int active) {
  RawTrack t;
  t.video_id = "v0";
  t.controller_family = "generic";
  t.frames.resize(n);
  for (int i = 0; i < active; ++i) t.frames[i].buttons[kFaceA] = true;
  return t;
}

Segment plain_segment(double density, int len = 10) {
  Segment s;
  s.video_id = "v0";
  s.start_frame = 0;
  s.end_frame = len;
  s.density = density;
  return s;
}

TEST_CASE("segment_track partitions the track with a final partial window") {
  const RawTrack t100 = leading_activity_track(100, 55);
  const auto segs = segment_track(t100, 30);
  REQUIRE(segs.size() == 4);
  int covered = 0;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    CHECK(segs[i].start_frame == covered);
    covered = segs[i].end_frame;
    if (i + 1 < segs.size()) CHECK(segs[i].end_frame - segs[i].start_frame == 30);
  }
  CHECK(covered == 100);
  CHECK(segs.back().end_frame - segs.back().start_frame == 10);

  // Densities are exact frame counts: 30/30, 25/30, 0/30, 0/10.
  CHECK(segs[0].density == 1.0);
  CHECK(segs[1].density == doctest::Approx(25.0 / 30.0).epsilon(1e-12));
  CHECK(segs[2].density == 0.0);
  CHECK(segs[3].density == 0.0);

  const auto single = segment_track(leading_activity_track(10, 3), 16);
  REQUIRE(single.size() == 1);
  CHECK(single[0].start_frame == 0);
  CHECK(single[0].end_frame == 10);
  CHECK(single[0].density == doctest::Approx(0.3).epsilon(1e-12));

  CHECK_THROWS_AS(segment_track(t100, 0), ConfigError);
}

TEST_CASE("action_density counts non-null timesteps exactly") {
  RawTrack t;
  t.video_id = "v0";
  t.controller_family = "generic";
  t.frames.resize(16);
  for (int i = 0; i < 8; ++i) t.frames[i].grid.left_cx = 7;  // deflected stick
  CHECK(action_density(t, 0, 16) == 0.5);
  CHECK(action_density(t, 0, 8) == 1.0);
  CHECK(action_density(t, 8, 16) == 0.0);
  CHECK_THROWS_AS(action_density(t, 4, 4), ValidationError);
  CHECK_THROWS_AS(action_density(t, 0, 17), ValidationError);
  CHECK_THROWS_AS(action_density(t, -1, 4), ValidationError);

  // The normalized-track overload quantizes sticks before the null test.
  NormalizedTrack nt;
  nt.video_id = "v1";
  nt.controller_family = "generic";
  nt.frames.resize(4);
  nt.frames[0].sticks[0] = 0.05;  // within the center cell
  nt.frames[1].sticks[0] = 0.3;   // cell 7
  CHECK(action_density(nt, 0, 4) == 0.25);
}

TEST_CASE("filter_segments keeps the 0.5 boundary inclusively") {
  const std::vector<Segment> segs = {plain_segment(0.49), plain_segment(0.50),
                                     plain_segment(0.51)};
  const FilterResult r = filter_segments(segs);
  REQUIRE(r.kept.size() == 2);
  REQUIRE(r.discarded.size() == 1);
  CHECK(r.discarded[0].density == 0.49);
  CHECK(r.kept[0].density == 0.50);
  CHECK(r.kept[0].kept);
  CHECK_FALSE(r.discarded[0].kept);
  CHECK(r.kept_fraction == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("engineered 55% stream reports kept fraction 0.55") {
  // 1000 frames in 10-frame segments: the first 550 frames all non-null, the
  // rest all null, so exactly 55 of 100 segments pass the filter.
  const RawTrack t = leading_activity_track(1000, 550);
  const FilterResult r = filter_segments(segment_track(t, 10));
  CHECK(r.kept.size() == 55);
  CHECK(r.discarded.size() == 45);
  CHECK(std::abs(r.kept_fraction - 0.55) <= 0.01);
  CHECK(r.kept_fraction == doctest::Approx(0.55).epsilon(1e-12));
}

TEST_CASE("r2_score matches hand-computed values and handles edge cases") {
  CHECK(r2_score({0, 1, 2, 3}, {0, 1, 2, 3}) == 1.0);
  CHECK(r2_score({0, 1, 2, 2}, {0, 1, 2, 3}) == doctest::Approx(0.8).epsilon(1e-12));

  // Mean predictor scores zero.
  const std::vector<double> t = {1.0, 2.0, 3.0, 6.0};
  const double mean = 3.0;
  CHECK(r2_score({mean, mean, mean, mean}, t) == doctest::Approx(0.0).epsilon(1e-12));

  // Shift invariance.
  const std::vector<double> p = {1.1, 2.2, 2.9, 5.5};
  std::vector<double> ps = p, ts = t;
  for (double& v : ps) v += 7.5;
  for (double& v : ts) v += 7.5;
  CHECK(r2_score(p, t) == doctest::Approx(r2_score(ps, ts)).epsilon(1e-9));

  // Zero-variance truth: perfect prediction scores 1, anything else -inf.
  CHECK(r2_score({2, 2, 2}, {2, 2, 2}) == 1.0);
  CHECK(std::isinf(r2_score({2, 2, 2.1}, {2, 2, 2})));
  CHECK(r2_score({2, 2, 2.1}, {2, 2, 2}) < 0);

  CHECK_THROWS_AS(r2_score({1, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(r2_score({1}, {1}), ValidationError);
}

TEST_CASE("button accuracy uses the all-16 rule with per-button diagnosis") {
  std::vector<std::array<bool, kNumButtons>> truth(10), pred(10);
  for (int i = 0; i < 10; ++i) truth[i][kFaceB] = pred[i][kFaceB] = i % 2 == 0;
  CHECK(button_frame_accuracy(pred, truth) == 1.0);

  pred[3][kStart] = true;  // 15/16 correct on one frame counts as incorrect
  CHECK(button_frame_accuracy(pred, truth) == doctest::Approx(0.9).epsilon(1e-12));
  const auto pb = per_button_accuracy(pred, truth);
  CHECK(pb[kStart] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(pb[kFaceB] == 1.0);

  pred.pop_back();
  CHECK_THROWS_AS(button_frame_accuracy(pred, truth), DimensionError);
  CHECK_THROWS_AS(per_button_accuracy(pred, truth), DimensionError);
}

TEST_CASE("evaluate_parser hits the mild-tier targets and is regenerable") {
  const std::string root = "curate_bench_mild";
  std::filesystem::remove_all(root);
  BenchmarkConfig config;
  config.tiers = {default_tiers().at(0)};
  config.videos_per_cell = 1;
  config.frames_per_video = 100;
  const BenchmarkManifest manifest = make_benchmark(config, 4242, root);
  REQUIRE(manifest.entries.size() == 3);

  const EvalOutcome out = evaluate_parser(manifest, root);
  CHECK(out.report.n_videos == 3);
  CHECK(out.report.not_found.empty());
  CHECK(out.report.overall.button_accuracy >= 0.96);
  CHECK(out.report.overall.r2 >= 0.84);
  REQUIRE(out.report.per_family.size() == 3);
  for (const auto& g : out.report.per_family) CHECK(g.n_videos == 1);
  REQUIRE(out.report.per_tier.size() == 1);
  CHECK(out.report.per_tier[0].name == "mild");
  CHECK(out.segments.size() == 3);  // 100-frame tracks, one segment each

  // Bit-identical regeneration from manifest + seed.
  const EvalOutcome again = evaluate_parser(manifest, root);
  save_eval_report(root + "/a.json", out.report);
  save_eval_report(root + "/b.json", again.report);
  std::ifstream fa(root + "/a.json", std::ios::binary), fb(root + "/b.json", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  const std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK(out.segments == again.segments);
  std::filesystem::remove_all(root);
}

TEST_CASE("evaluate_parser is exact on the opacity-1.0 uncompressed tier") {
  const std::string root = "curate_bench_exact";
  std::filesystem::remove_all(root);
  BenchmarkConfig config;
  config.tiers = {exact_tier()};
  config.videos_per_cell = 1;
  config.frames_per_video = 100;
  const BenchmarkManifest manifest = make_benchmark(config, 777, root);

  const EvalOutcome out = evaluate_parser(manifest, root);
  CHECK(out.report.not_found.empty());
  CHECK(out.report.overall.button_accuracy == 1.0);
  CHECK(out.report.overall.r2 >= 0.99);
  for (double pb : out.report.per_button) CHECK(pb == 1.0);
  std::filesystem::remove_all(root);
}

TEST_CASE("eval report and segments files round-trip") {
  EvalReport r;
  r.master_seed = 99;
  r.n_videos = 2;
  r.overall = {"overall", 0.9, 0.97, 2};
  r.per_family = {{"xboxlike", 0.92, 0.98, 1}, {"generic", 0.88, 0.96, 1}};
  r.per_tier = {{"mild", 0.9, 0.97, 2}};
  for (int b = 0; b < kNumButtons; ++b) r.per_button[b] = 0.9 + 0.005 * b;
  r.not_found = {"vid-7"};
  r.r2_undefined_axes = 1;

  const std::string path = "curate_report_test.json";
  save_eval_report(path, r);
  const EvalReport l = load_eval_report(path);
  CHECK(l.master_seed == r.master_seed);
  CHECK(l.n_videos == r.n_videos);
  CHECK(l.overall.r2 == r.overall.r2);
  CHECK(l.overall.button_accuracy == r.overall.button_accuracy);
  REQUIRE(l.per_family.size() == 2);
  CHECK(l.per_family[0].name == "xboxlike");
  CHECK(l.per_family[1].r2 == r.per_family[1].r2);
  REQUIRE(l.per_tier.size() == 1);
  CHECK(l.per_button == r.per_button);
  CHECK(l.not_found == r.not_found);
  CHECK(l.r2_undefined_axes == 1);
  std::filesystem::remove(path);

  std::FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f != nullptr);
  std::fputs("{\"format\": \"padtrack-eval-report-v1\"}", f);
  std::fclose(f);
  CHECK_THROWS_AS(load_eval_report(path), FormatError);
  std::filesystem::remove(path);

  const std::string jsonl = "curate_segments_test.jsonl";
  std::vector<Segment> segs = {plain_segment(0.75), plain_segment(0.25)};
  segs[0].kept = true;
  segs[1].start_frame = 10;
  segs[1].end_frame = 20;
  write_segments_jsonl(jsonl, segs);
  CHECK(read_segments_jsonl(jsonl) == segs);

  std::FILE* g = std::fopen(jsonl.c_str(), "ab");
  REQUIRE(g != nullptr);
  std::fputs("{\"video_id\": 3}\n", g);
  std::fclose(g);
  try {
    read_segments_jsonl(jsonl);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  std::filesystem::remove(jsonl);
}

TEST_SUITE_END();

}  // namespace
