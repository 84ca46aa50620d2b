#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "padtrack/action.hpp"
#include "padtrack/rng.hpp"
#include "padtrack/track.hpp"

using namespace padtrack;

namespace {

ActionFrame random_frame(Rng& rng) {
  ActionFrame f;
  for (auto& b : f.buttons) b = rng.bernoulli(0.5);
  for (auto& s : f.sticks) s = rng.uniform(-1.0, 1.0);
  return f;
}

std::filesystem::path temp_file(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_SUITE_BEGIN("core");

TEST_CASE("encode_action layout") {
  ActionFrame f;
  auto v = encode_action(f);
  REQUIRE(v.size() == 20);
  for (double x : v) CHECK(x == 0.0);

  f.buttons[kFaceA] = true;
  v = encode_action(f);
  for (int i = 0; i < 20; ++i) CHECK(v[i] == (i == 4 ? 1.0 : 0.0));

  f = ActionFrame{};
  f.sticks = {-1.0, 0.5, 0.0, 1.0};
  v = encode_action(f);
  CHECK(v[16] == -1.0);
  CHECK(v[17] == 0.5);
  CHECK(v[18] == 0.0);
  CHECK(v[19] == 1.0);
}

TEST_CASE("decode_action thresholds and clamping") {
  std::vector<double> v(20, 0.0);
  v[3] = 0.7;
  auto f = decode_action(v);
  CHECK(f.buttons[kDpadRight]);
  for (int i = 0; i < 16; ++i)
    if (i != 3) CHECK_FALSE(f.buttons[i]);

  v[3] = 0.0;
  v[17] = 1.2;
  f = decode_action(v);
  CHECK(f.sticks[1] == 1.0);

  CHECK_THROWS_AS(decode_action(std::vector<double>(19)), DimensionError);
}

TEST_CASE("encode/decode round-trip over random frames") {
  Rng rng(41);
  for (int i = 0; i < 100; ++i) {
    const auto f = random_frame(rng);
    CHECK(decode_action(encode_action(f)) == f);
  }
}

TEST_CASE("is_null_action definition and monotonicity") {
  std::array<bool, kNumButtons> none{};
  GridReading centered;
  CHECK(is_null_action(none, centered));

  auto start = none;
  start[kStart] = true;
  CHECK_FALSE(is_null_action(start, centered));

  GridReading off = centered;
  off.left_cx = 6;
  CHECK_FALSE(is_null_action(none, off));

  // Monotone: any single press or any off-center cell flips to false.
  for (int i = 0; i < kNumButtons; ++i) {
    auto b = none;
    b[i] = true;
    CHECK_FALSE(is_null_action(b, centered));
  }
  for (int cx = 0; cx <= 10; ++cx)
    for (int cy = 0; cy <= 10; ++cy) {
      if (cx == 5 && cy == 5) continue;
      GridReading g;
      g.right_cx = cx;
      g.right_cy = cy;
      CHECK_FALSE(is_null_action(none, g));
    }
}

TEST_CASE("raw track round-trip") {
  Rng rng(7);
  RawTrack t;
  t.video_id = "vid-raw";
  t.fps = 59.94;
  t.controller_family = "xbox";
  for (int i = 0; i < 50; ++i) {
    RawTrackFrame f;
    for (auto& b : f.buttons) b = rng.bernoulli(0.3);
    f.grid = {rng.uniform_int(0, 10), rng.uniform_int(0, 10), rng.uniform_int(0, 10),
              rng.uniform_int(0, 10)};
    t.frames.push_back(f);
  }
  const auto path = temp_file("padtrack_raw_test.track");
  write_raw_track(t, path.string());
  const auto back = read_raw_track(path.string());
  CHECK(back == t);
  std::filesystem::remove(path);
}

TEST_CASE("normalized track round-trip is bit-exact") {
  Rng rng(9);
  NormalizedTrack t;
  t.video_id = "vid-norm";
  t.fps = 60.0;
  t.controller_family = "generic";
  t.centers = {Vec2{31.25, 20.0}, Vec2{64.0, 19.875}};
  t.scales = {12.0, 11.5, 0.125, 1e-3};
  for (int i = 0; i < 64; ++i) {
    ActionFrame f = random_frame(rng);
    t.frames.push_back(f);
  }
  const auto path = temp_file("padtrack_norm_test.track");
  write_normalized_track(t, path.string());
  const auto back = read_normalized_track(path.string());
  CHECK(back == t);  // exact doubles, including centers/scales
  std::filesystem::remove(path);
}

TEST_CASE("track format errors") {
  const auto path = temp_file("padtrack_bad_test.track");

  {  // 15-button record names the offending line
    std::ofstream out(path);
    out << "PADTRACK v1 vid 60 xbox\n# kind raw\n";
    out << "010101010101010 5 5 5 5\n";
  }
  CHECK_THROWS_WITH_AS(read_raw_track(path.string()),
                       doctest::Contains(":3:"), FormatError);

  {  // missing header
    std::ofstream out(path);
    out << "0101010101010101 5 5 5 5\n";
  }
  CHECK_THROWS_AS(read_raw_track(path.string()), FormatError);

  {  // kind mismatch
    std::ofstream out(path);
    out << "PADTRACK v1 vid 60 xbox\n# kind raw\n0000000000000000 5 5 5 5\n";
  }
  CHECK_THROWS_AS(read_normalized_track(path.string()), FormatError);

  // empty frames rejected on write
  RawTrack t;
  t.video_id = "v";
  t.controller_family = "f";
  CHECK_THROWS_AS(write_raw_track(t, path.string()), ValidationError);
  std::filesystem::remove(path);
}

TEST_SUITE_END();
