#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "padtrack/frames.hpp"
#include "padtrack/imageio.hpp"
#include "padtrack/locate.hpp"
#include "padtrack/parallel.hpp"
#include "padtrack/rng.hpp"
#include "padtrack/synth.hpp"

using namespace padtrack;
namespace fs = std::filesystem;

namespace {

// Smooth random field: plenty of corner structure, no repeated texture, so
// descriptors are unique and self-matching is clean.
ImageF random_texture(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  ImageF img(w, h, 1);
  for (float& v : img.pixels()) v = static_cast<float>(rng.uniform());
  return gaussian_blur(img, 1.5);
}

Keypoint make_kp(double x, double y, const std::vector<double>& desc_head) {
  Keypoint kp;
  kp.position = {x, y};
  kp.descriptor.assign(kDescriptorDim, 0.0);
  for (std::size_t i = 0; i < desc_head.size() && i < kp.descriptor.size(); ++i)
    kp.descriptor[i] = desc_head[i];
  return kp;
}

std::vector<PointPair> exact_pairs(const Affine2& t, int n, std::uint64_t seed, double w = 256,
                                   double h = 128) {
  Rng rng(seed);
  std::vector<PointPair> pairs;
  pairs.reserve(n);
  for (int i = 0; i < n; ++i) {
    const Vec2 src{rng.uniform(0.0, w), rng.uniform(0.0, h)};
    pairs.push_back({src, t.apply(src)});
  }
  return pairs;
}

double max_coeff_err(const Affine2& a, const Affine2& b) {
  const auto ca = a.coeffs(), cb = b.coeffs();
  double m = 0.0;
  for (int i = 0; i < 6; ++i) m = std::max(m, std::abs(ca[i] - cb[i]));
  return m;
}

// Normalized cross-correlation between the grayscale images over the pixels
// where the template art is opaque (outside its footprint the crop shows
// whatever background happens to be there).
double gray_ncc(const ImageU8& a, const ImageU8& b, const ImageU8& alpha_src) {
  const ImageF ga = to_grayscale(a), gb = to_grayscale(b);
  REQUIRE(ga.size() == gb.size());
  std::vector<std::size_t> idx;
  for (int y = 0; y < ga.height(); ++y)
    for (int x = 0; x < ga.width(); ++x)
      if (alpha_src.at(x, y, 3) > 0)
        idx.push_back(static_cast<std::size_t>(y) * ga.width() + x);
  REQUIRE(!idx.empty());
  double ma = 0.0, mb = 0.0;
  for (const std::size_t i : idx) {
    ma += ga.pixels()[i];
    mb += gb.pixels()[i];
  }
  ma /= idx.size();
  mb /= idx.size();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const std::size_t i : idx) {
    const double da = ga.pixels()[i] - ma, db = gb.pixels()[i] - mb;
    dot += da * db;
    na += da * da;
    nb += db * db;
  }
  return dot / std::sqrt(na * nb);
}

SpecRange fixed_range(double opacity, double scale) {
  SpecRange r;
  r.opacity_lo = r.opacity_hi = opacity;
  r.scale_lo = r.scale_hi = scale;
  r.quality_lo = r.quality_hi = 0;
  return r;
}

}  // namespace

TEST_SUITE("locate") {

TEST_CASE("frame sampling is uniform, distinct, and covers short videos fully") {
  CHECK(sample_frame_indices(10, 25) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(sample_frame_indices(1, 25) == std::vector<int>{0});
  CHECK(sample_frame_indices(25, 25).size() == 25);

  const auto idx = sample_frame_indices(300, 25);
  REQUIRE(idx.size() == 25);
  CHECK(idx.front() == 0);
  CHECK(idx.back() == 299);
  for (std::size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] > idx[i - 1]);

  const auto tight = sample_frame_indices(26, 25);
  REQUIRE(tight.size() == 25);
  for (std::size_t i = 1; i < tight.size(); ++i) CHECK(tight[i] > tight[i - 1]);

  CHECK_THROWS_AS(sample_frame_indices(10, 0), ConfigError);
}

TEST_CASE("detector: structureless and tiny images yield nothing") {
  CHECK(detect_and_describe(ImageF(64, 64, 1, 0.5f)).empty());
  CHECK(detect_and_describe(ImageF(31, 200, 1, 0.0f)).empty());
  CHECK(detect_and_describe(ImageF(200, 31, 1, 0.0f)).empty());
}

TEST_CASE("detector: textured image gives ordered, capped, deterministic keypoints") {
  const ImageF tex = random_texture(160, 120, 11);
  const auto kps = detect_and_describe(tex);
  REQUIRE(kps.size() >= 50);
  for (std::size_t i = 1; i < kps.size(); ++i) CHECK(kps[i].response <= kps[i - 1].response);
  for (const Keypoint& kp : kps) {
    CHECK(kp.descriptor.size() == kDescriptorDim);
    CHECK(kp.position.x >= 0.0);
    CHECK(kp.position.y >= 0.0);
    CHECK(kp.position.x <= 159.0);
    CHECK(kp.position.y <= 119.0);
    double norm2 = 0.0;
    for (double d : kp.descriptor) norm2 += d * d;
    CHECK(norm2 == doctest::Approx(1.0).epsilon(1e-9));
  }

  DetectorConfig capped;
  capped.max_keypoints = 10;
  CHECK(detect_and_describe(tex, capped).size() == 10);

  const auto again = detect_and_describe(tex);
  REQUIRE(again.size() == kps.size());
  for (std::size_t i = 0; i < kps.size(); ++i) {
    CHECK(again[i].position == kps[i].position);
    CHECK(again[i].descriptor == kps[i].descriptor);
  }
}

TEST_CASE("matching: self-match, tie rejection, empty inputs") {
  const ImageF tex = random_texture(160, 120, 12);
  const auto kps = detect_and_describe(tex);
  REQUIRE(kps.size() >= 50);
  const auto matches = match_descriptors(kps, kps, 0.75);
  CHECK(matches.size() >= kps.size() / 2);
  for (const auto& [i, j] : matches) CHECK(i == j);

  const Keypoint probe = make_kp(0, 0, {1.0});
  CHECK(match_descriptors({probe}, {}, 0.75).empty());
  // Two equidistant candidates make the ratio exactly 1, which must fail.
  CHECK(match_descriptors({probe}, {make_kp(5, 5, {1.0}), make_kp(9, 9, {1.0})}, 0.75).empty());
  // A single clearly-nearest candidate is accepted.
  CHECK(match_descriptors({probe}, {make_kp(5, 5, {1.0}), make_kp(9, 9, {0.0, 1.0})}, 0.75)
            .size() == 1);

  CHECK_THROWS_AS(match_descriptors({probe}, {probe}, 0.0), ConfigError);
  CHECK_THROWS_AS(match_descriptors({probe}, {probe}, 1.0), ConfigError);
}

TEST_CASE("affine estimation: exact correspondences recover the map") {
  const Affine2 truth{0.5, 0.0, 10.0, 0.0, 0.5, 20.0};
  const auto fit = estimate_affine(exact_pairs(truth, 50, 101));
  REQUIRE(fit.has_value());
  CHECK(fit->inlier_count == 50);
  CHECK(max_coeff_err(fit->affine, truth) < 1e-6);
  CHECK(fit->rms < 1e-6);
}

TEST_CASE("affine estimation: below the 20-inlier floor or 3 pairs, no model") {
  const Affine2 truth{0.5, 0.0, 10.0, 0.0, 0.5, 20.0};
  CHECK(!estimate_affine(exact_pairs(truth, 19, 102)).has_value());
  CHECK(!estimate_affine(exact_pairs(truth, 2, 103)).has_value());
  CHECK(!estimate_affine({}).has_value());
  CHECK_THROWS_AS(estimate_affine(exact_pairs(truth, 30, 104), 3.0, 0), ConfigError);
}

TEST_CASE("affine estimation: random transforms, exact and with 40% outliers") {
  Rng rng(77);
  int trials = 0;
  while (trials < 120) {
    Affine2 t{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-100.0, 100.0),
              rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-100.0, 100.0)};
    if (t.scale_magnitude() < 0.3 || t.scale_magnitude() > 2.0) continue;
    ++trials;

    auto pairs = exact_pairs(t, 40, rng.next_u64(), 300, 200);
    const auto exact = estimate_affine(pairs, 3.0, 2000, rng.next_u64());
    REQUIRE(exact.has_value());
    CHECK(exact->inlier_count == 40);
    CHECK(max_coeff_err(exact->affine, t) < 1e-6);

    // 40% outliers: 30 true pairs + 20 unrelated ones.
    auto noisy = exact_pairs(t, 30, rng.next_u64(), 300, 200);
    for (int o = 0; o < 20; ++o)
      noisy.push_back({{rng.uniform(0.0, 300.0), rng.uniform(0.0, 200.0)},
                       {rng.uniform(0.0, 640.0), rng.uniform(0.0, 360.0)}});
    const auto robust = estimate_affine(noisy, 3.0, 2000, rng.next_u64());
    REQUIRE(robust.has_value());
    CHECK(robust->inlier_count >= 30);
    CHECK(max_coeff_err(robust->affine, t) < 1e-3);
  }
}

TEST_CASE("affine estimation: spec'd outlier mix keeps the inlier set") {
  const Affine2 truth{0.5, 0.0, 10.0, 0.0, 0.5, 20.0};
  Rng rng(55);
  auto pairs = exact_pairs(truth, 50, 105);
  for (int o = 0; o < 30; ++o)
    pairs.push_back({{rng.uniform(0.0, 256.0), rng.uniform(0.0, 128.0)},
                     {rng.uniform(0.0, 640.0), rng.uniform(0.0, 360.0)}});
  const auto fit = estimate_affine(pairs);
  REQUIRE(fit.has_value());
  CHECK(fit->inlier_count >= 50);
  CHECK(max_coeff_err(fit->affine, truth) < 1e-3);
}

TEST_CASE("parallel kernels agree bitwise with their serial twins") {
  par::set_jobs(4);
  const ImageF tex = random_texture(160, 120, 13);
  const auto kps1 = detect_and_describe(tex);
  par::set_jobs(1);
  const auto kps0 = detect_and_describe(tex);
  par::set_jobs(4);
  REQUIRE(kps0.size() == kps1.size());
  for (std::size_t i = 0; i < kps0.size(); ++i) {
    CHECK(kps0[i].position == kps1[i].position);
    CHECK(kps0[i].orientation == kps1[i].orientation);
    CHECK(kps0[i].descriptor == kps1[i].descriptor);
  }

  const auto tex2 = random_texture(160, 120, 14);
  const auto kps_b = detect_and_describe(tex2);
  CHECK(match_descriptors(kps1, kps_b, 0.8) == match_descriptors_serial(kps1, kps_b, 0.8));

  const Affine2 t{1.1, 0.02, 40.0, -0.03, 0.9, 25.0};
  Rng rng(66);
  auto pairs = exact_pairs(t, 35, 107);
  for (int o = 0; o < 10; ++o)
    pairs.push_back({{rng.uniform(0.0, 256.0), rng.uniform(0.0, 128.0)},
                     {rng.uniform(0.0, 640.0), rng.uniform(0.0, 360.0)}});
  const auto par_fit = estimate_affine(pairs, 3.0, 500, 9);
  const auto ser_fit = estimate_affine_serial(pairs, 3.0, 500, 9);
  REQUIRE(par_fit.has_value());
  REQUIRE(ser_fit.has_value());
  CHECK(par_fit->affine.coeffs() == ser_fit->affine.coeffs());
  CHECK(par_fit->inlier_count == ser_fit->inlier_count);
  CHECK(par_fit->rms == ser_fit->rms);

  const ControllerTemplate tmpl = make_template("generic", 3);
  const ImageU8 bg = make_background(320, 180, 21, 0);
  RenderSpec spec;
  spec.frame_width = 320;
  spec.frame_height = 180;
  spec.placement = Affine2::similarity(0.7, 0.0, 30.0, 20.0);
  const ImageU8 frame = render_overlay(bg, tmpl, ActionFrame{}, spec).first;
  CHECK(crop_overlay(frame, spec.placement) == crop_overlay_serial(frame, spec.placement));
  par::set_jobs(1);
}

TEST_CASE("template rendered at half scale still yields 20 true correspondences") {
  const ControllerTemplate tmpl = make_template("xboxlike", 8);
  const Affine2 placement = Affine2::similarity(0.5, 0.0, 250.0, 120.0);
  RenderSpec spec;
  spec.placement = placement;
  spec.opacity = 0.9;
  const ImageU8 bg = make_background(640, 360, 31, 0);
  const ImageU8 frame = render_overlay(bg, tmpl, ActionFrame{}, spec).first;

  DetectorConfig tmpl_cfg;
  tmpl_cfg.max_keypoints = 800;
  const auto tkps = detect_and_describe(to_grayscale(tmpl.base_image), tmpl_cfg);
  const auto fkps = detect_and_describe(to_grayscale(frame));
  const auto matches = match_descriptors(tkps, fkps, 0.75);

  int correct = 0;
  for (const auto& [i, j] : matches) {
    const Vec2 expect = placement.apply(tkps[i].position);
    if ((expect - fkps[j].position).norm() < 3.0) ++correct;
  }
  CHECK(correct >= 20);
}

TEST_CASE("locate_overlay finds the right family with tight bbox on a mild video") {
  std::vector<ControllerTemplate> templates;
  for (const std::string& fam : template_families()) templates.push_back(make_template(fam, 5));

  SpecRange range = fixed_range(0.9, 1.1);
  ActionScript script;
  const SynthVideo video = synth_video(templates[0], 8, script, range, 99);
  const FrameSource src = memory_frame_source(video.frames);

  const auto placement = locate_overlay(src, templates, 7);
  REQUIRE(placement.has_value());
  CHECK(placement->template_name == video.template_name);
  CHECK(placement->inlier_count >= 20);
  CHECK(placement->score == static_cast<double>(placement->inlier_count));
  CHECK(iou(placement->crop_bbox, video.overlay_bbox) >= 0.9);
  const Affine2& truth = video.truth_placement.placement;
  CHECK(std::abs(placement->affine.tx - truth.tx) < 1.0);
  CHECK(std::abs(placement->affine.ty - truth.ty) < 1.0);
  CHECK(std::abs(placement->affine.a - truth.a) < 0.05);
  CHECK(std::abs(placement->affine.d - truth.d) < 0.05);

  const auto again = locate_overlay(src, templates, 7);
  REQUIRE(again.has_value());
  CHECK(again->affine.coeffs() == placement->affine.coeffs());
  CHECK(again->template_name == placement->template_name);

  // Crop correlates strongly with the clean template art.
  const ImageU8 crop = crop_overlay(src.get(placement->frame_index), placement->affine);
  ImageU8 tmpl_rgb(256, 128, 3);
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 256; ++x)
      for (int c = 0; c < 3; ++c) tmpl_rgb.at(x, y, c) = templates[0].base_image.at(x, y, c);
  CHECK(gray_ncc(crop, tmpl_rgb, templates[0].base_image) >= 0.8);
}

TEST_CASE("locate_overlay on pure noise reports not-found") {
  Rng rng(123);
  std::vector<ImageU8> frames;
  for (int f = 0; f < 3; ++f) {
    ImageU8 img(320, 180, 3);
    for (auto& px : img.pixels()) px = static_cast<std::uint8_t>(rng.next_u64() & 0xff);
    frames.push_back(std::move(img));
  }
  std::vector<ControllerTemplate> templates;
  for (const std::string& fam : template_families()) templates.push_back(make_template(fam, 5));
  CHECK(!locate_overlay(memory_frame_source(std::move(frames)), templates, 7).has_value());
}

TEST_CASE("crop_overlay: identity copy and black out-of-frame padding") {
  const ControllerTemplate tmpl = make_template("playstationlike", 4);
  RenderSpec spec;  // identity placement, opacity 1, 256x128 template
  spec.frame_width = 256;
  spec.frame_height = 128;
  const ImageU8 frame = render_overlay(ImageU8(256, 128, 3), tmpl, ActionFrame{}, spec).first;

  CHECK(crop_overlay(frame, Affine2::identity()) == frame);

  const Affine2 shifted{1, 0, -100, 0, 1, 0};
  const ImageU8 crop = crop_overlay(frame, shifted);
  for (int y = 0; y < crop.height(); ++y) {
    for (int x = 0; x < 99; ++x)
      for (int c = 0; c < 3; ++c) CHECK(crop.at(x, y, c) == 0);
    for (int x = 101; x < crop.width(); ++x)
      for (int c = 0; c < 3; ++c) CHECK(crop.at(x, y, c) == frame.at(x - 100, y, c));
  }
}

TEST_CASE("placement JSON round-trips and rejects malformed files") {
  OverlayPlacement p;
  p.template_name = "xboxlike-002a";
  p.affine = {1.125, -0.25, 33.5, 0.25, 1.0625, -7.75};
  p.inlier_count = 42;
  p.score = 42.0;
  p.rms = 0.375;
  p.frame_index = 12;
  p.crop_bbox = {10.5, 20.25, 300.0, 150.0};

  const auto path = (fs::temp_directory_path() / "padtrack_placement.json").string();
  save_placement(path, p);
  const OverlayPlacement q = load_placement(path);
  CHECK(q.template_name == p.template_name);
  CHECK(q.affine.coeffs() == p.affine.coeffs());
  CHECK(q.inlier_count == p.inlier_count);
  CHECK(q.score == p.score);
  CHECK(q.rms == p.rms);
  CHECK(q.frame_index == p.frame_index);
  CHECK(q.crop_bbox.x0 == p.crop_bbox.x0);
  CHECK(q.crop_bbox.y1 == p.crop_bbox.y1);
  fs::remove(path);

  const auto bad = (fs::temp_directory_path() / "padtrack_placement_bad.json").string();
  std::ofstream(bad) << "{\"format\": \"padtrack-placement-v1\", \"template\": \"x\"}\n";
  CHECK_THROWS_AS(load_placement(bad), FormatError);
  std::ofstream(bad) << "{\"format\": \"other\"}\n";
  CHECK_THROWS_AS(load_placement(bad), FormatError);
  fs::remove(bad);
}

TEST_CASE("frame sources: directory scan validates contiguity, memory source bounds-checks") {
  const ControllerTemplate tmpl = make_template("generic", 6);
  ActionScript script;
  const SynthVideo video = synth_video(tmpl, 3, script, fixed_range(1.0, 1.0), 17);
  const auto dir = (fs::temp_directory_path() / "padtrack_frames").string();
  fs::remove_all(dir);
  write_video(dir, video);

  const FrameSource src = directory_frame_source(dir);
  REQUIRE(src.count == 3);
  for (int i = 0; i < 3; ++i) CHECK(src.get(i) == video.frames[i]);

  fs::remove(fs::path(dir) / "frame_000001.png");
  CHECK_THROWS_AS(directory_frame_source(dir), FormatError);
  fs::remove_all(dir);
  CHECK_THROWS_AS(directory_frame_source(dir), IoError);

  const FrameSource mem = memory_frame_source(video.frames);
  CHECK(mem.count == 3);
  CHECK_THROWS_AS(mem.get(3), ValidationError);
}

}  // TEST_SUITE
