#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "padtrack/frames.hpp"
#include "padtrack/geometry.hpp"
#include "padtrack/image.hpp"
#include "padtrack/synth.hpp"

namespace padtrack {

inline constexpr int kDescriptorDim = 64;

// Scale-space corner with an orientation-normalized patch descriptor.
struct Keypoint {
  Vec2 position;          // subpixel, image coordinates
  double scale = 1.0;     // detection sigma in pixels
  double orientation = 0.0;  // radians in [0, 2*pi)
  double response = 0.0;
  std::vector<double> descriptor;  // kDescriptorDim entries, zero-mean, unit norm
};

struct DetectorConfig {
  int max_keypoints = 2000;
  // NMS keeps corner responses above this fraction of the per-level maximum.
  double relative_floor = 0.003;
};

// Multi-scale Harris corners; descriptors are 8x8 oriented patch samples from
// the matching pyramid level, mean-subtracted and L2-normalized. Keypoints are
// ordered by decreasing response (ties by y, x, scale) and capped. Images
// smaller than 32x32 yield an empty list.
std::vector<Keypoint> detect_and_describe(const ImageF& gray, const DetectorConfig& cfg = {});

// Nearest-neighbor matches a -> b under the ratio test: (i, j) is kept iff j
// is i's nearest neighbor and dist(i,j) < ratio * dist(i, second-nearest).
// Equidistant nearest pair makes the ratio 1, which fails the strict test.
std::vector<std::pair<int, int>> match_descriptors(const std::vector<Keypoint>& a,
                                                   const std::vector<Keypoint>& b, double ratio);
std::vector<std::pair<int, int>> match_descriptors_serial(const std::vector<Keypoint>& a,
                                                          const std::vector<Keypoint>& b,
                                                          double ratio);

struct PointPair {
  Vec2 src;
  Vec2 dst;
};

struct AffineFit {
  Affine2 affine;  // src -> dst
  int inlier_count = 0;
  double rms = 0.0;  // reprojection RMS over the final inlier set
};

// Robust consensus fit of a 2x3 affine: samples 3 pairs per iteration, solves
// exactly, counts pairs with reprojection error < inlier_px, then refits by
// least squares on the best set with threshold-tightening polish rounds. The
// reported inlier_count is recounted at the original inlier_px. Returns
// no-model for fewer than 3 pairs or a best count below min_inliers.
std::optional<AffineFit> estimate_affine(const std::vector<PointPair>& pairs,
                                         double inlier_px = 3.0, int iterations = 2000,
                                         std::uint64_t seed = 0, int min_inliers = 20);
std::optional<AffineFit> estimate_affine_serial(const std::vector<PointPair>& pairs,
                                                double inlier_px = 3.0, int iterations = 2000,
                                                std::uint64_t seed = 0, int min_inliers = 20);

struct OverlayPlacement {
  std::string template_name;
  Affine2 affine;  // template -> frame
  int inlier_count = 0;
  double score = 0.0;  // equals inlier_count
  double rms = 0.0;
  int frame_index = 0;  // sampled frame that produced the winning fit
  Rect crop_bbox;       // template bounds mapped into the frame, clamped
};

struct LocateConfig {
  DetectorConfig detector;       // frame-side detection
  int template_keypoints = 800;  // tighter cap on the template side
  double match_ratio = 0.75;
  double inlier_px = 3.0;
  int ransac_iterations = 2000;
  int min_inliers = 20;
  int sample_frames = 25;
};

// Uniformly spaced sample of min(frame_count, max_frames) distinct indices
// covering [0, frame_count).
std::vector<int> sample_frame_indices(int frame_count, int max_frames);

// Finds the overlay: detect/match/estimate for every sampled frame x template
// candidate, scored by inlier count; ties broken by smaller reprojection RMS,
// then lexicographic template name, then frame index. Returns nullopt when no
// candidate reaches min_inliers.
std::optional<OverlayPlacement> locate_overlay(const FrameSource& video,
                                               const std::vector<ControllerTemplate>& templates,
                                               std::uint64_t seed, const LocateConfig& cfg = {});

// Inverse-warps the frame through the placement affine into template
// coordinates at the canonical size; bilinear sampling, out-of-frame black.
ImageU8 crop_overlay(const ImageU8& frame, const Affine2& affine, int out_w = 256,
                     int out_h = 128);
ImageU8 crop_overlay_serial(const ImageU8& frame, const Affine2& affine, int out_w = 256,
                            int out_h = 128);

void save_placement(const std::string& path, const OverlayPlacement& placement);
OverlayPlacement load_placement(const std::string& path);

}  // namespace padtrack
