#include "padtrack/locate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "padtrack/common.hpp"
#include "padtrack/jsonio.hpp"
#include "padtrack/parallel.hpp"
#include "padtrack/rng.hpp"

namespace padtrack {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kHarrisK = 0.05;

// Detection sigmas: 2^(k/3) for k = -3..6. Sub-unit levels keep corners
// findable when the overlay is rendered well below template scale.
constexpr double kLevelSigmas[] = {0.5,
                                   0.6299605249474366,
                                   0.7937005259840998,
                                   1.0,
                                   1.2599210498948732,
                                   1.5874010519681994,
                                   2.0,
                                   2.5198420997897464,
                                   3.174802103936399,
                                   4.0};
constexpr int kNumLevels = static_cast<int>(sizeof(kLevelSigmas) / sizeof(kLevelSigmas[0]));

struct Level {
  double sigma = 1.0;
  ImageF smoothed;
  ImageF gx, gy;
  ImageF response;
};

void central_gradients(const ImageF& src, ImageF& gx, ImageF& gy) {
  const int w = src.width(), h = src.height();
  gx = ImageF(w, h, 1, 0.0f);
  gy = ImageF(w, h, 1, 0.0f);
  par::for_each_index(h, [&](long yy) {
    const int y = static_cast<int>(yy);
    if (y == 0 || y == h - 1) return;
    const float* rm = src.row(y - 1);
    const float* r0 = src.row(y);
    const float* rp = src.row(y + 1);
    float* ox = gx.row(y);
    float* oy = gy.row(y);
    for (int x = 1; x < w - 1; ++x) {
      ox[x] = 0.5f * (r0[x + 1] - r0[x - 1]);
      oy[x] = 0.5f * (rp[x] - rm[x]);
    }
  });
}

Level build_level(const ImageF& gray, double sigma) {
  Level lvl;
  lvl.sigma = sigma;
  lvl.smoothed = gaussian_blur(gray, sigma);
  central_gradients(lvl.smoothed, lvl.gx, lvl.gy);

  const int w = gray.width(), h = gray.height();
  ImageF gxx(w, h, 1), gxy(w, h, 1), gyy(w, h, 1);
  par::for_each_index(h, [&](long yy) {
    const int y = static_cast<int>(yy);
    const float* rx = lvl.gx.row(y);
    const float* ry = lvl.gy.row(y);
    float* oxx = gxx.row(y);
    float* oxy = gxy.row(y);
    float* oyy = gyy.row(y);
    for (int x = 0; x < w; ++x) {
      oxx[x] = rx[x] * rx[x];
      oxy[x] = rx[x] * ry[x];
      oyy[x] = ry[x] * ry[x];
    }
  });
  gxx = gaussian_blur(gxx, sigma);
  gxy = gaussian_blur(gxy, sigma);
  gyy = gaussian_blur(gyy, sigma);

  // sigma^4 normalization makes responses comparable across levels (gradients
  // of a blurred image shrink like 1/sigma), so the per-structure maximum
  // along the scale axis lands at the content's intrinsic scale.
  const float norm = static_cast<float>(sigma * sigma * sigma * sigma);
  lvl.response = ImageF(w, h, 1, 0.0f);
  par::for_each_index(h, [&](long yy) {
    const int y = static_cast<int>(yy);
    const float* sxx = gxx.row(y);
    const float* sxy = gxy.row(y);
    const float* syy = gyy.row(y);
    float* out = lvl.response.row(y);
    for (int x = 0; x < w; ++x) {
      const float det = sxx[x] * syy[x] - sxy[x] * sxy[x];
      const float tr = sxx[x] + syy[x];
      out[x] = norm * (det - static_cast<float>(kHarrisK) * tr * tr);
    }
  });
  return lvl;
}

struct Candidate {
  int x = 0, y = 0, level = 0;
  float response = 0.0f;
};

// Vertex offset of the parabola through (-1, rm), (0, r0), (1, rp).
double quadratic_offset(double rm, double r0, double rp) {
  const double denom = rp + rm - 2.0 * r0;
  if (denom >= 0.0) return 0.0;  // not a strict maximum along this axis
  return std::clamp((rm - rp) / (2.0 * denom), -0.5, 0.5);
}

// Up to kMaxOrientations per keypoint: every smoothed-histogram peak within
// 80% of the strongest. Near-symmetric corners flip their dominant gradient
// direction under resampling, so emitting a descriptor per plausible
// orientation keeps a matchable twin alive in both images.
constexpr int kMaxOrientations = 3;

std::vector<double> dominant_orientations(const Level& lvl, int cx, int cy, double sigma) {
  constexpr int kBins = 36;
  const double bin_width = 2.0 * kPi / kBins;
  const double sigma_w = 1.5 * sigma;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma_w));
  const int w = lvl.gx.width(), h = lvl.gx.height();
  double hist[kBins] = {};
  for (int dy = -radius; dy <= radius; ++dy) {
    const int py = cy + dy;
    if (py < 1 || py >= h - 1) continue;
    for (int dx = -radius; dx <= radius; ++dx) {
      const int px = cx + dx;
      if (px < 1 || px >= w - 1) continue;
      const double gx = lvl.gx.at(px, py);
      const double gy = lvl.gy.at(px, py);
      const double mag = std::sqrt(gx * gx + gy * gy);
      if (mag <= 0.0) continue;
      const double weight =
          mag * std::exp(-(static_cast<double>(dx) * dx + static_cast<double>(dy) * dy) /
                         (2.0 * sigma_w * sigma_w));
      double angle = std::atan2(gy, gx);
      if (angle < 0.0) angle += 2.0 * kPi;
      int bin = static_cast<int>(angle / bin_width);
      if (bin >= kBins) bin = kBins - 1;
      hist[bin] += weight;
    }
  }
  for (int pass = 0; pass < 2; ++pass) {
    double smoothed[kBins];
    for (int b = 0; b < kBins; ++b)
      smoothed[b] = 0.25 * hist[(b + kBins - 1) % kBins] + 0.5 * hist[b] +
                    0.25 * hist[(b + 1) % kBins];
    std::copy(smoothed, smoothed + kBins, hist);
  }

  double peak_val = 0.0;
  for (int b = 0; b < kBins; ++b) peak_val = std::max(peak_val, hist[b]);
  if (peak_val <= 0.0) return {0.0};

  struct Peak {
    double value;
    double angle;
  };
  std::vector<Peak> peaks;
  for (int b = 0; b < kBins; ++b) {
    const double l = hist[(b + kBins - 1) % kBins];
    const double r = hist[(b + 1) % kBins];
    if (hist[b] <= l || hist[b] <= r || hist[b] < 0.8 * peak_val) continue;
    const double denom = l + r - 2.0 * hist[b];
    const double offset = denom < 0.0 ? std::clamp((l - r) / (2.0 * denom), -0.5, 0.5) : 0.0;
    double angle = (b + 0.5 + offset) * bin_width;
    if (angle >= 2.0 * kPi) angle -= 2.0 * kPi;
    if (angle < 0.0) angle += 2.0 * kPi;
    peaks.push_back({hist[b], angle});
  }
  if (peaks.empty()) return {0.0};
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.value != b.value) return a.value > b.value;
    return a.angle < b.angle;
  });
  if (peaks.size() > kMaxOrientations) peaks.resize(kMaxOrientations);
  std::vector<double> out;
  out.reserve(peaks.size());
  for (const Peak& p : peaks) out.push_back(p.angle);
  return out;
}

// Gradient-histogram descriptor: 16x16 samples pooled into 4x4 spatial cells
// of 4 orientation bins (64 dims). Sample offsets and gradient angles are
// rotated into the keypoint frame and the footprint scales with the keypoint
// sigma, so descriptors stay comparable across detection levels. Soft
// trilinear binning plus the clamp-renormalize step give tolerance to small
// scale, shift, and contrast mismatches. Returns false for a zero-gradient
// (featureless) patch.
bool gradient_descriptor(const Level& lvl, const Vec2& pos, double orientation, double sigma,
                         std::vector<double>& out) {
  constexpr int kGrid = 16;
  constexpr int kCells = 4;
  constexpr int kOri = kDescriptorDim / (kCells * kCells);
  const double spacing = 0.75 * sigma;
  const double c = std::cos(orientation), s = std::sin(orientation);
  const double weight_sigma = 0.5 * kGrid * spacing;
  const double ori_width = 2.0 * kPi / kOri;
  out.assign(kDescriptorDim, 0.0);

  for (int i = 0; i < kGrid; ++i) {
    const double v = (i - (kGrid - 1) * 0.5) * spacing;
    for (int j = 0; j < kGrid; ++j) {
      const double u = (j - (kGrid - 1) * 0.5) * spacing;
      const double sx = pos.x + c * u - s * v;
      const double sy = pos.y + s * u + c * v;
      const double gx = sample_bilinear(lvl.gx, sx, sy, 0);
      const double gy = sample_bilinear(lvl.gy, sx, sy, 0);
      const double rgx = c * gx + s * gy;
      const double rgy = -s * gx + c * gy;
      const double mag = std::sqrt(rgx * rgx + rgy * rgy);
      if (mag <= 0.0) continue;
      const double w =
          mag * std::exp(-(u * u + v * v) / (2.0 * weight_sigma * weight_sigma));

      double ang = std::atan2(rgy, rgx);
      if (ang < 0.0) ang += 2.0 * kPi;
      const double cx = (j + 0.5) * kCells / kGrid - 0.5;
      const double cy = (i + 0.5) * kCells / kGrid - 0.5;
      const double co = ang / ori_width - 0.5;
      const int x0 = static_cast<int>(std::floor(cx));
      const int y0 = static_cast<int>(std::floor(cy));
      const int o0 = static_cast<int>(std::floor(co));
      const double fx = cx - x0, fy = cy - y0, fo = co - o0;
      for (int dy = 0; dy < 2; ++dy) {
        const int by = y0 + dy;
        if (by < 0 || by >= kCells) continue;
        for (int dx = 0; dx < 2; ++dx) {
          const int bx = x0 + dx;
          if (bx < 0 || bx >= kCells) continue;
          for (int dO = 0; dO < 2; ++dO) {
            const int bo = (o0 + dO + kOri) % kOri;
            const double w3 = w * (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) *
                              (dO ? fo : 1.0 - fo);
            out[(static_cast<std::size_t>(by) * kCells + bx) * kOri + bo] += w3;
          }
        }
      }
    }
  }

  double norm2 = 0.0;
  for (double d : out) norm2 += d * d;
  if (norm2 < 1e-20) return false;
  double inv = 1.0 / std::sqrt(norm2);
  norm2 = 0.0;
  for (double& d : out) {
    d = std::min(d * inv, 0.2);  // cap single-bin dominance
    norm2 += d * d;
  }
  if (norm2 < 1e-20) return false;
  inv = 1.0 / std::sqrt(norm2);
  for (double& d : out) d *= inv;
  return true;
}

// --- descriptor matching -----------------------------------------------------

// Nearest/second-nearest scan for a[i] over b with early bail against the
// current second-best; returns the matched index or -1.
int match_one(const std::vector<Keypoint>& a, const std::vector<Keypoint>& b, int i,
              double ratio_sq) {
  const std::vector<double>& d = a[i].descriptor;
  double best = std::numeric_limits<double>::infinity();
  double second = std::numeric_limits<double>::infinity();
  int best_j = -1;
  for (int j = 0; j < static_cast<int>(b.size()); ++j) {
    const std::vector<double>& e = b[j].descriptor;
    double dist = 0.0;
    for (int k = 0; k < kDescriptorDim; ++k) {
      const double diff = d[k] - e[k];
      dist += diff * diff;
      if (dist >= second) break;
    }
    if (dist < best) {
      second = best;
      best = dist;
      best_j = j;
    } else if (dist < second) {
      second = dist;
    }
  }
  if (best_j < 0) return -1;
  return best < ratio_sq * second ? best_j : -1;
}

// --- robust affine -----------------------------------------------------------

// Least-squares affine over the indexed pairs, solved on centered coordinates.
// Exact for three non-collinear points. Returns nullopt for a degenerate
// source configuration.
std::optional<Affine2> ls_affine(const std::vector<PointPair>& pairs,
                                 const std::vector<int>& idx) {
  const std::size_t n = idx.size();
  if (n < 3) return std::nullopt;
  double msx = 0, msy = 0, mdx = 0, mdy = 0;
  for (int i : idx) {
    msx += pairs[i].src.x;
    msy += pairs[i].src.y;
    mdx += pairs[i].dst.x;
    mdy += pairs[i].dst.y;
  }
  msx /= n;
  msy /= n;
  mdx /= n;
  mdy /= n;
  double sxx = 0, sxy = 0, syy = 0, bax = 0, bbx = 0, bay = 0, bby = 0;
  for (int i : idx) {
    const double u = pairs[i].src.x - msx;
    const double v = pairs[i].src.y - msy;
    const double px = pairs[i].dst.x - mdx;
    const double py = pairs[i].dst.y - mdy;
    sxx += u * u;
    sxy += u * v;
    syy += v * v;
    bax += u * px;
    bbx += v * px;
    bay += u * py;
    bby += v * py;
  }
  const double det = sxx * syy - sxy * sxy;
  if (std::abs(det) < 1e-6) return std::nullopt;
  Affine2 t;
  t.a = (bax * syy - bbx * sxy) / det;
  t.b = (bbx * sxx - bax * sxy) / det;
  t.c = (bay * syy - bby * sxy) / det;
  t.d = (bby * sxx - bay * sxy) / det;
  t.tx = mdx - t.a * msx - t.b * msy;
  t.ty = mdy - t.c * msx - t.d * msy;
  return t;
}

double reproj_err_sq(const Affine2& t, const PointPair& p) {
  const Vec2 q = t.apply(p.src);
  const double ex = q.x - p.dst.x;
  const double ey = q.y - p.dst.y;
  return ex * ex + ey * ey;
}

struct IterResult {
  int count = -1;
  double sse = std::numeric_limits<double>::infinity();
  Affine2 affine;
};

IterResult run_ransac_iteration(const std::vector<PointPair>& pairs, double thr_sq,
                                std::uint64_t seed, int iteration) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(iteration)));
  const std::size_t n = pairs.size();
  const int i0 = static_cast<int>(rng.uniform_index(n));
  int i1 = static_cast<int>(rng.uniform_index(n));
  while (i1 == i0) i1 = static_cast<int>(rng.uniform_index(n));
  int i2 = static_cast<int>(rng.uniform_index(n));
  while (i2 == i0 || i2 == i1) i2 = static_cast<int>(rng.uniform_index(n));
  const auto fit = ls_affine(pairs, {i0, i1, i2});
  IterResult res;
  if (!fit) return res;
  res.affine = *fit;
  res.count = 0;
  res.sse = 0.0;
  for (const PointPair& p : pairs) {
    const double e2 = reproj_err_sq(res.affine, p);
    if (e2 < thr_sq) {
      ++res.count;
      res.sse += e2;
    }
  }
  return res;
}

// Least-squares refit on the consensus set, then polish rounds that shrink the
// inlier radius toward 3x the current RMS so borderline outliers get expelled;
// the returned count is re-measured at the original radius.
std::optional<AffineFit> finalize_fit(const std::vector<PointPair>& pairs, double inlier_px,
                                      int min_inliers, const IterResult& best) {
  if (best.count < 3) return std::nullopt;
  Affine2 model = best.affine;
  double thr = inlier_px;
  for (int round = 0; round < 3; ++round) {
    std::vector<int> inl;
    for (int i = 0; i < static_cast<int>(pairs.size()); ++i)
      if (reproj_err_sq(model, pairs[i]) < thr * thr) inl.push_back(i);
    if (static_cast<int>(inl.size()) < 3) break;
    const auto fit = ls_affine(pairs, inl);
    if (!fit) break;
    model = *fit;
    double sse = 0.0;
    for (int i : inl) sse += reproj_err_sq(model, pairs[i]);
    const double rms = std::sqrt(sse / inl.size());
    thr = std::min(inlier_px, std::max(3.0 * rms, 1e-4));
  }
  int count = 0;
  double sse = 0.0;
  for (const PointPair& p : pairs) {
    const double e2 = reproj_err_sq(model, p);
    if (e2 < inlier_px * inlier_px) {
      ++count;
      sse += e2;
    }
  }
  if (count < min_inliers) return std::nullopt;
  AffineFit out;
  out.affine = model;
  out.inlier_count = count;
  out.rms = count > 0 ? std::sqrt(sse / count) : 0.0;
  return out;
}

// Total order over consensus candidates: more inliers, then smaller inlier
// SSE, then earlier iteration.
bool better_iter(const IterResult& a, const IterResult& b) {
  if (a.count != b.count) return a.count > b.count;
  return a.sse < b.sse;
}

void validate_affine_args(const std::vector<PointPair>& pairs, double inlier_px,
                          int iterations) {
  (void)pairs;
  if (!(inlier_px > 0.0)) throw ConfigError("inlier radius must be positive");
  if (iterations < 1) throw ConfigError("consensus iterations must be >= 1");
}

void crop_pixel(const ImageU8& frame, const Affine2& affine, int x, int y, std::uint8_t* out) {
  const Vec2 p = affine.apply({static_cast<double>(x), static_cast<double>(y)});
  if (p.x < 0.0 || p.y < 0.0 || p.x > frame.width() - 1.0 || p.y > frame.height() - 1.0) {
    out[0] = out[1] = out[2] = 0;
    return;
  }
  for (int c = 0; c < 3; ++c) out[c] = to_u8(sample_bilinear(frame, p.x, p.y, c));
}

}  // namespace

std::vector<Keypoint> detect_and_describe(const ImageF& gray, const DetectorConfig& cfg) {
  if (gray.channels() != 1) throw ValidationError("detector expects a single-channel image");
  if (cfg.max_keypoints < 1) throw ConfigError("max_keypoints must be >= 1");
  const int w = gray.width(), h = gray.height();
  if (w < 32 || h < 32) return {};

  std::vector<Level> levels;
  levels.reserve(kNumLevels);
  for (int l = 0; l < kNumLevels; ++l) levels.push_back(build_level(gray, kLevelSigmas[l]));

  // A keypoint must dominate its 3x3 spatial neighborhood and the 3x3 patches
  // of the adjacent scale levels, so each structure is reported once at its
  // intrinsic scale and descriptor footprints land on comparable content.
  const auto dominates_level = [](const ImageF& R, int x, int y, float v) {
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (v <= R.at(x + dx, y + dy)) return false;
    return true;
  };
  float global_max = 0.0f;
  for (const Level& lvl : levels)
    for (const float v : lvl.response.pixels()) global_max = std::max(global_max, v);
  const float floor = std::max(1e-12f, static_cast<float>(cfg.relative_floor) * global_max);

  std::vector<Candidate> cands;
  for (int l = 0; l < kNumLevels; ++l) {
    const ImageF& R = levels[l].response;
    for (int y = 1; y < h - 1; ++y) {
      const float* rm = R.row(y - 1);
      const float* r0 = R.row(y);
      const float* rp = R.row(y + 1);
      for (int x = 1; x < w - 1; ++x) {
        const float v = r0[x];
        if (v <= floor) continue;
        if (v <= rm[x - 1] || v <= rm[x] || v <= rm[x + 1] || v <= r0[x - 1] ||
            v <= r0[x + 1] || v <= rp[x - 1] || v <= rp[x] || v <= rp[x + 1])
          continue;
        if (l > 0 && !dominates_level(levels[l - 1].response, x, y, v)) continue;
        if (l < kNumLevels - 1 && !dominates_level(levels[l + 1].response, x, y, v)) continue;
        cands.push_back({x, y, l, v});
      }
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.response != b.response) return a.response > b.response;
    if (a.level != b.level) return a.level < b.level;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  const std::size_t refine_cap = static_cast<std::size_t>(cfg.max_keypoints) * 2;
  if (cands.size() > refine_cap) cands.resize(refine_cap);

  std::vector<Keypoint> slots(cands.size() * kMaxOrientations);
  std::vector<char> valid(slots.size(), 0);
  par::for_each_index(static_cast<long>(cands.size()), [&](long ci) {
    const Candidate& c = cands[ci];
    const Level& lvl = levels[c.level];
    const ImageF& R = lvl.response;
    Keypoint kp;
    const double ox = quadratic_offset(R.at(c.x - 1, c.y), R.at(c.x, c.y), R.at(c.x + 1, c.y));
    const double oy = quadratic_offset(R.at(c.x, c.y - 1), R.at(c.x, c.y), R.at(c.x, c.y + 1));
    kp.position = {c.x + ox, c.y + oy};
    double scale_off = 0.0;
    if (c.level > 0 && c.level < kNumLevels - 1)
      scale_off = quadratic_offset(levels[c.level - 1].response.at(c.x, c.y), R.at(c.x, c.y),
                                   levels[c.level + 1].response.at(c.x, c.y));
    kp.scale = lvl.sigma * std::pow(2.0, scale_off / 3.0);
    kp.response = c.response;
    const std::vector<double> orientations = dominant_orientations(lvl, c.x, c.y, kp.scale);
    for (std::size_t o = 0; o < orientations.size(); ++o) {
      kp.orientation = orientations[o];
      if (!gradient_descriptor(lvl, kp.position, kp.orientation, kp.scale, kp.descriptor))
        continue;
      slots[ci * kMaxOrientations + o] = kp;
      valid[ci * kMaxOrientations + o] = 1;
    }
  });

  std::vector<Keypoint> kps;
  kps.reserve(cands.size());
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (valid[i]) kps.push_back(std::move(slots[i]));
  std::sort(kps.begin(), kps.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.response != b.response) return a.response > b.response;
    if (a.position.y != b.position.y) return a.position.y < b.position.y;
    if (a.position.x != b.position.x) return a.position.x < b.position.x;
    if (a.scale != b.scale) return a.scale < b.scale;
    return a.orientation < b.orientation;
  });
  if (kps.size() > static_cast<std::size_t>(cfg.max_keypoints))
    kps.resize(static_cast<std::size_t>(cfg.max_keypoints));
  return kps;
}

std::vector<std::pair<int, int>> match_descriptors(const std::vector<Keypoint>& a,
                                                   const std::vector<Keypoint>& b,
                                                   double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("match ratio must be in (0, 1)");
  if (a.empty() || b.empty()) return {};
  const double ratio_sq = ratio * ratio;
  std::vector<int> match_of(a.size(), -1);
  par::for_each_index(static_cast<long>(a.size()),
                      [&](long i) { match_of[i] = match_one(a, b, static_cast<int>(i), ratio_sq); });
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < static_cast<int>(a.size()); ++i)
    if (match_of[i] >= 0) out.emplace_back(i, match_of[i]);
  return out;
}

std::vector<std::pair<int, int>> match_descriptors_serial(const std::vector<Keypoint>& a,
                                                          const std::vector<Keypoint>& b,
                                                          double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("match ratio must be in (0, 1)");
  if (a.empty() || b.empty()) return {};
  const double ratio_sq = ratio * ratio;
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < static_cast<int>(a.size()); ++i) {
    const int j = match_one(a, b, i, ratio_sq);
    if (j >= 0) out.emplace_back(i, j);
  }
  return out;
}

std::optional<AffineFit> estimate_affine(const std::vector<PointPair>& pairs, double inlier_px,
                                         int iterations, std::uint64_t seed, int min_inliers) {
  validate_affine_args(pairs, inlier_px, iterations);
  if (pairs.size() < 3 || static_cast<int>(pairs.size()) < min_inliers) return std::nullopt;
  std::vector<IterResult> results(iterations);
  const double thr_sq = inlier_px * inlier_px;
  par::for_each_index(iterations, [&](long it) {
    results[it] = run_ransac_iteration(pairs, thr_sq, seed, static_cast<int>(it));
  });
  int best = 0;
  for (int it = 1; it < iterations; ++it)
    if (better_iter(results[it], results[best])) best = it;
  return finalize_fit(pairs, inlier_px, min_inliers, results[best]);
}

std::optional<AffineFit> estimate_affine_serial(const std::vector<PointPair>& pairs,
                                                double inlier_px, int iterations,
                                                std::uint64_t seed, int min_inliers) {
  validate_affine_args(pairs, inlier_px, iterations);
  if (pairs.size() < 3 || static_cast<int>(pairs.size()) < min_inliers) return std::nullopt;
  const double thr_sq = inlier_px * inlier_px;
  IterResult best;
  for (int it = 0; it < iterations; ++it) {
    IterResult r = run_ransac_iteration(pairs, thr_sq, seed, it);
    if (it == 0 || better_iter(r, best)) best = r;
  }
  return finalize_fit(pairs, inlier_px, min_inliers, best);
}

std::vector<int> sample_frame_indices(int frame_count, int max_frames) {
  if (frame_count < 1) return {};
  if (max_frames < 1) throw ConfigError("frame sample count must be >= 1");
  std::vector<int> idx;
  if (frame_count <= max_frames) {
    idx.resize(frame_count);
    for (int i = 0; i < frame_count; ++i) idx[i] = i;
    return idx;
  }
  idx.reserve(max_frames);
  for (int i = 0; i < max_frames; ++i)
    idx.push_back(static_cast<int>(static_cast<long>(i) * (frame_count - 1) / (max_frames - 1)));
  return idx;
}

std::optional<OverlayPlacement> locate_overlay(const FrameSource& video,
                                               const std::vector<ControllerTemplate>& templates,
                                               std::uint64_t seed, const LocateConfig& cfg) {
  if (video.count < 1) throw ValidationError("video has no frames");
  if (templates.empty()) throw ValidationError("no templates to match against");

  DetectorConfig tmpl_cfg = cfg.detector;
  tmpl_cfg.max_keypoints = cfg.template_keypoints;
  const int nt = static_cast<int>(templates.size());
  std::vector<std::vector<Keypoint>> tmpl_kps(nt);
  for (int t = 0; t < nt; ++t)
    tmpl_kps[t] = detect_and_describe(to_grayscale(templates[t].base_image), tmpl_cfg);

  const std::vector<int> frames = sample_frame_indices(video.count, cfg.sample_frames);
  const int nf = static_cast<int>(frames.size());
  std::vector<std::vector<Keypoint>> frame_kps(nf);
  std::vector<std::pair<int, int>> frame_dims(nf);
  par::for_each_index(nf, [&](long fi) {
    const ImageU8 img = video.get(frames[fi]);
    frame_dims[fi] = {img.width(), img.height()};
    frame_kps[fi] = detect_and_describe(to_grayscale(img), cfg.detector);
  });

  struct Candidate {
    bool found = false;
    AffineFit fit;
  };
  std::vector<Candidate> cands(static_cast<std::size_t>(nf) * nt);
  par::for_each_index(static_cast<long>(cands.size()), [&](long k) {
    const int fi = static_cast<int>(k) / nt;
    const int t = static_cast<int>(k) % nt;
    const auto matches = match_descriptors(tmpl_kps[t], frame_kps[fi], cfg.match_ratio);
    if (static_cast<int>(matches.size()) < cfg.min_inliers) return;
    std::vector<PointPair> pairs;
    pairs.reserve(matches.size());
    for (const auto& [i, j] : matches)
      pairs.push_back({tmpl_kps[t][i].position, frame_kps[fi][j].position});
    const auto fit =
        estimate_affine(pairs, cfg.inlier_px, cfg.ransac_iterations,
                        derive_seed(seed, static_cast<std::uint64_t>(frames[fi]),
                                    static_cast<std::uint64_t>(t)),
                        cfg.min_inliers);
    if (!fit) return;
    cands[k] = {true, *fit};
  });

  int best = -1;
  for (int k = 0; k < static_cast<int>(cands.size()); ++k) {
    if (!cands[k].found) continue;
    if (best < 0) {
      best = k;
      continue;
    }
    const AffineFit& a = cands[k].fit;
    const AffineFit& b = cands[best].fit;
    if (a.inlier_count != b.inlier_count) {
      if (a.inlier_count > b.inlier_count) best = k;
      continue;
    }
    if (a.rms != b.rms) {
      if (a.rms < b.rms) best = k;
      continue;
    }
    const std::string& an = templates[k % nt].name;
    const std::string& bn = templates[best % nt].name;
    if (an != bn && an < bn) best = k;
    // equal name implies an earlier frame index already holds `best`
  }
  if (best < 0) return std::nullopt;

  const int fi = best / nt;
  const int t = best % nt;
  OverlayPlacement placement;
  placement.template_name = templates[t].name;
  placement.affine = cands[best].fit.affine;
  placement.inlier_count = cands[best].fit.inlier_count;
  placement.score = cands[best].fit.inlier_count;
  placement.rms = cands[best].fit.rms;
  placement.frame_index = frames[fi];
  placement.crop_bbox =
      transformed_bounds(placement.affine, templates[t].base_image.width(),
                         templates[t].base_image.height())
          .clamped(frame_dims[fi].first, frame_dims[fi].second);
  return placement;
}

ImageU8 crop_overlay(const ImageU8& frame, const Affine2& affine, int out_w, int out_h) {
  if (frame.channels() != 3) throw ValidationError("crop expects an RGB frame");
  if (out_w < 1 || out_h < 1) throw ConfigError("canonical crop size must be positive");
  ImageU8 out(out_w, out_h, 3);
  par::for_each_index(out_h, [&](long y) {
    std::uint8_t* row = out.row(static_cast<int>(y));
    for (int x = 0; x < out_w; ++x)
      crop_pixel(frame, affine, x, static_cast<int>(y), row + 3 * x);
  });
  return out;
}

ImageU8 crop_overlay_serial(const ImageU8& frame, const Affine2& affine, int out_w, int out_h) {
  if (frame.channels() != 3) throw ValidationError("crop expects an RGB frame");
  if (out_w < 1 || out_h < 1) throw ConfigError("canonical crop size must be positive");
  ImageU8 out(out_w, out_h, 3);
  for (int y = 0; y < out_h; ++y) {
    std::uint8_t* row = out.row(y);
    for (int x = 0; x < out_w; ++x) crop_pixel(frame, affine, x, y, row + 3 * x);
  }
  return out;
}

void save_placement(const std::string& path, const OverlayPlacement& placement) {
  Json j;
  j["format"] = "padtrack-placement-v1";
  j["template"] = placement.template_name;
  j["affine"] = placement.affine.coeffs();
  j["inlier_count"] = placement.inlier_count;
  j["score"] = placement.score;
  j["rms"] = placement.rms;
  j["frame_index"] = placement.frame_index;
  j["bbox"] = {placement.crop_bbox.x0, placement.crop_bbox.y0, placement.crop_bbox.x1,
               placement.crop_bbox.y1};
  write_json(path, j);
}

OverlayPlacement load_placement(const std::string& path) {
  const Json j = read_json(path);
  try {
    if (j.at("format").get<std::string>() != "padtrack-placement-v1")
      throw FormatError("unsupported placement format in " + path);
    OverlayPlacement p;
    p.template_name = j.at("template").get<std::string>();
    const auto coeffs = j.at("affine").get<std::array<double, 6>>();
    p.affine = Affine2::from_coeffs(coeffs);
    p.inlier_count = j.at("inlier_count").get<int>();
    p.score = j.value("score", static_cast<double>(p.inlier_count));
    p.rms = j.value("rms", 0.0);
    p.frame_index = j.value("frame_index", 0);
    const auto bbox = j.at("bbox").get<std::array<double, 4>>();
    p.crop_bbox = {bbox[0], bbox[1], bbox[2], bbox[3]};
    return p;
  } catch (const Json::exception& e) {
    throw FormatError("bad placement file " + path + ": " + e.what());
  }
}

}  // namespace padtrack
