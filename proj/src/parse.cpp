#include "padtrack/parse.hpp"

#include <algorithm>
#include <cmath>
#include <exception>

#include "padtrack/common.hpp"
#include "padtrack/jsonio.hpp"
#include "padtrack/parallel.hpp"

namespace padtrack {

namespace {

// Least-squares fit C ~ a*T + b_c with one gain shared by all channels and a
// per-channel bias; models the opacity blend C = op*T + (1-op)*background.
struct GainBias {
  double a = 0.0;
  std::array<double, 3> b{};
};

constexpr double kVarEps = 1e-9;

void require_canonical(const ImageU8& crop, const ParserConfig& cfg) {
  if (crop.channels() != 3) throw ValidationError("parser expects an RGB crop");
  if (crop.width() != cfg.canonical_width || crop.height() != cfg.canonical_height)
    throw DimensionError("crop is " + std::to_string(crop.width()) + "x" +
                         std::to_string(crop.height()) + ", expected canonical " +
                         std::to_string(cfg.canonical_width) + "x" +
                         std::to_string(cfg.canonical_height));
}

// Fits crop pixels against a same-sized reference patch over one rectangle.
// The reference may be RGBA; only its RGB channels participate.
GainBias fit_gain_bias(const ImageU8& crop, int cx0, int cy0, const ImageU8& ref, int rx0, int ry0,
                       int w, int h) {
  std::array<double, 3> mean_t{}, mean_c{};
  const double n = static_cast<double>(w) * h;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        mean_t[c] += ref.at(rx0 + x, ry0 + y, c);
        mean_c[c] += crop.at(cx0 + x, cy0 + y, c);
      }
  for (int c = 0; c < 3; ++c) {
    mean_t[c] /= n;
    mean_c[c] /= n;
  }
  double cov = 0.0, var = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double dt = ref.at(rx0 + x, ry0 + y, c) - mean_t[c];
        cov += dt * (crop.at(cx0 + x, cy0 + y, c) - mean_c[c]);
        var += dt * dt;
      }
  GainBias fit;
  fit.a = var > kVarEps ? cov / var : 0.0;
  for (int c = 0; c < 3; ++c) fit.b[c] = mean_c[c] - fit.a * mean_t[c];
  return fit;
}

// Negative mean absolute residual of the crop region against the fitted
// reference, normalized to [0, 1] intensity units.
double patch_similarity(const ImageU8& crop, const Rect& region, const ImageU8& patch) {
  const int x0 = static_cast<int>(std::lround(region.x0));
  const int y0 = static_cast<int>(std::lround(region.y0));
  const int w = patch.width(), h = patch.height();
  const GainBias fit = fit_gain_bias(crop, x0, y0, patch, 0, 0, w, h);
  double sum = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        sum += std::abs(crop.at(x0 + x, y0 + y, c) - fit.a * patch.at(x, y, c) - fit.b[c]);
  return -sum / (3.0 * w * h * 255.0);
}

// Gain/bias fit of the whole crop against the opaque part of the base art.
// Pressed patches and indicators cover a small fraction of the pixels, so
// the fit tracks opacity and mean background despite them.
GainBias fit_crop_to_base(const ImageU8& crop, const ImageU8& base) {
  std::array<double, 3> mean_t{}, mean_c{};
  std::size_t n = 0;
  for (int y = 0; y < base.height(); ++y)
    for (int x = 0; x < base.width(); ++x) {
      if (base.at(x, y, 3) == 0) continue;
      ++n;
      for (int c = 0; c < 3; ++c) {
        mean_t[c] += base.at(x, y, c);
        mean_c[c] += crop.at(x, y, c);
      }
    }
  GainBias fit;
  if (n == 0) return fit;
  for (int c = 0; c < 3; ++c) {
    mean_t[c] /= static_cast<double>(n);
    mean_c[c] /= static_cast<double>(n);
  }
  double cov = 0.0, var = 0.0;
  for (int y = 0; y < base.height(); ++y)
    for (int x = 0; x < base.width(); ++x) {
      if (base.at(x, y, 3) == 0) continue;
      for (int c = 0; c < 3; ++c) {
        const double dt = base.at(x, y, c) - mean_t[c];
        cov += dt * (crop.at(x, y, c) - mean_c[c]);
        var += dt * dt;
      }
    }
  fit.a = var > kVarEps ? cov / var : 0.0;
  for (int c = 0; c < 3; ++c) fit.b[c] = mean_c[c] - fit.a * mean_t[c];
  return fit;
}

int grid_cell(double displacement, double travel) {
  const long cell = std::lround(kGridCenter + kGridCenter * displacement / travel);
  return static_cast<int>(std::clamp(cell, 0L, static_cast<long>(kGridMax)));
}

// Largest 4-connected component's centroid among pixels of the stick's
// reachable disc whose color sits near the predicted indicator appearance.
std::optional<Vec2> segment_indicator(const ImageU8& crop, const StickControl& stick,
                                      const GainBias& fit, double blob_threshold) {
  std::array<double, 3> expect{};
  for (int c = 0; c < 3; ++c)
    expect[c] = std::clamp(fit.a * stick.indicator_color[c] + fit.b[c], 0.0, 255.0);

  const double radius = stick.travel_radius + stick.indicator_radius + 1.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(stick.center.x - radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(stick.center.y - radius)));
  const int x1 = std::min(crop.width() - 1, static_cast<int>(std::ceil(stick.center.x + radius)));
  const int y1 = std::min(crop.height() - 1, static_cast<int>(std::ceil(stick.center.y + radius)));
  if (x1 < x0 || y1 < y0) return std::nullopt;

  const int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(bw) * bh, 0);
  const double r2 = radius * radius;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - stick.center.x, dy = y - stick.center.y;
      if (dx * dx + dy * dy > r2) continue;
      double dist = 0.0;
      for (int c = 0; c < 3; ++c) dist += std::abs(crop.at(x, y, c) - expect[c]);
      if (dist / (3.0 * 255.0) < blob_threshold)
        mask[static_cast<std::size_t>(y - y0) * bw + (x - x0)] = 1;
    }

  // Flood fill in scan order; the first largest component wins ties, which
  // is deterministic because the scan order is fixed.
  std::vector<int> stack;
  double best_sx = 0.0, best_sy = 0.0;
  int best_n = 0;
  for (int i = 0; i < bw * bh; ++i) {
    if (mask[i] != 1) continue;
    double sx = 0.0, sy = 0.0;
    int cnt = 0;
    stack.assign(1, i);
    mask[i] = 2;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int px = p % bw, py = p / bw;
      sx += px;
      sy += py;
      ++cnt;
      const int nbrs[4] = {p - 1, p + 1, p - bw, p + bw};
      const bool ok[4] = {px > 0, px < bw - 1, py > 0, py < bh - 1};
      for (int k = 0; k < 4; ++k)
        if (ok[k] && mask[nbrs[k]] == 1) {
          mask[nbrs[k]] = 2;
          stack.push_back(nbrs[k]);
        }
    }
    if (cnt > best_n) {
      best_n = cnt;
      best_sx = sx;
      best_sy = sy;
    }
  }
  if (best_n == 0) return std::nullopt;
  return Vec2{x0 + best_sx / best_n, y0 + best_sy / best_n};
}

}  // namespace

double nearest_rank_percentile(std::vector<double> values, double percentile) {
  if (values.empty()) throw ValidationError("percentile of an empty list is undefined");
  if (!(percentile > 0.0) || percentile > 100.0)
    throw ConfigError("percentile must lie in (0, 100]");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  const auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

void ParserConfig::validate() const {
  if (!(button_margin >= 0.0)) throw ConfigError("button_margin must be >= 0");
  if (!(blob_threshold > 0.0) || !(blob_threshold < 1.0))
    throw ConfigError("blob_threshold must lie in (0, 1)");
  if (!(percentile > 0.0) || percentile > 100.0)
    throw ConfigError("percentile must lie in (0, 100]");
  if (canonical_width < 1 || canonical_height < 1)
    throw ConfigError("canonical size must be positive");
}

std::array<bool, kNumButtons> classify_buttons(const ImageU8& crop, const ControllerTemplate& tmpl,
                                               const ParserConfig& cfg) {
  cfg.validate();
  require_canonical(crop, cfg);
  std::array<bool, kNumButtons> out{};
  for (int i = 0; i < kNumButtons; ++i) {
    const ButtonControl& b = tmpl.buttons[i];
    const double pressed = patch_similarity(crop, b.region, b.pressed);
    const double released = patch_similarity(crop, b.region, b.released);
    out[i] = pressed - released > cfg.button_margin;
  }
  return out;
}

GridReading read_stick_grid(const ImageU8& crop, const ControllerTemplate& tmpl,
                            const ParserConfig& cfg) {
  return parse_frame(crop, tmpl, cfg).grid;
}

ParsedFrame parse_frame(const ImageU8& crop, const ControllerTemplate& tmpl,
                        const ParserConfig& cfg) {
  cfg.validate();
  require_canonical(crop, cfg);
  ParsedFrame out;
  out.buttons = classify_buttons(crop, tmpl, cfg);
  const GainBias fit = fit_crop_to_base(crop, tmpl.base_image);
  for (int s = 0; s < 2; ++s) {
    const StickControl& stick = tmpl.sticks[s];
    out.centroids[s] = segment_indicator(crop, stick, fit, cfg.blob_threshold);
    int cx = kGridCenter, cy = kGridCenter;
    if (out.centroids[s]) {
      cx = grid_cell(out.centroids[s]->x - stick.center.x, stick.travel_radius);
      cy = grid_cell(out.centroids[s]->y - stick.center.y, stick.travel_radius);
    }
    if (s == 0) {
      out.grid.left_cx = cx;
      out.grid.left_cy = cy;
    } else {
      out.grid.right_cx = cx;
      out.grid.right_cy = cy;
    }
  }
  return out;
}

ReferenceParser::ReferenceParser(ControllerTemplate tmpl, ParserConfig cfg)
    : tmpl_(std::move(tmpl)), cfg_(cfg) {
  cfg_.validate();
  tmpl_.validate();
  if (tmpl_.base_image.width() != cfg_.canonical_width ||
      tmpl_.base_image.height() != cfg_.canonical_height)
    throw ConfigError("template art does not match the canonical crop size");
}

ParsedFrame ReferenceParser::parse(const ImageU8& prev_crop, const ImageU8& crop) const {
  (void)prev_crop;
  return parse_frame(crop, tmpl_, cfg_);
}

ParsedVideo parse_video(const FrameSource& frames, const OverlayPlacement& placement,
                        const FrameParser& parser, const ParseMeta& meta) {
  if (frames.count < 1) throw ValidationError("parse_video needs at least one frame");
  const int n = frames.count;
  const int cw = parser.canonical_width(), ch = parser.canonical_height();

  std::vector<ImageU8> crops(n);
  std::vector<std::exception_ptr> errors(n);
  par::for_each_index(n, [&](std::ptrdiff_t i) {
    try {
      crops[i] = crop_overlay(frames.get(static_cast<int>(i)), placement.affine, cw, ch);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<ParsedFrame> parsed(n);
  par::for_each_index(n, [&](std::ptrdiff_t i) {
    try {
      parsed[i] = parser.parse(crops[i == 0 ? 0 : i - 1], crops[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  ParsedVideo out;
  out.raw.video_id = meta.video_id.empty() ? "video" : meta.video_id;
  out.raw.fps = meta.fps;
  out.raw.controller_family =
      meta.controller_family.empty() ? "unknown" : meta.controller_family;
  out.raw.frames.resize(n);
  out.centroids.resize(n);
  for (int i = 0; i < n; ++i) {
    out.raw.frames[i].buttons = parsed[i].buttons;
    out.raw.frames[i].grid = parsed[i].grid;
    out.centroids[i] = parsed[i].centroids;
  }
  return out;
}

ParsedVideo parse_video(const FrameSource& frames, const OverlayPlacement& placement,
                        const ControllerTemplate& tmpl, const ParserConfig& cfg,
                        const ParseMeta& meta) {
  ReferenceParser parser(tmpl, cfg);
  ParseMeta filled = meta;
  if (filled.controller_family.empty()) filled.controller_family = tmpl.family;
  return parse_video(frames, placement, parser, filled);
}

CenterEstimate estimate_centers(const ParsedVideo& video, const ControllerTemplate& tmpl) {
  if (video.raw.frames.empty()) throw ValidationError("center estimation needs frames");
  if (video.centroids.size() != video.raw.frames.size())
    throw DimensionError("centroid list does not match track length");
  CenterEstimate est;
  for (int s = 0; s < 2; ++s) {
    Vec2 acc{0.0, 0.0};
    int n = 0;
    for (std::size_t i = 0; i < video.raw.frames.size(); ++i) {
      const GridReading& g = video.raw.frames[i].grid;
      const bool centered = s == 0 ? g.centered_left() : g.centered_right();
      if (!centered || !video.centroids[i][s]) continue;
      acc = acc + *video.centroids[i][s];
      ++n;
    }
    if (n > 0) {
      est.centers[s] = acc * (1.0 / n);
    } else {
      est.centers[s] = tmpl.sticks[s].center;
      est.fallback[s] = true;
    }
  }
  return est;
}

NormalizedTrack normalize_track(const ParsedVideo& video, const CenterEstimate& centers,
                                const ParserConfig& cfg) {
  cfg.validate();
  if (video.raw.frames.empty()) throw ValidationError("normalization needs frames");
  if (video.centroids.size() != video.raw.frames.size())
    throw DimensionError("centroid list does not match track length");
  const std::size_t n = video.raw.frames.size();

  // Image-space displacements from the estimated centers; axis order
  // lx, ly, rx, ry with y still pointing down at this stage.
  std::vector<std::array<double, 4>> disp(n);
  std::array<std::vector<double>, 4> magnitudes;
  for (auto& m : magnitudes) m.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int s = 0; s < 2; ++s) {
      Vec2 d{0.0, 0.0};
      if (video.centroids[i][s]) d = *video.centroids[i][s] - centers.centers[s];
      disp[i][s * 2] = d.x;
      disp[i][s * 2 + 1] = d.y;
      magnitudes[s * 2].push_back(std::abs(d.x));
      magnitudes[s * 2 + 1].push_back(std::abs(d.y));
    }
  }

  NormalizedTrack out;
  out.video_id = video.raw.video_id;
  out.fps = video.raw.fps;
  out.controller_family = video.raw.controller_family;
  out.centers = centers.centers;
  for (int a = 0; a < 4; ++a) {
    const double scale = nearest_rank_percentile(magnitudes[a], cfg.percentile);
    out.scales[a] = scale < 1e-6 ? 1.0 : scale;
  }

  out.frames.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.frames[i].buttons = video.raw.frames[i].buttons;
    for (int s = 0; s < 2; ++s) {
      const double nx = disp[i][s * 2] / out.scales[s * 2];
      const double ny = -disp[i][s * 2 + 1] / out.scales[s * 2 + 1];
      out.frames[i].sticks[s * 2] = std::clamp(nx, -1.0, 1.0);
      out.frames[i].sticks[s * 2 + 1] = std::clamp(ny, -1.0, 1.0);
    }
  }
  return out;
}

ImageU8 mask_overlay(const ImageU8& frame, const Affine2& placement,
                     const ControllerTemplate& tmpl) {
  if (frame.channels() != 3) throw ValidationError("mask_overlay expects an RGB frame");
  if (std::abs(placement.det()) < 1e-9) throw ValidationError("placement affine is degenerate");
  const ImageU8& ov = tmpl.base_image;
  ImageU8 out = frame;
  const Affine2 inv = placement.inverse();
  const double tw = ov.width(), th = ov.height();
  const Rect bounds = transformed_bounds(placement, tw, th);
  const int y0 = std::max(0, static_cast<int>(std::floor(bounds.y0)));
  const int y1 = std::min(frame.height(), static_cast<int>(std::ceil(bounds.y1)) + 1);
  const int x0 = std::max(0, static_cast<int>(std::floor(bounds.x0)));
  const int x1 = std::min(frame.width(), static_cast<int>(std::ceil(bounds.x1)) + 1);

  // Same footprint rule as the renderer: a pixel is covered iff any bilinear
  // tap with nonzero weight lands on template alpha > 0.
  par::for_each_index(static_cast<std::ptrdiff_t>(std::max(0, y1 - y0)), [&](std::ptrdiff_t row) {
    const int y = y0 + static_cast<int>(row);
    for (int x = x0; x < x1; ++x) {
      const Vec2 q = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      if (q.x < -1 || q.x > tw || q.y < -1 || q.y > th) continue;
      const double fx = std::floor(q.x), fy = std::floor(q.y);
      const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
      const double ax = q.x - fx, ay = q.y - fy;
      const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
      const int xs[4] = {ix, ix + 1, ix, ix + 1};
      const int ys[4] = {iy, iy, iy + 1, iy + 1};
      double pa = 0.0;
      for (int k = 0; k < 4; ++k) {
        if (wts[k] == 0.0 || xs[k] < 0 || ys[k] < 0 || xs[k] >= ov.width() ||
            ys[k] >= ov.height())
          continue;
        pa += wts[k] * (ov.at(xs[k], ys[k], 3) / 255.0);
      }
      if (pa > 0.0)
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = 0;
    }
  });
  return out;
}

ParseReport build_parse_report(const ParsedVideo& video, const CenterEstimate& centers,
                               const NormalizedTrack& track, const OverlayPlacement& placement) {
  ParseReport r;
  r.video_id = video.raw.video_id;
  r.template_name = placement.template_name;
  r.controller_family = video.raw.controller_family;
  r.n_frames = static_cast<int>(video.raw.frames.size());
  r.centers = centers.centers;
  r.center_fallback = centers.fallback;
  r.scales = track.scales;
  for (const auto& frame : video.centroids)
    for (int s = 0; s < 2; ++s)
      if (!frame[s]) ++r.frames_without_indicator[s];
  return r;
}

void save_parse_report(const std::string& path, const ParseReport& report) {
  Json j;
  j["format"] = "padtrack-parse-report-v1";
  j["video_id"] = report.video_id;
  j["template"] = report.template_name;
  j["family"] = report.controller_family;
  j["n_frames"] = report.n_frames;
  j["centers"] = {{report.centers[0].x, report.centers[0].y},
                  {report.centers[1].x, report.centers[1].y}};
  j["center_fallback"] = {report.center_fallback[0], report.center_fallback[1]};
  j["scales"] = {report.scales[0], report.scales[1], report.scales[2], report.scales[3]};
  j["frames_without_indicator"] = {report.frames_without_indicator[0],
                                   report.frames_without_indicator[1]};
  j["percentile"] = report.percentile;
  write_json(path, j);
}

ParseReport load_parse_report(const std::string& path) {
  const Json j = read_json(path);
  try {
    if (j.at("format").get<std::string>() != "padtrack-parse-report-v1")
      throw FormatError("unsupported parse report format in " + path);
    ParseReport r;
    r.video_id = j.at("video_id").get<std::string>();
    r.template_name = j.at("template").get<std::string>();
    r.controller_family = j.at("family").get<std::string>();
    r.n_frames = j.at("n_frames").get<int>();
    for (int s = 0; s < 2; ++s) {
      r.centers[s] = {j.at("centers").at(s).at(0).get<double>(),
                      j.at("centers").at(s).at(1).get<double>()};
      r.center_fallback[s] = j.at("center_fallback").at(s).get<bool>();
      r.frames_without_indicator[s] = j.at("frames_without_indicator").at(s).get<int>();
    }
    for (int a = 0; a < 4; ++a) r.scales[a] = j.at("scales").at(a).get<double>();
    r.percentile = j.at("percentile").get<double>();
    return r;
  } catch (const Json::exception& e) {
    throw FormatError("malformed parse report " + path + ": " + e.what());
  }
}

}  // namespace padtrack
