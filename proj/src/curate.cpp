#include "padtrack/curate.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "padtrack/common.hpp"
#include "padtrack/frames.hpp"
#include "padtrack/jsonio.hpp"
#include "padtrack/parallel.hpp"
#include "padtrack/rng.hpp"

namespace padtrack {

namespace {

void check_slice(int n, int start, int end) {
  if (start < 0 || end > n || start >= end)
    throw ValidationError("track slice [" + std::to_string(start) + ", " + std::to_string(end) +
                          ") is empty or out of range for " + std::to_string(n) + " frames");
}

template <typename Track, typename NullFn>
std::vector<Segment> segment_impl(const Track& track, int segment_len, NullFn is_null) {
  if (segment_len < 1) throw ConfigError("segment_len must be >= 1");
  const int n = static_cast<int>(track.frames.size());
  std::vector<Segment> out;
  for (int start = 0; start < n; start += segment_len) {
    const int end = std::min(n, start + segment_len);
    int non_null = 0;
    for (int i = start; i < end; ++i) non_null += is_null(track.frames[i]) ? 0 : 1;
    Segment s;
    s.video_id = track.video_id;
    s.start_frame = start;
    s.end_frame = end;
    s.density = static_cast<double>(non_null) / (end - start);
    out.push_back(std::move(s));
  }
  return out;
}

// Truth stick series per axis, in stick units (y up), from the stored grid
// cells; normalized with the identical percentile rule the parser applies.
std::array<std::vector<double>, kNumAxes> normalized_truth_axes(const RawTrack& truth,
                                                                double percentile) {
  std::array<std::vector<double>, kNumAxes> axes;
  for (auto& a : axes) a.reserve(truth.frames.size());
  for (const auto& f : truth.frames) {
    const auto s = grid_to_sticks(f.grid);
    for (int a = 0; a < kNumAxes; ++a) axes[a].push_back(s[a]);
  }
  for (auto& a : axes) {
    std::vector<double> mags;
    mags.reserve(a.size());
    for (double v : a) mags.push_back(std::abs(v));
    double scale = nearest_rank_percentile(mags, percentile);
    if (scale < 1e-6) scale = 1.0;
    for (double& v : a) v = std::clamp(v / scale, -1.0, 1.0);
  }
  return axes;
}

struct VideoResult {
  bool found = false;
  double r2 = 0.0;
  double accuracy = 0.0;
  std::array<double, kNumButtons> per_button{};
  int undefined_axes = 0;
  std::vector<Segment> segments;
  std::exception_ptr error;
};

MetricGroup finish_group(std::string name, double r2_sum, double acc_sum, int n) {
  MetricGroup g;
  g.name = std::move(name);
  g.n_videos = n;
  if (n > 0) {
    g.r2 = r2_sum / n;
    g.button_accuracy = acc_sum / n;
  }
  return g;
}

Json group_json(const MetricGroup& g) {
  return Json{{"name", g.name},
              {"r2", g.r2},
              {"button_accuracy", g.button_accuracy},
              {"n_videos", g.n_videos}};
}

MetricGroup group_from_json(const Json& j) {
  MetricGroup g;
  g.name = j.at("name").get<std::string>();
  g.r2 = j.at("r2").get<double>();
  g.button_accuracy = j.at("button_accuracy").get<double>();
  g.n_videos = j.at("n_videos").get<int>();
  return g;
}

Json segment_json(const Segment& s) {
  return Json{{"video_id", s.video_id},
              {"start", s.start_frame},
              {"end", s.end_frame},
              {"density", s.density},
              {"kept", s.kept}};
}

}  // namespace

bool is_null_frame(const RawTrackFrame& frame) { return is_null_action(frame.buttons, frame.grid); }

bool is_null_frame(const ActionFrame& frame) {
  return is_null_action(frame.buttons, quantize_sticks(frame));
}

double action_density(const RawTrack& track, int start, int end) {
  check_slice(static_cast<int>(track.frames.size()), start, end);
  int non_null = 0;
  for (int i = start; i < end; ++i) non_null += is_null_frame(track.frames[i]) ? 0 : 1;
  return static_cast<double>(non_null) / (end - start);
}

double action_density(const NormalizedTrack& track, int start, int end) {
  check_slice(static_cast<int>(track.frames.size()), start, end);
  int non_null = 0;
  for (int i = start; i < end; ++i) non_null += is_null_frame(track.frames[i]) ? 0 : 1;
  return static_cast<double>(non_null) / (end - start);
}

std::vector<Segment> segment_track(const RawTrack& track, int segment_len) {
  return segment_impl(track, segment_len, [](const RawTrackFrame& f) { return is_null_frame(f); });
}

std::vector<Segment> segment_track(const NormalizedTrack& track, int segment_len) {
  return segment_impl(track, segment_len, [](const ActionFrame& f) { return is_null_frame(f); });
}

FilterResult filter_segments(const std::vector<Segment>& segments) {
  FilterResult out;
  long long kept_frames = 0, total_frames = 0;
  for (Segment s : segments) {
    const int len = s.end_frame - s.start_frame;
    total_frames += len;
    s.kept = s.density >= 0.5;
    if (s.kept) {
      kept_frames += len;
      out.kept.push_back(std::move(s));
    } else {
      out.discarded.push_back(std::move(s));
    }
  }
  out.kept_fraction =
      total_frames > 0 ? static_cast<double>(kept_frames) / static_cast<double>(total_frames) : 0.0;
  return out;
}

double r2_score(const std::vector<double>& predicted, const std::vector<double>& truth) {
  if (predicted.size() != truth.size())
    throw DimensionError("r2_score needs equal-length series, got " +
                         std::to_string(predicted.size()) + " and " +
                         std::to_string(truth.size()));
  if (truth.size() < 2) throw ValidationError("r2_score needs at least two samples");
  double mean = 0.0;
  for (double t : truth) mean += t;
  mean /= static_cast<double>(truth.size());
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    sse += (predicted[i] - truth[i]) * (predicted[i] - truth[i]);
    sst += (truth[i] - mean) * (truth[i] - mean);
  }
  if (sst == 0.0) return sse == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - sse / sst;
}

double button_frame_accuracy(const std::vector<std::array<bool, kNumButtons>>& predicted,
                             const std::vector<std::array<bool, kNumButtons>>& truth) {
  if (predicted.size() != truth.size())
    throw DimensionError("button accuracy needs equal-length tracks");
  if (truth.empty()) throw ValidationError("button accuracy needs at least one frame");
  int exact = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) exact += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(exact) / static_cast<double>(truth.size());
}

std::array<double, kNumButtons> per_button_accuracy(
    const std::vector<std::array<bool, kNumButtons>>& predicted,
    const std::vector<std::array<bool, kNumButtons>>& truth) {
  if (predicted.size() != truth.size())
    throw DimensionError("button accuracy needs equal-length tracks");
  if (truth.empty()) throw ValidationError("button accuracy needs at least one frame");
  std::array<double, kNumButtons> out{};
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (int b = 0; b < kNumButtons; ++b) out[b] += predicted[i][b] == truth[i][b] ? 1.0 : 0.0;
  for (double& v : out) v /= static_cast<double>(truth.size());
  return out;
}

std::vector<std::array<bool, kNumButtons>> buttons_of(const RawTrack& track) {
  std::vector<std::array<bool, kNumButtons>> out;
  out.reserve(track.frames.size());
  for (const auto& f : track.frames) out.push_back(f.buttons);
  return out;
}

std::vector<std::array<bool, kNumButtons>> buttons_of(const NormalizedTrack& track) {
  std::vector<std::array<bool, kNumButtons>> out;
  out.reserve(track.frames.size());
  for (const auto& f : track.frames) out.push_back(f.buttons);
  return out;
}

EvalOutcome evaluate_parser(const BenchmarkManifest& manifest, const std::string& root_dir,
                            const EvalConfig& cfg) {
  if (manifest.entries.empty()) throw ValidationError("benchmark manifest has no entries");
  cfg.parser.validate();
  if (cfg.segment_len < 1) throw ConfigError("segment_len must be >= 1");
  const std::filesystem::path root(root_dir);

  std::vector<ControllerTemplate> templates;
  templates.reserve(manifest.template_files.size());
  for (const auto& rel : manifest.template_files)
    templates.push_back(load_template((root / rel).string()));

  const std::size_t n = manifest.entries.size();
  std::vector<VideoResult> results(n);
  par::for_each_index(static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t idx) {
    VideoResult& r = results[idx];
    try {
      const BenchmarkEntry& entry = manifest.entries[idx];
      const std::string video_dir = (root / entry.video_dir).string();
      const FrameSource src = directory_frame_source(video_dir);
      const RawTrack truth = read_raw_track(video_dir + "/truth.track");
      if (static_cast<int>(truth.frames.size()) != src.count)
        throw DimensionError("truth track length does not match frame count in " + video_dir);

      const auto placement = locate_overlay(
          src, templates, derive_seed(entry.video_seed, hash_string("locate")), cfg.locate);
      if (!placement) return;  // zero-score, listed as not found
      r.found = true;

      const ControllerTemplate* tmpl = nullptr;
      for (const auto& t : templates)
        if (t.name == placement->template_name) tmpl = &t;
      if (tmpl == nullptr)
        throw ValidationError("located template is not in the manifest: " +
                              placement->template_name);

      ParseMeta meta;
      meta.video_id = entry.video_id;
      meta.fps = truth.fps;
      meta.controller_family = entry.family;
      const ParsedVideo parsed = parse_video(src, *placement, *tmpl, cfg.parser, meta);
      const CenterEstimate centers = estimate_centers(parsed, *tmpl);
      const NormalizedTrack norm = normalize_track(parsed, centers, cfg.parser);

      const auto truth_axes = normalized_truth_axes(truth, cfg.parser.percentile);
      double r2_sum = 0.0;
      int r2_n = 0;
      for (int a = 0; a < kNumAxes; ++a) {
        std::vector<double> pred;
        pred.reserve(norm.frames.size());
        for (const auto& f : norm.frames) pred.push_back(f.sticks[a]);
        const double r2 = r2_score(pred, truth_axes[a]);
        if (std::isinf(r2)) {
          ++r.undefined_axes;
        } else {
          r2_sum += r2;
          ++r2_n;
        }
      }
      r.r2 = r2_n > 0 ? r2_sum / r2_n : 0.0;

      const auto pred_buttons = buttons_of(parsed.raw);
      const auto truth_buttons = buttons_of(truth);
      r.accuracy = button_frame_accuracy(pred_buttons, truth_buttons);
      r.per_button = per_button_accuracy(pred_buttons, truth_buttons);

      r.segments = segment_track(norm, cfg.segment_len);
      const FilterResult filtered = filter_segments(r.segments);
      r.segments.clear();
      for (const auto& s : filtered.kept) r.segments.push_back(s);
      for (const auto& s : filtered.discarded) r.segments.push_back(s);
      std::sort(r.segments.begin(), r.segments.end(),
                [](const Segment& a, const Segment& b) { return a.start_frame < b.start_frame; });
    } catch (...) {
      r.error = std::current_exception();
    }
  });
  for (const auto& r : results)
    if (r.error) std::rethrow_exception(r.error);

  EvalOutcome out;
  out.report.master_seed = manifest.master_seed;
  out.report.n_videos = static_cast<int>(n);

  double r2_sum = 0.0, acc_sum = 0.0;
  std::array<double, kNumButtons> pb_sum{};
  for (std::size_t i = 0; i < n; ++i) {
    const VideoResult& r = results[i];
    r2_sum += r.r2;
    acc_sum += r.accuracy;
    for (int b = 0; b < kNumButtons; ++b) pb_sum[b] += r.per_button[b];
    out.report.r2_undefined_axes += r.undefined_axes;
    if (!r.found) out.report.not_found.push_back(manifest.entries[i].video_id);
    for (const auto& s : r.segments) out.segments.push_back(s);
  }
  out.report.overall = finish_group("overall", r2_sum, acc_sum, static_cast<int>(n));
  for (int b = 0; b < kNumButtons; ++b) out.report.per_button[b] = pb_sum[b] / static_cast<double>(n);

  for (const auto& family : manifest.config.families) {
    double rs = 0.0, as = 0.0;
    int cnt = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (manifest.entries[i].family == family) {
        rs += results[i].r2;
        as += results[i].accuracy;
        ++cnt;
      }
    out.report.per_family.push_back(finish_group(family, rs, as, cnt));
  }
  for (const auto& tier : manifest.config.tiers) {
    double rs = 0.0, as = 0.0;
    int cnt = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (manifest.entries[i].tier == tier.name) {
        rs += results[i].r2;
        as += results[i].accuracy;
        ++cnt;
      }
    out.report.per_tier.push_back(finish_group(tier.name, rs, as, cnt));
  }
  return out;
}

void save_eval_report(const std::string& path, const EvalReport& report) {
  Json j;
  j["format"] = "padtrack-eval-report-v1";
  j["master_seed"] = report.master_seed;
  j["n_videos"] = report.n_videos;
  j["overall"] = group_json(report.overall);
  j["per_family"] = Json::array();
  for (const auto& g : report.per_family) j["per_family"].push_back(group_json(g));
  j["per_tier"] = Json::array();
  for (const auto& g : report.per_tier) j["per_tier"].push_back(group_json(g));
  j["per_button"] = report.per_button;
  j["not_found"] = report.not_found;
  j["r2_undefined_axes"] = report.r2_undefined_axes;
  write_json(path, j);
}

EvalReport load_eval_report(const std::string& path) {
  const Json j = read_json(path);
  try {
    if (j.at("format").get<std::string>() != "padtrack-eval-report-v1")
      throw FormatError("unsupported eval report format in " + path);
    EvalReport r;
    r.master_seed = j.at("master_seed").get<std::uint64_t>();
    r.n_videos = j.at("n_videos").get<int>();
    r.overall = group_from_json(j.at("overall"));
    for (const auto& g : j.at("per_family")) r.per_family.push_back(group_from_json(g));
    for (const auto& g : j.at("per_tier")) r.per_tier.push_back(group_from_json(g));
    for (int b = 0; b < kNumButtons; ++b) r.per_button[b] = j.at("per_button").at(b).get<double>();
    for (const auto& v : j.at("not_found")) r.not_found.push_back(v.get<std::string>());
    r.r2_undefined_axes = j.at("r2_undefined_axes").get<int>();
    return r;
  } catch (const Json::exception& e) {
    throw FormatError("malformed eval report " + path + ": " + e.what());
  }
}

void write_segments_jsonl(const std::string& path, const std::vector<Segment>& segments) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& s : segments) out << segment_json(s).dump() << '\n';
  if (!out) throw IoError("failed writing " + path);
}

std::vector<Segment> read_segments_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<Segment> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      Segment s;
      s.video_id = j.at("video_id").get<std::string>();
      s.start_frame = j.at("start").get<int>();
      s.end_frame = j.at("end").get<int>();
      s.density = j.at("density").get<double>();
      s.kept = j.at("kept").get<bool>();
      out.push_back(std::move(s));
    } catch (const Json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace padtrack
