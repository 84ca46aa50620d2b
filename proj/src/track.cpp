#include "padtrack/track.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "padtrack/numio.hpp"

namespace padtrack {

namespace {

void check_token(const std::string& s, const char* what) {
  if (s.empty()) throw ValidationError(std::string(what) + " must be non-empty");
  for (char c : s)
    if (c == ' ' || c == '\n' || c == '\t')
      throw ValidationError(std::string(what) + " must not contain whitespace: '" + s + "'");
}

void append_buttons(std::string& line, const std::array<bool, kNumButtons>& buttons) {
  for (bool b : buttons) line += b ? '1' : '0';
}

std::array<bool, kNumButtons> parse_buttons(const std::string& tok, std::size_t line_no,
                                            const std::string& path) {
  if (tok.size() != kNumButtons)
    throw FormatError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(kNumButtons) + " button flags, got " +
                      std::to_string(tok.size()));
  std::array<bool, kNumButtons> out{};
  for (int i = 0; i < kNumButtons; ++i) {
    if (tok[i] != '0' && tok[i] != '1')
      throw FormatError(path + ":" + std::to_string(line_no) + ": button flags must be 0 or 1");
    out[i] = tok[i] == '1';
  }
  return out;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream iss(line);
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

struct Header {
  std::string video_id;
  double fps = 0.0;
  std::string family;
};

Header parse_header(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file, missing header");
  const auto toks = split_ws(line);
  if (toks.size() != 5 || toks[0] != "PADTRACK" || toks[1] != "v1")
    throw FormatError(path + ":1: missing or malformed PADTRACK v1 header");
  Header h;
  h.video_id = toks[2];
  h.fps = parse_double(toks[3]);
  h.family = toks[4];
  if (!(h.fps > 0.0)) throw FormatError(path + ":1: fps must be positive");
  return h;
}

}  // namespace

void RawTrack::validate() const {
  check_token(video_id, "video_id");
  check_token(controller_family, "controller_family");
  if (!(fps > 0.0) || !std::isfinite(fps)) throw ValidationError("fps must be positive");
  if (frames.empty()) throw ValidationError("track must have at least one frame");
  for (const auto& f : frames)
    if (!f.grid.valid()) throw ValidationError("grid cell out of range 0..10");
}

void NormalizedTrack::validate() const {
  check_token(video_id, "video_id");
  check_token(controller_family, "controller_family");
  if (!(fps > 0.0) || !std::isfinite(fps)) throw ValidationError("fps must be positive");
  if (frames.empty()) throw ValidationError("track must have at least one frame");
  for (const auto& f : frames)
    if (!f.valid()) throw ValidationError("action frame has stick value outside [-1, 1]");
  for (double s : scales)
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("scales must be positive");
}

void write_raw_track(const RawTrack& track, const std::string& path) {
  track.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "PADTRACK v1 " << track.video_id << ' ' << format_double(track.fps) << ' '
      << track.controller_family << '\n';
  out << "# kind raw\n";
  std::string line;
  for (const auto& f : track.frames) {
    line.clear();
    append_buttons(line, f.buttons);
    line += ' ' + std::to_string(f.grid.left_cx) + ' ' + std::to_string(f.grid.left_cy) + ' ' +
            std::to_string(f.grid.right_cx) + ' ' + std::to_string(f.grid.right_cy);
    out << line << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

RawTrack read_raw_track(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  const Header h = parse_header(in, path);
  RawTrack track;
  track.video_id = h.video_id;
  track.fps = h.fps;
  track.controller_family = h.family;

  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto toks = split_ws(line);
      if (toks.size() >= 3 && toks[1] == "kind" && toks[2] != "raw")
        throw FormatError(path + ":" + std::to_string(line_no) + ": track kind is '" + toks[2] +
                          "', expected raw");
      continue;
    }
    const auto toks = split_ws(line);
    if (toks.size() != 5)
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected 5 fields, got " +
                        std::to_string(toks.size()));
    RawTrackFrame f;
    f.buttons = parse_buttons(toks[0], line_no, path);
    const long cells[4] = {parse_long(toks[1]), parse_long(toks[2]), parse_long(toks[3]),
                           parse_long(toks[4])};
    for (long c : cells)
      if (c < 0 || c > kGridMax)
        throw FormatError(path + ":" + std::to_string(line_no) + ": grid cell out of range 0..10");
    f.grid = {static_cast<int>(cells[0]), static_cast<int>(cells[1]), static_cast<int>(cells[2]),
              static_cast<int>(cells[3])};
    track.frames.push_back(f);
  }
  track.validate();
  return track;
}

void write_normalized_track(const NormalizedTrack& track, const std::string& path) {
  track.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "PADTRACK v1 " << track.video_id << ' ' << format_double(track.fps) << ' '
      << track.controller_family << '\n';
  out << "# kind normalized centers";
  for (const auto& c : track.centers) out << ' ' << format_double(c.x) << ' ' << format_double(c.y);
  out << " scales";
  for (double s : track.scales) out << ' ' << format_double(s);
  out << '\n';
  std::string line;
  for (const auto& f : track.frames) {
    line.clear();
    append_buttons(line, f.buttons);
    for (double s : f.sticks) line += ' ' + format_double(s);
    out << line << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

NormalizedTrack read_normalized_track(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  const Header h = parse_header(in, path);
  NormalizedTrack track;
  track.video_id = h.video_id;
  track.fps = h.fps;
  track.controller_family = h.family;

  std::string line;
  std::size_t line_no = 1;
  bool saw_meta = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto toks = split_ws(line);
      if (toks.size() >= 3 && toks[1] == "kind") {
        if (toks[2] != "normalized")
          throw FormatError(path + ":" + std::to_string(line_no) + ": track kind is '" + toks[2] +
                            "', expected normalized");
        if (toks.size() != 13 || toks[3] != "centers" || toks[8] != "scales")
          throw FormatError(path + ":" + std::to_string(line_no) +
                            ": malformed normalized metadata line");
        track.centers[0] = {parse_double(toks[4]), parse_double(toks[5])};
        track.centers[1] = {parse_double(toks[6]), parse_double(toks[7])};
        for (int i = 0; i < 4; ++i) track.scales[i] = parse_double(toks[9 + i]);
        saw_meta = true;
      }
      continue;
    }
    const auto toks = split_ws(line);
    if (toks.size() != 5)
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected 5 fields, got " +
                        std::to_string(toks.size()));
    ActionFrame f;
    f.buttons = parse_buttons(toks[0], line_no, path);
    for (int i = 0; i < kNumAxes; ++i) f.sticks[i] = parse_double(toks[1 + i]);
    if (!f.valid())
      throw FormatError(path + ":" + std::to_string(line_no) + ": stick value outside [-1, 1]");
    track.frames.push_back(f);
  }
  if (!saw_meta) throw FormatError(path + ": missing normalized metadata line");
  track.validate();
  return track;
}

}  // namespace padtrack
