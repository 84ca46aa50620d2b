#include "padtrack/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>

#include "padtrack/imageio.hpp"
#include "padtrack/jsonio.hpp"
#include "padtrack/parallel.hpp"
#include "padtrack/track.hpp"

namespace padtrack {

namespace {

constexpr int kTemplateW = 256;
constexpr int kTemplateH = 128;

struct Color {
  std::uint8_t r = 0, g = 0, b = 0, a = 255;
};

void blend_pixel(ImageU8& img, int x, int y, const Color& c, double cov) {
  if (x < 0 || y < 0 || x >= img.width() || y >= img.height() || cov <= 0.0) return;
  const double w = cov * (c.a / 255.0);
  const std::uint8_t src[3] = {c.r, c.g, c.b};
  for (int ch = 0; ch < std::min(3, img.channels()); ++ch) {
    const double v = img.at(x, y, ch) + w * (src[ch] - img.at(x, y, ch));
    img.at(x, y, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
  if (img.channels() == 4) {
    const double av = img.at(x, y, 3) + w * (255.0 - img.at(x, y, 3));
    img.at(x, y, 3) = static_cast<std::uint8_t>(std::lround(std::clamp(av, 0.0, 255.0)));
  }
}

// Supersampled rasterization of an arbitrary inside test (4x4 subsamples).
// Template art is drawn once per run, so clarity beats speed here.
template <class Inside>
void draw(ImageU8& img, double bx0, double by0, double bx1, double by1, const Color& c,
          Inside inside) {
  const int x0 = std::max(0, static_cast<int>(std::floor(bx0)));
  const int y0 = std::max(0, static_cast<int>(std::floor(by0)));
  const int x1 = std::min(img.width(), static_cast<int>(std::ceil(bx1)));
  const int y1 = std::min(img.height(), static_cast<int>(std::ceil(by1)));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx)
          if (inside(x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0)) ++hits;
      if (hits > 0) blend_pixel(img, x, y, c, hits / 16.0);
    }
}

// Analytic antialiased disc; cheap enough for the per-frame indicator.
void draw_disc_fast(ImageU8& img, double cx, double cy, double r, const Color& c) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  const int x1 = std::min(img.width(), static_cast<int>(std::ceil(cx + r + 2)));
  const int y1 = std::min(img.height(), static_cast<int>(std::ceil(cy + r + 2)));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      const double cov = std::clamp(r - d + 0.5, 0.0, 1.0);
      if (cov > 0.0) blend_pixel(img, x, y, c, cov);
    }
}

auto disc_test(double cx, double cy, double r) {
  return [=](double x, double y) {
    const double dx = x - cx, dy = y - cy;
    return dx * dx + dy * dy <= r * r;
  };
}

auto rrect_test(double x0, double y0, double x1, double y1, double r) {
  return [=](double x, double y) {
    const double cx = std::clamp(x, x0 + r, x1 - r);
    const double cy = std::clamp(y, y0 + r, y1 - r);
    const double dx = x - cx, dy = y - cy;
    return dx * dx + dy * dy <= r * r;
  };
}

auto diamond_test(double cx, double cy, double r) {
  return [=](double x, double y) { return std::abs(x - cx) + std::abs(y - cy) <= r; };
}

struct Tri {
  double ax, ay, bx, by, cx, cy;
  bool operator()(double x, double y) const {
    auto side = [](double x0, double y0, double x1, double y1, double px, double py) {
      return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
    };
    const double d1 = side(ax, ay, bx, by, x, y);
    const double d2 = side(bx, by, cx, cy, x, y);
    const double d3 = side(cx, cy, ax, ay, x, y);
    const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
    const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
    return !(neg && pos);
  }
};

struct Style {
  Color plate, edge, decor_a, decor_b, glyph, accent, well, well_ring;
  std::array<std::uint8_t, 3> indicator{};
  int face_shape = 0;  // 0 disc, 1 diamond, 2 square
  int decor_kind = 0;  // 0 checker, 1 diagonal stripes, 2 dot lattice
};

std::uint8_t jitter_channel(std::uint8_t v, Rng& rng) {
  const int j = rng.uniform_int(-10, 10);
  return static_cast<std::uint8_t>(std::clamp(static_cast<int>(v) + j, 0, 255));
}

Color jitter_color(Color c, Rng& rng) {
  return {jitter_channel(c.r, rng), jitter_channel(c.g, rng), jitter_channel(c.b, rng), c.a};
}

Style make_style(int family_index, std::uint64_t seed) {
  Style st;
  switch (family_index) {
    case 0:  // xboxlike
      st.plate = {58, 66, 58};
      st.edge = {110, 125, 95};
      st.decor_a = {196, 210, 160};
      st.decor_b = {32, 38, 30};
      st.glyph = {230, 235, 220};
      st.accent = {120, 200, 90};
      st.well = {28, 32, 26};
      st.well_ring = {150, 160, 140};
      st.indicator = {250, 235, 96};
      st.face_shape = 0;
      st.decor_kind = 0;
      break;
    case 1:  // playstationlike
      st.plate = {40, 46, 72};
      st.edge = {95, 110, 165};
      st.decor_a = {165, 185, 235};
      st.decor_b = {22, 26, 44};
      st.glyph = {225, 230, 245};
      st.accent = {90, 140, 235};
      st.well = {22, 24, 40};
      st.well_ring = {130, 145, 190};
      st.indicator = {96, 230, 250};
      st.face_shape = 1;
      st.decor_kind = 1;
      break;
    default:  // generic
      st.plate = {64, 56, 70};
      st.edge = {130, 115, 140};
      st.decor_a = {210, 190, 220};
      st.decor_b = {36, 30, 40};
      st.glyph = {235, 225, 240};
      st.accent = {205, 125, 215};
      st.well = {30, 26, 34};
      st.well_ring = {155, 140, 165};
      st.indicator = {250, 120, 230};
      st.face_shape = 2;
      st.decor_kind = 2;
      break;
  }
  // The seed varies cosmetic colors only; parser-critical colors (glyph,
  // accent, well, indicator) stay fixed per family.
  Rng rng(derive_seed(seed, hash_string("style")));
  st.plate = jitter_color(st.plate, rng);
  st.edge = jitter_color(st.edge, rng);
  st.decor_a = jitter_color(st.decor_a, rng);
  st.decor_b = jitter_color(st.decor_b, rng);
  return st;
}

// Shared control geometry; families differ in glyph shapes, colors and decor.
struct Layout {
  std::array<Rect, kNumButtons> regions;
  std::array<Vec2, 2> stick_centers;
  double travel_radius = 18.0;
  double indicator_radius = 5.0;
};

Layout make_layout() {
  Layout la;
  la.regions[kDpadUp] = {92, 54, 108, 70};
  la.regions[kDpadDown] = {92, 86, 108, 102};
  la.regions[kDpadLeft] = {76, 70, 92, 86};
  la.regions[kDpadRight] = {108, 70, 124, 86};
  la.regions[kFaceA] = {148, 86, 164, 102};
  la.regions[kFaceB] = {166, 70, 182, 86};
  la.regions[kFaceX] = {130, 70, 146, 86};
  la.regions[kFaceY] = {148, 54, 164, 70};
  la.regions[kShoulderLB] = {20, 8, 52, 20};
  la.regions[kShoulderRB] = {204, 8, 236, 20};
  la.regions[kTriggerLT] = {60, 8, 76, 30};
  la.regions[kTriggerRT] = {180, 8, 196, 30};
  la.regions[kThumbL3] = {40, 34, 52, 46};
  la.regions[kThumbR3] = {204, 34, 216, 46};
  la.regions[kStart] = {136, 30, 150, 40};
  la.regions[kBack] = {106, 30, 120, 40};
  la.stick_centers = {Vec2{46, 78}, Vec2{210, 78}};
  return la;
}

const char* button_label(int i) {
  static const char* kLabels[kNumButtons] = {"dpad_up", "dpad_down", "dpad_left", "dpad_right",
                                             "face_a",  "face_b",    "face_x",    "face_y",
                                             "lb",      "rb",        "lt",        "rt",
                                             "l3",      "r3",        "start",     "back"};
  return kLabels[i];
}

// Irregular scatter of small shapes over a solid band. Periodic texture
// (checkers, uniform dot grids) makes every neighborhood look alike, which
// starves descriptor matching; the aperiodic mosaic mimics the uneven
// iconography of real overlay art. decor_kind biases the shape mix so
// families keep a distinct look.
void draw_mosaic(ImageU8& img, int x0, int y0, int x1, int y1, Rng& rng, const Style& st) {
  for (int y = std::max(0, y0); y < std::min(img.height(), y1); ++y)
    for (int x = std::max(0, x0); x < std::min(img.width(), x1); ++x)
      blend_pixel(img, x, y, st.decor_b, 1.0);

  const auto clip = [&](double v, double lo, double hi) { return std::clamp(v, lo, hi); };
  const double area = static_cast<double>(x1 - x0) * (y1 - y0);
  const int n = std::max(3, static_cast<int>(area / 16.0));
  for (int e = 0; e < n; ++e) {
    const double cx = rng.uniform(x0 + 1.0, x1 - 1.0);
    const double cy = rng.uniform(y0 + 1.0, y1 - 1.0);
    const double r = rng.uniform(1.2, 3.0);
    const double ang = rng.uniform(0.0, 3.14159265358979323846);
    const double mix = rng.uniform();
    const int kind_draw = static_cast<int>(rng.uniform_index(5));
    const int kind = kind_draw < 3 ? st.decor_kind : (st.decor_kind + kind_draw - 2) % 3;

    Color col = st.decor_a;
    if (mix < 0.33) {
      col.r = static_cast<std::uint8_t>(col.r * 0.62);
      col.g = static_cast<std::uint8_t>(col.g * 0.62);
      col.b = static_cast<std::uint8_t>(col.b * 0.62);
    } else if (mix > 0.66) {
      col.r = static_cast<std::uint8_t>(std::min(255.0, col.r * 1.0 + 70.0));
      col.g = static_cast<std::uint8_t>(std::min(255.0, col.g * 1.0 + 70.0));
      col.b = static_cast<std::uint8_t>(std::min(255.0, col.b * 1.0 + 70.0));
    }

    const auto in_band = [=](double x, double y) {
      return x >= x0 && x < x1 && y >= y0 && y < y1;
    };
    if (kind == 0) {
      const auto disc = disc_test(cx, cy, r);
      draw(img, clip(cx - r - 1, x0, x1), clip(cy - r - 1, y0, y1), clip(cx + r + 1, x0, x1),
           clip(cy + r + 1, y0, y1), col,
           [&](double x, double y) { return in_band(x, y) && disc(x, y); });
    } else {
      const double hu = kind == 1 ? r * 1.8 : r * 0.9;  // bar vs square
      const double hv = kind == 1 ? std::max(0.8, r * 0.45) : r * 0.9;
      const double ca = std::cos(ang), sa = std::sin(ang);
      const double reach = std::max(hu, hv) + 1.0;
      draw(img, clip(cx - reach, x0, x1), clip(cy - reach, y0, y1), clip(cx + reach, x0, x1),
           clip(cy + reach, y0, y1), col, [&](double x, double y) {
             if (!in_band(x, y)) return false;
             const double dx = x - cx, dy = y - cy;
             const double u = ca * dx + sa * dy;
             const double v = -sa * dx + ca * dy;
             return std::abs(u) <= hu && std::abs(v) <= hv;
           });
    }
  }
}

// D-pad arrow in a 16x16 region-local canvas. All directions reuse the
// up-space shape through a coordinate flip.
void draw_dpad_glyph(ImageU8& patch, int dir, const Style& st, bool pressed) {
  const double S = 16.0;
  auto to_up = [dir, S](double x, double y, double& u, double& v) {
    switch (dir) {
      case 0: u = x; v = y; break;          // up
      case 1: u = x; v = S - y; break;      // down
      case 2: u = y; v = x; break;          // left
      default: u = y; v = S - x; break;     // right
    }
  };
  const Tri tri{8, 3.5, 3.5, 10, 12.5, 10};
  auto arrow_up = [tri](double u, double v) {
    return tri(u, v) || (u >= 6.5 && u <= 9.5 && v >= 10 && v <= 12.8);
  };
  auto arrow = [&](double x, double y) {
    double u, v;
    to_up(x, y, u, v);
    return arrow_up(u, v);
  };
  auto arrow_small = [&](double x, double y) {
    double u, v;
    to_up(x, y, u, v);
    return arrow_up(8 + (u - 8) * 2.0, 8 + (v - 8) * 2.0);
  };
  if (pressed) {
    draw(patch, 0, 0, S, S, st.accent, arrow);
    draw(patch, 6, 6, 10, 10, st.plate, disc_test(8, 8, 1.6));
  } else {
    draw(patch, 0, 0, S, S, st.glyph,
         [&](double x, double y) { return arrow(x, y) && !arrow_small(x, y); });
  }
}

void draw_face_glyph(ImageU8& patch, int button, const Style& st, bool pressed) {
  auto outer = [&](double x, double y) {
    switch (st.face_shape) {
      case 0: return disc_test(8, 8, 6.8)(x, y);
      case 1: return diamond_test(8, 8, 7.0)(x, y);
      default: return rrect_test(2, 2, 14, 14, 2.5)(x, y);
    }
  };
  auto inner = [&](double x, double y) {
    switch (st.face_shape) {
      case 0: return disc_test(8, 8, 4.6)(x, y);
      case 1: return diamond_test(8, 8, 4.8)(x, y);
      default: return rrect_test(4.2, 4.2, 11.8, 11.8, 1.8)(x, y);
    }
  };
  if (!pressed) {
    draw(patch, 0, 0, 16, 16, st.glyph,
         [&](double x, double y) { return outer(x, y) && !inner(x, y); });
    return;
  }
  draw(patch, 0, 0, 16, 16, st.accent, outer);
  switch (button) {
    case kFaceA: draw(patch, 0, 0, 16, 16, st.plate, Tri{8, 4.6, 4.6, 10.6, 11.4, 10.6}); break;
    case kFaceB: draw(patch, 0, 0, 16, 16, st.plate, disc_test(8, 8, 2.6)); break;
    case kFaceX:
      draw(patch, 0, 0, 16, 16, st.plate,
           [](double x, double y) { return x >= 4.5 && x <= 11.5 && y >= 7 && y <= 9; });
      break;
    default:
      draw(patch, 0, 0, 16, 16, st.plate,
           [](double x, double y) { return x >= 7 && x <= 9 && y >= 4.5 && y <= 11.5; });
      break;
  }
}

void draw_bar_glyph(ImageU8& patch, const Style& st, bool pressed, double w, double h, double r) {
  auto outer = rrect_test(1.5, 1.5, w - 1.5, h - 1.5, r);
  auto inner = rrect_test(3.7, 3.7, w - 3.7, h - 3.7, std::max(0.5, r - 2.2));
  if (pressed) {
    draw(patch, 0, 0, w, h, st.accent, outer);
    draw(patch, 0, 0, w, h, st.plate, [&](double x, double y) {
      const double mx = w / 2;
      return ((x >= mx - 6 && x <= mx - 4) || (x >= mx + 4 && x <= mx + 6)) && y >= h / 2 - 2 &&
             y <= h / 2 + 2;
    });
  } else {
    draw(patch, 0, 0, w, h, st.glyph,
         [&](double x, double y) { return outer(x, y) && !inner(x, y); });
  }
}

void draw_trigger_glyph(ImageU8& patch, const Style& st, bool pressed) {
  auto outer = rrect_test(2, 1.5, 14, 20.5, 3.5);
  auto inner = rrect_test(4.2, 3.7, 11.8, 18.3, 1.8);
  auto tick = [](double x, double y) { return x >= 5 && x <= 11 && y >= 10 && y <= 12; };
  if (pressed) {
    draw(patch, 0, 0, 16, 22, st.accent, outer);
    draw(patch, 0, 0, 16, 22, st.plate, tick);
  } else {
    draw(patch, 0, 0, 16, 22, st.glyph,
         [&](double x, double y) { return outer(x, y) && !inner(x, y); });
    draw(patch, 0, 0, 16, 22, st.glyph, tick);
  }
}

void draw_thumb_glyph(ImageU8& patch, const Style& st, bool pressed) {
  if (pressed) {
    draw(patch, 0, 0, 12, 12, st.accent, disc_test(6, 6, 4.9));
    draw(patch, 0, 0, 12, 12, st.plate, disc_test(6, 6, 1.2));
  } else {
    draw(patch, 0, 0, 12, 12, st.glyph, [](double x, double y) {
      return disc_test(6, 6, 4.4)(x, y) && !disc_test(6, 6, 2.8)(x, y);
    });
  }
}

void draw_pill_glyph(ImageU8& patch, const Style& st, bool pressed) {
  auto outer = rrect_test(1, 1.5, 13, 8.5, 3.2);
  auto inner = rrect_test(2.8, 3.3, 11.2, 6.7, 1.6);
  if (pressed) {
    draw(patch, 0, 0, 14, 10, st.accent, outer);
  } else {
    draw(patch, 0, 0, 14, 10, st.glyph,
         [&](double x, double y) { return outer(x, y) && !inner(x, y); });
  }
}

void draw_button_glyph(ImageU8& patch, int button, const Style& st, bool pressed) {
  switch (button) {
    case kDpadUp:
    case kDpadDown:
    case kDpadLeft:
    case kDpadRight: draw_dpad_glyph(patch, button, st, pressed); break;
    case kFaceA:
    case kFaceB:
    case kFaceX:
    case kFaceY: draw_face_glyph(patch, button, st, pressed); break;
    case kShoulderLB:
    case kShoulderRB: draw_bar_glyph(patch, st, pressed, 32, 12, 4.0); break;
    case kTriggerLT:
    case kTriggerRT: draw_trigger_glyph(patch, st, pressed); break;
    case kThumbL3:
    case kThumbR3: draw_thumb_glyph(patch, st, pressed); break;
    default: draw_pill_glyph(patch, st, pressed); break;
  }
}

ImageU8 crop_region(const ImageU8& img, const Rect& r) {
  const int x0 = static_cast<int>(std::lround(r.x0)), y0 = static_cast<int>(std::lround(r.y0));
  const int w = static_cast<int>(std::lround(r.width())), h = static_cast<int>(std::lround(r.height()));
  ImageU8 out(w, h, img.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
  return out;
}

void blit_region(ImageU8& img, const Rect& r, const ImageU8& patch) {
  const int x0 = static_cast<int>(std::lround(r.x0)), y0 = static_cast<int>(std::lround(r.y0));
  for (int y = 0; y < patch.height(); ++y)
    for (int x = 0; x < patch.width(); ++x)
      for (int c = 0; c < img.channels(); ++c) img.at(x0 + x, y0 + y, c) = patch.at(x, y, c);
}

Rect stick_footprint(const StickControl& s) {
  const double r = s.travel_radius + s.indicator_radius + 2.0;
  return {s.center.x - r, s.center.y - r, s.center.x + r, s.center.y + r};
}

int family_index(const std::string& family) {
  const auto fams = template_families();
  for (std::size_t i = 0; i < fams.size(); ++i)
    if (fams[i] == family) return static_cast<int>(i);
  throw ConfigError("unknown controller family: " + family);
}

}  // namespace

std::vector<std::string> template_families() { return {"xboxlike", "playstationlike", "generic"}; }

void ControllerTemplate::validate() const {
  if (base_image.empty() || base_image.channels() != 4)
    throw ValidationError("template base image must be non-empty RGBA");
  const double w = base_image.width(), h = base_image.height();
  std::vector<Rect> zones;
  for (int i = 0; i < kNumButtons; ++i) {
    const auto& b = buttons[i];
    const Rect& r = b.region;
    if (r.empty() || r.x0 < 0 || r.y0 < 0 || r.x1 > w || r.y1 > h)
      throw ValidationError("button region out of bounds: " + b.label);
    const int rw = static_cast<int>(std::lround(r.width()));
    const int rh = static_cast<int>(std::lround(r.height()));
    for (const ImageU8* p : {&b.released, &b.pressed})
      if (p->width() != rw || p->height() != rh || p->channels() != 4)
        throw ValidationError("patch dimensions do not match region: " + b.label);
    zones.push_back(r);
  }
  for (const auto& s : sticks) {
    if (s.travel_radius <= 0 || s.indicator_radius <= 0)
      throw ValidationError("stick radii must be positive");
    const Rect f = stick_footprint(s);
    if (f.x0 < 0 || f.y0 < 0 || f.x1 > w || f.y1 > h)
      throw ValidationError("stick travel disc out of bounds");
    zones.push_back(f);
  }
  for (std::size_t i = 0; i < zones.size(); ++i)
    for (std::size_t j = i + 1; j < zones.size(); ++j)
      if (!intersect(zones[i], zones[j]).empty())
        throw ValidationError("control regions overlap (zones " + std::to_string(i) + ", " +
                              std::to_string(j) + ")");
}

ControllerTemplate make_template(const std::string& family, std::uint64_t seed) {
  const int fi = family_index(family);
  const Style st = make_style(fi, seed);
  const Layout la = make_layout();

  ControllerTemplate t;
  char namebuf[64];
  std::snprintf(namebuf, sizeof(namebuf), "%s-%04x", family.c_str(),
                static_cast<unsigned>(seed & 0xffff));
  t.name = namebuf;
  t.family = family;
  t.base_image = ImageU8(kTemplateW, kTemplateH, 4);  // zero-filled: transparent

  ImageU8& base = t.base_image;
  // Plate with rounded corners; everything else sits on it.
  draw(base, 2, 2, 254, 126, st.plate, rrect_test(2, 2, 254, 126, 10));
  draw(base, 2, 2, 254, 126, st.edge, [&](double x, double y) {
    return rrect_test(2, 2, 254, 126, 10)(x, y) && !rrect_test(4, 4, 252, 124, 8.5)(x, y);
  });

  // Decorative bands: aperiodic texture for the keypoint detector. The layout
  // stream is keyed by family alone so a family's geometry never varies; the
  // template seed only jitters colors (via Style).
  Rng decor_rng(derive_seed(hash_string(family), hash_string("decor")));
  draw_mosaic(base, 16, 4, 240, 8, decor_rng, st);
  draw_mosaic(base, 84, 12, 172, 26, decor_rng, st);
  draw_mosaic(base, 16, 106, 240, 120, decor_rng, st);
  draw_mosaic(base, 4, 16, 8, 112, decor_rng, st);
  draw_mosaic(base, 248, 16, 252, 112, decor_rng, st);

  // Stick wells (flat interiors so the indicator segments cleanly).
  for (int s = 0; s < 2; ++s) {
    const Vec2 c = la.stick_centers[s];
    const double fr = la.travel_radius + la.indicator_radius + 2.0;
    draw(base, c.x - fr, c.y - fr, c.x + fr, c.y + fr, st.well, disc_test(c.x, c.y, fr));
    draw(base, c.x - fr, c.y - fr, c.x + fr, c.y + fr, st.well_ring, [&](double x, double y) {
      return disc_test(c.x, c.y, fr)(x, y) && !disc_test(c.x, c.y, fr - 1.6)(x, y);
    });
    t.sticks[s] = {c, la.travel_radius, la.indicator_radius, st.indicator};
  }

  for (int i = 0; i < kNumButtons; ++i) {
    ButtonControl& b = t.buttons[i];
    b.label = button_label(i);
    b.region = la.regions[i];
    ImageU8 released = crop_region(base, b.region);
    ImageU8 pressed = released;
    draw_button_glyph(released, i, st, false);
    draw_button_glyph(pressed, i, st, true);
    b.released = std::move(released);
    b.pressed = std::move(pressed);
    blit_region(base, b.region, b.released);
  }

  t.validate();
  return t;
}

void save_template(const std::string& path, const ControllerTemplate& tmpl) {
  tmpl.validate();
  Json j;
  j["format"] = "padtrack-template-v1";
  j["name"] = tmpl.name;
  j["family"] = tmpl.family;
  j["base_png"] = image_to_base64_png(tmpl.base_image);
  Json buttons = Json::array();
  for (const auto& b : tmpl.buttons) {
    buttons.push_back({{"label", b.label},
                       {"region", {b.region.x0, b.region.y0, b.region.x1, b.region.y1}},
                       {"released_png", image_to_base64_png(b.released)},
                       {"pressed_png", image_to_base64_png(b.pressed)}});
  }
  j["buttons"] = buttons;
  Json sticks = Json::array();
  for (const auto& s : tmpl.sticks) {
    sticks.push_back({{"center", {s.center.x, s.center.y}},
                      {"travel_radius", s.travel_radius},
                      {"indicator_radius", s.indicator_radius},
                      {"indicator_color", {s.indicator_color[0], s.indicator_color[1],
                                           s.indicator_color[2]}}});
  }
  j["sticks"] = sticks;
  write_json(path, j);
}

ControllerTemplate load_template(const std::string& path) {
  const Json j = read_json(path);
  try {
    if (j.at("format").get<std::string>() != "padtrack-template-v1")
      throw FormatError("unsupported template format in " + path);
    ControllerTemplate t;
    t.name = j.at("name").get<std::string>();
    t.family = j.at("family").get<std::string>();
    t.base_image = image_from_base64_png(j.at("base_png").get<std::string>());
    const Json& buttons = j.at("buttons");
    if (buttons.size() != static_cast<std::size_t>(kNumButtons))
      throw FormatError("template must define exactly 16 buttons: " + path);
    for (int i = 0; i < kNumButtons; ++i) {
      const Json& bj = buttons.at(i);
      ButtonControl& b = t.buttons[i];
      b.label = bj.at("label").get<std::string>();
      const Json& r = bj.at("region");
      b.region = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>(),
                  r.at(3).get<double>()};
      b.released = image_from_base64_png(bj.at("released_png").get<std::string>());
      b.pressed = image_from_base64_png(bj.at("pressed_png").get<std::string>());
    }
    const Json& sticks = j.at("sticks");
    if (sticks.size() != 2) throw FormatError("template must define exactly 2 sticks: " + path);
    for (int s = 0; s < 2; ++s) {
      const Json& sj = sticks.at(s);
      StickControl& sc = t.sticks[s];
      sc.center = {sj.at("center").at(0).get<double>(), sj.at("center").at(1).get<double>()};
      sc.travel_radius = sj.at("travel_radius").get<double>();
      sc.indicator_radius = sj.at("indicator_radius").get<double>();
      for (int c = 0; c < 3; ++c)
        sc.indicator_color[c] = sj.at("indicator_color").at(c).get<std::uint8_t>();
    }
    t.validate();
    return t;
  } catch (const Json::exception& e) {
    throw FormatError("malformed template JSON " + path + ": " + e.what());
  }
}

void RenderSpec::validate() const {
  if (frame_width < 1 || frame_height < 1) throw ValidationError("frame size must be positive");
  if (!(opacity > 0.0) || opacity > 1.0) throw ValidationError("opacity must be in (0, 1]");
  if (jpeg_quality != 0 && (jpeg_quality < 10 || jpeg_quality > 100))
    throw ValidationError("jpeg quality must be 0 (off) or in [10, 100]");
  if (std::abs(placement.det()) < 1e-9) throw ValidationError("placement affine is degenerate");
  const double s = placement.scale_magnitude();
  if (s < 0.1 || s > 2.0)
    throw ValidationError("placement |scale| must lie in [0.1, 2.0], got " + std::to_string(s));
}

std::pair<ImageU8, Rect> render_overlay(const ImageU8& background, const ControllerTemplate& tmpl,
                                        const ActionFrame& action, const RenderSpec& spec) {
  spec.validate();
  if (!action.valid()) throw ValidationError("action has stick values outside [-1, 1]");
  if (background.channels() != 3 || background.width() != spec.frame_width ||
      background.height() != spec.frame_height)
    throw DimensionError("background must be RGB at the spec frame size");

  // Compose the overlay state at template resolution.
  ImageU8 ov = tmpl.base_image;
  for (int i = 0; i < kNumButtons; ++i)
    if (action.buttons[i]) blit_region(ov, tmpl.buttons[i].region, tmpl.buttons[i].pressed);
  for (int s = 0; s < 2; ++s) {
    const StickControl& sc = tmpl.sticks[s];
    const double sx = action.sticks[s * 2], sy = action.sticks[s * 2 + 1];
    const double ix = sc.center.x + sx * sc.travel_radius;
    const double iy = sc.center.y - sy * sc.travel_radius;  // stick up = image up
    draw_disc_fast(ov, ix, iy, sc.indicator_radius,
                   {sc.indicator_color[0], sc.indicator_color[1], sc.indicator_color[2], 255});
  }

  ImageU8 out = background;
  const Affine2 inv = spec.placement.inverse();
  const double tw = ov.width(), th = ov.height();
  const Rect raw_bounds = transformed_bounds(spec.placement, tw, th);
  const Rect bbox = raw_bounds.clamped(spec.frame_width, spec.frame_height);

  const int y0 = std::max(0, static_cast<int>(std::floor(raw_bounds.y0)));
  const int y1 = std::min(spec.frame_height, static_cast<int>(std::ceil(raw_bounds.y1)) + 1);
  const int x0 = std::max(0, static_cast<int>(std::floor(raw_bounds.x0)));
  const int x1 = std::min(spec.frame_width, static_cast<int>(std::ceil(raw_bounds.x1)) + 1);
  const double opacity = spec.opacity;

  par::for_each_index(static_cast<std::ptrdiff_t>(std::max(0, y1 - y0)), [&](std::ptrdiff_t row) {
    const int y = y0 + static_cast<int>(row);
    for (int x = x0; x < x1; ++x) {
      const Vec2 q = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      if (q.x < -1 || q.x > tw || q.y < -1 || q.y > th) continue;
      // Premultiplied bilinear fetch; out-of-bounds taps contribute nothing.
      const double fx = std::floor(q.x), fy = std::floor(q.y);
      const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
      const double ax = q.x - fx, ay = q.y - fy;
      double pm[3] = {0, 0, 0};
      double pa = 0;
      const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
      const int xs[4] = {ix, ix + 1, ix, ix + 1};
      const int ys[4] = {iy, iy, iy + 1, iy + 1};
      for (int k = 0; k < 4; ++k) {
        if (wts[k] == 0.0 || xs[k] < 0 || ys[k] < 0 || xs[k] >= ov.width() ||
            ys[k] >= ov.height())
          continue;
        const double a = ov.at(xs[k], ys[k], 3) / 255.0;
        if (a == 0.0) continue;
        pa += wts[k] * a;
        for (int c = 0; c < 3; ++c) pm[c] += wts[k] * a * ov.at(xs[k], ys[k], c);
      }
      if (pa == 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - opacity * pa) * out.at(x, y, c) + opacity * pm[c];
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  });

  if (spec.jpeg_quality != 0) out = jpeg_roundtrip(out, spec.jpeg_quality);
  return {std::move(out), bbox};
}

namespace {

std::uint64_t pixel_hash(std::uint64_t seed, std::uint64_t frame, std::uint64_t x,
                         std::uint64_t y) {
  std::uint64_t s = seed ^ (frame * 0x9e3779b97f4a7c15ULL) ^ (x * 0xc2b2ae3d27d4eb4fULL) ^
                    (y * 0x165667b19e3779f9ULL);
  return splitmix64(s);
}

struct BgShape {
  bool is_disc = false;
  double x0 = 0, y0 = 0, vx = 0, vy = 0, size = 0;
  double color[3] = {0, 0, 0};
};

}  // namespace

ImageU8 make_background(int width, int height, std::uint64_t seed, int frame_index) {
  Rng rng(derive_seed(seed, hash_string("bg-params")));
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) c0[c] = rng.uniform(30, 200);
  for (int c = 0; c < 3; ++c) c1[c] = rng.uniform(30, 200);
  std::array<BgShape, 4> shapes;
  for (auto& s : shapes) {
    s.is_disc = rng.bernoulli(0.5);
    s.size = rng.uniform(height / 8.0, height / 3.0);
    s.x0 = rng.uniform(0, width);
    s.y0 = rng.uniform(0, height);
    s.vx = rng.uniform(-3, 3);
    s.vy = rng.uniform(-2, 2);
    for (int c = 0; c < 3; ++c) s.color[c] = rng.uniform(20, 235);
  }

  ImageU8 img(width, height, 3);
  const double spanx = width + 4.0 * shapes[0].size, spany = height + 4.0 * shapes[0].size;
  par::for_each_index(height, [&](std::ptrdiff_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < width; ++x) {
      const double t = (static_cast<double>(x) / width + static_cast<double>(y) / height) / 2.0;
      double px[3];
      for (int c = 0; c < 3; ++c) px[c] = c0[c] + t * (c1[c] - c0[c]);
      for (const auto& s : shapes) {
        double sx = std::fmod(s.x0 + s.vx * frame_index + 2.0 * s.size, spanx);
        double sy = std::fmod(s.y0 + s.vy * frame_index + 2.0 * s.size, spany);
        if (sx < 0) sx += spanx;
        if (sy < 0) sy += spany;
        sx -= 2.0 * s.size;
        sy -= 2.0 * s.size;
        const double dx = x - sx, dy = y - sy;
        const bool inside = s.is_disc ? (dx * dx + dy * dy <= s.size * s.size)
                                      : (std::abs(dx) <= s.size && std::abs(dy) <= s.size * 0.6);
        if (inside)
          for (int c = 0; c < 3; ++c) px[c] += 0.65 * (s.color[c] - px[c]);
      }
      const std::uint64_t h = pixel_hash(seed, static_cast<std::uint64_t>(frame_index),
                                         static_cast<std::uint64_t>(x),
                                         static_cast<std::uint64_t>(y));
      for (int c = 0; c < 3; ++c) {
        const double noise = static_cast<double>((h >> (5 * c)) & 15) - 7.5;
        px[c] += noise;
        img.at(x, y, c) =
            static_cast<std::uint8_t>(std::lround(std::clamp(px[c], 0.0, 255.0)));
      }
    }
  });
  return img;
}

std::vector<ActionFrame> ActionScript::generate(int n_frames, Rng& rng) const {
  if (n_frames < 1) throw ValidationError("action script needs n_frames >= 1");
  std::vector<ActionFrame> out(n_frames);
  if (mode == Mode::kScripted) {
    if (script.empty()) throw ConfigError("scripted action mode requires a non-empty script");
    for (const auto& f : script)
      if (!f.valid()) throw ValidationError("scripted action has sticks outside [-1, 1]");
    for (int i = 0; i < n_frames; ++i) out[i] = script[i % script.size()];
    return out;
  }
  if (button_prob < 0 || button_prob > 1 || stick_center_prob < 0 || stick_center_prob > 1)
    throw ConfigError("action script probabilities must lie in [0, 1]");
  for (int i = 0; i < n_frames; ++i) {
    for (int b = 0; b < kNumButtons; ++b) out[i].buttons[b] = rng.bernoulli(button_prob);
    for (int s = 0; s < 2; ++s) {
      if (rng.bernoulli(stick_center_prob)) {
        out[i].sticks[s * 2] = 0.0;
        out[i].sticks[s * 2 + 1] = 0.0;
      } else {
        // Axes live on the 11-point lattice so grid quantization is lossless.
        out[i].sticks[s * 2] = (rng.uniform_int(0, 10) - 5) / 5.0;
        out[i].sticks[s * 2 + 1] = (rng.uniform_int(0, 10) - 5) / 5.0;
      }
    }
  }
  return out;
}

void SpecRange::validate() const {
  if (!(opacity_lo > 0.0) || opacity_hi > 1.0 || opacity_lo > opacity_hi)
    throw ConfigError("opacity range must satisfy 0 < lo <= hi <= 1");
  if (scale_lo < 0.1 || scale_hi > 2.0 || scale_lo > scale_hi)
    throw ConfigError("scale range must lie within [0.1, 2.0]");
  const bool no_jpeg = quality_lo == 0 && quality_hi == 0;
  if (!no_jpeg && (quality_lo < 10 || quality_hi > 100 || quality_lo > quality_hi))
    throw ConfigError("quality range must be (0,0) or within [10, 100]");
  if (rotation_deg < 0) throw ConfigError("rotation range must be non-negative");
  if (frame_width < 64 || frame_height < 64) throw ConfigError("frame size too small");
}

SynthVideo synth_video(const ControllerTemplate& tmpl, int n_frames, const ActionScript& script,
                       const SpecRange& range, std::uint64_t seed) {
  range.validate();
  tmpl.validate();
  if (n_frames < 1) throw ValidationError("synth_video needs n_frames >= 1");

  Rng rng(derive_seed(seed, hash_string("spec")));
  RenderSpec spec;
  spec.frame_width = range.frame_width;
  spec.frame_height = range.frame_height;
  spec.opacity = range.opacity_lo == range.opacity_hi
                     ? range.opacity_lo
                     : rng.uniform(range.opacity_lo, range.opacity_hi);
  const double scale = range.scale_lo == range.scale_hi
                           ? range.scale_lo
                           : rng.uniform(range.scale_lo, range.scale_hi);
  constexpr double kPi = 3.14159265358979323846;
  const double rot = range.rotation_deg > 0
                         ? rng.uniform(-range.rotation_deg, range.rotation_deg) * kPi / 180.0
                         : 0.0;
  spec.jpeg_quality = (range.quality_lo == 0)
                          ? 0
                          : (range.quality_lo == range.quality_hi
                                 ? range.quality_lo
                                 : rng.uniform_int(range.quality_lo, range.quality_hi));

  const Affine2 lin = Affine2::similarity(scale, rot, 0, 0);
  const Rect b = transformed_bounds(lin, tmpl.base_image.width(), tmpl.base_image.height());
  const double margin = 2.0;
  const double tx_lo = margin - b.x0, tx_hi = range.frame_width - margin - b.x1;
  const double ty_lo = margin - b.y0, ty_hi = range.frame_height - margin - b.y1;
  if (tx_lo > tx_hi || ty_lo > ty_hi)
    throw ConfigError("scaled template does not fit inside the frame");
  double tx, ty;
  if (range.integer_translation) {
    tx = rng.uniform_int(static_cast<int>(std::ceil(tx_lo)), static_cast<int>(std::floor(tx_hi)));
    ty = rng.uniform_int(static_cast<int>(std::ceil(ty_lo)), static_cast<int>(std::floor(ty_hi)));
  } else {
    tx = rng.uniform(tx_lo, tx_hi);
    ty = rng.uniform(ty_lo, ty_hi);
  }
  spec.placement = {lin.a, lin.b, tx, lin.c, lin.d, ty};
  spec.validate();

  SynthVideo video;
  video.video_id = "video-" + std::to_string(seed);
  video.template_name = tmpl.name;
  video.family = tmpl.family;
  video.seed = seed;
  video.truth_placement = spec;
  video.overlay_bbox =
      transformed_bounds(spec.placement, tmpl.base_image.width(), tmpl.base_image.height())
          .clamped(spec.frame_width, spec.frame_height);

  Rng action_rng(derive_seed(seed, hash_string("actions")));
  video.truth = script.generate(n_frames, action_rng);

  const std::uint64_t bg_seed = derive_seed(seed, hash_string("bg"));
  video.frames.resize(n_frames);
  par::for_each_index(n_frames, [&](std::ptrdiff_t i) {
    const ImageU8 bg =
        make_background(spec.frame_width, spec.frame_height, bg_seed, static_cast<int>(i));
    video.frames[i] = render_overlay(bg, tmpl, video.truth[i], spec).first;
  });
  return video;
}

void write_video(const std::string& dir, const SynthVideo& video) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  par::for_each_index(static_cast<std::ptrdiff_t>(video.frames.size()), [&](std::ptrdiff_t i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%06d.png", static_cast<int>(i));
    write_png(dir + "/" + name, video.frames[i]);
  });

  RawTrack track;
  track.video_id = video.video_id;
  track.fps = video.fps;
  track.controller_family = video.family;
  track.frames.reserve(video.truth.size());
  for (const auto& a : video.truth) track.frames.push_back({a.buttons, quantize_sticks(a)});
  write_raw_track(track, dir + "/truth.track");

  const auto& p = video.truth_placement;
  Json j;
  j["video_id"] = video.video_id;
  j["template"] = video.template_name;
  j["family"] = video.family;
  j["seed"] = video.seed;
  j["fps"] = video.fps;
  j["n_frames"] = video.frames.size();
  j["placement"] = p.placement.coeffs();
  j["opacity"] = p.opacity;
  j["jpeg_quality"] = p.jpeg_quality;
  j["frame_size"] = {p.frame_width, p.frame_height};
  j["bbox"] = {video.overlay_bbox.x0, video.overlay_bbox.y0, video.overlay_bbox.x1,
               video.overlay_bbox.y1};
  write_json(dir + "/truth.json", j);
}

std::vector<TierConfig> default_tiers() {
  TierConfig mild{"mild", {}};
  mild.range.opacity_lo = 0.8;
  mild.range.opacity_hi = 1.0;
  mild.range.scale_lo = 0.8;
  mild.range.scale_hi = 1.2;
  mild.range.quality_lo = 90;
  mild.range.quality_hi = 100;

  TierConfig medium{"medium", {}};
  medium.range.opacity_lo = 0.5;
  medium.range.opacity_hi = 0.8;
  medium.range.scale_lo = 0.5;
  medium.range.scale_hi = 1.5;
  medium.range.quality_lo = 50;
  medium.range.quality_hi = 90;

  TierConfig harsh{"harsh", {}};
  harsh.range.opacity_lo = 0.3;
  harsh.range.opacity_hi = 0.5;
  harsh.range.scale_lo = 0.3;
  harsh.range.scale_hi = 0.6;
  harsh.range.quality_lo = 10;
  harsh.range.quality_hi = 50;

  return {mild, medium, harsh};
}

TierConfig exact_tier() {
  TierConfig t{"exact", {}};
  t.range.opacity_lo = 1.0;
  t.range.opacity_hi = 1.0;
  t.range.scale_lo = 1.0;
  t.range.scale_hi = 1.0;
  t.range.quality_lo = 0;
  t.range.quality_hi = 0;
  t.range.rotation_deg = 0.0;
  t.range.integer_translation = true;
  return t;
}

namespace {

struct Interval {
  double lo, hi;
};

// Interiors intersect; closed endpoints touching does not count as overlap.
bool interiors_overlap(Interval a, Interval b) { return a.lo < b.hi && b.lo < a.hi; }

}  // namespace

void BenchmarkConfig::validate() const {
  if (families.empty()) throw ConfigError("benchmark needs at least one controller family");
  const auto known = template_families();
  for (const auto& f : families)
    if (std::find(known.begin(), known.end(), f) == known.end())
      throw ConfigError("unknown controller family: " + f);
  if (tiers.empty()) throw ConfigError("benchmark needs at least one tier");
  if (videos_per_cell < 1 || frames_per_video < 1)
    throw ConfigError("benchmark counts must be positive");
  if (fps <= 0) throw ConfigError("fps must be positive");
  for (const auto& t : tiers) {
    if (t.name.empty()) throw ConfigError("tier name must be non-empty");
    t.range.validate();
  }
  for (std::size_t i = 0; i < tiers.size(); ++i)
    for (std::size_t j = i + 1; j < tiers.size(); ++j) {
      const auto& a = tiers[i].range;
      const auto& b = tiers[j].range;
      if (tiers[i].name == tiers[j].name)
        throw ConfigError("duplicate tier name: " + tiers[i].name);
      // Two tiers overlap when a single video could have been drawn from
      // either: all three sampled parameter ranges share interior points.
      const bool overlap =
          interiors_overlap({a.opacity_lo, a.opacity_hi}, {b.opacity_lo, b.opacity_hi}) &&
          interiors_overlap({a.scale_lo, a.scale_hi}, {b.scale_lo, b.scale_hi}) &&
          interiors_overlap({static_cast<double>(a.quality_lo), static_cast<double>(a.quality_hi)},
                            {static_cast<double>(b.quality_lo), static_cast<double>(b.quality_hi)});
      if (overlap)
        throw ConfigError("tiers '" + tiers[i].name + "' and '" + tiers[j].name +
                          "' have overlapping parameter ranges");
    }
}

namespace {

std::uint64_t template_seed(std::uint64_t master, const std::string& family) {
  return derive_seed(master, hash_string("template:" + family));
}

Json range_to_json(const SpecRange& r) {
  return {{"opacity", {r.opacity_lo, r.opacity_hi}},
          {"scale", {r.scale_lo, r.scale_hi}},
          {"quality", {r.quality_lo, r.quality_hi}},
          {"rotation_deg", r.rotation_deg},
          {"integer_translation", r.integer_translation},
          {"frame_size", {r.frame_width, r.frame_height}}};
}

SpecRange range_from_json(const Json& j) {
  SpecRange r;
  r.opacity_lo = j.at("opacity").at(0).get<double>();
  r.opacity_hi = j.at("opacity").at(1).get<double>();
  r.scale_lo = j.at("scale").at(0).get<double>();
  r.scale_hi = j.at("scale").at(1).get<double>();
  r.quality_lo = j.at("quality").at(0).get<int>();
  r.quality_hi = j.at("quality").at(1).get<int>();
  r.rotation_deg = j.at("rotation_deg").get<double>();
  r.integer_translation = j.at("integer_translation").get<bool>();
  r.frame_width = j.at("frame_size").at(0).get<int>();
  r.frame_height = j.at("frame_size").at(1).get<int>();
  return r;
}

Json script_to_json(const ActionScript& s) {
  Json j;
  j["mode"] = s.mode == ActionScript::Mode::kIid ? "iid" : "scripted";
  j["button_prob"] = s.button_prob;
  j["stick_center_prob"] = s.stick_center_prob;
  Json frames = Json::array();
  for (const auto& f : s.script) {
    std::string bits(kNumButtons, '0');
    for (int i = 0; i < kNumButtons; ++i)
      if (f.buttons[i]) bits[i] = '1';
    frames.push_back({bits, f.sticks[0], f.sticks[1], f.sticks[2], f.sticks[3]});
  }
  j["script"] = frames;
  return j;
}

ActionScript script_from_json(const Json& j) {
  ActionScript s;
  const std::string mode = j.at("mode").get<std::string>();
  if (mode == "iid")
    s.mode = ActionScript::Mode::kIid;
  else if (mode == "scripted")
    s.mode = ActionScript::Mode::kScripted;
  else
    throw FormatError("unknown action script mode: " + mode);
  s.button_prob = j.at("button_prob").get<double>();
  s.stick_center_prob = j.at("stick_center_prob").get<double>();
  for (const Json& fj : j.at("script")) {
    ActionFrame f;
    const std::string bits = fj.at(0).get<std::string>();
    if (bits.size() != static_cast<std::size_t>(kNumButtons))
      throw FormatError("scripted frame must have 16 button bits");
    for (int i = 0; i < kNumButtons; ++i) f.buttons[i] = bits[i] == '1';
    for (int i = 0; i < kNumAxes; ++i) f.sticks[i] = fj.at(1 + i).get<double>();
    s.script.push_back(f);
  }
  return s;
}

}  // namespace

BenchmarkManifest make_benchmark(const BenchmarkConfig& user_config, std::uint64_t seed,
                                 const std::string& out_dir) {
  namespace fs = std::filesystem;
  BenchmarkConfig config = user_config;
  if (config.families.empty()) config.families = template_families();
  if (config.tiers.empty()) config.tiers = default_tiers();
  config.validate();
  fs::create_directories(out_dir + "/templates");

  BenchmarkManifest m;
  m.master_seed = seed;
  m.config = config;

  std::map<std::string, ControllerTemplate> templates;
  for (const auto& family : config.families) {
    ControllerTemplate t = make_template(family, template_seed(seed, family));
    save_template(out_dir + "/templates/" + family + ".json", t);
    m.template_files.push_back("templates/" + family + ".json");
    templates.emplace(family, std::move(t));
  }

  for (const auto& family : config.families)
    for (const auto& tier : config.tiers)
      for (int v = 0; v < config.videos_per_cell; ++v) {
        BenchmarkEntry e;
        e.family = family;
        e.tier = tier.name;
        e.template_name = templates.at(family).name;
        e.video_seed = derive_seed(seed, hash_string(family + "/" + tier.name),
                                   static_cast<std::uint64_t>(v));
        char id[128];
        std::snprintf(id, sizeof(id), "%s-%s-%03d", family.c_str(), tier.name.c_str(), v);
        e.video_id = id;
        e.video_dir = family + "/" + tier.name + "/" + e.video_id;
        e.n_frames = config.frames_per_video;
        m.entries.push_back(std::move(e));
      }

  // Videos are independent; frame rendering inside each stays serial when the
  // entry loop already occupies the worker pool.
  par::for_each_index(static_cast<std::ptrdiff_t>(m.entries.size()), [&](std::ptrdiff_t i) {
    const BenchmarkEntry& e = m.entries[i];
    const TierConfig* tier = nullptr;
    for (const auto& t : config.tiers)
      if (t.name == e.tier) tier = &t;
    SynthVideo video = synth_video(templates.at(e.family), config.frames_per_video, config.script,
                                   tier->range, e.video_seed);
    video.video_id = e.video_id;
    video.fps = config.fps;
    write_video(out_dir + "/" + e.video_dir, video);
  });

  save_manifest(out_dir + "/manifest.json", m);
  return m;
}

void save_manifest(const std::string& path, const BenchmarkManifest& m) {
  Json j;
  j["format"] = "padtrack-benchmark-v1";
  j["master_seed"] = m.master_seed;
  Json cfg;
  cfg["families"] = m.config.families;
  Json tiers = Json::array();
  for (const auto& t : m.config.tiers) tiers.push_back({{"name", t.name}, {"range", range_to_json(t.range)}});
  cfg["tiers"] = tiers;
  cfg["videos_per_cell"] = m.config.videos_per_cell;
  cfg["frames_per_video"] = m.config.frames_per_video;
  cfg["fps"] = m.config.fps;
  cfg["script"] = script_to_json(m.config.script);
  j["config"] = cfg;
  j["templates"] = m.template_files;
  Json entries = Json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"video_id", e.video_id},
                       {"family", e.family},
                       {"tier", e.tier},
                       {"template", e.template_name},
                       {"seed", e.video_seed},
                       {"dir", e.video_dir},
                       {"frames", e.n_frames}});
  }
  j["entries"] = entries;
  write_json(path, j);
}

BenchmarkManifest load_manifest(const std::string& path) {
  const Json j = read_json(path);
  try {
    if (j.at("format").get<std::string>() != "padtrack-benchmark-v1")
      throw FormatError("unsupported benchmark manifest format in " + path);
    BenchmarkManifest m;
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    const Json& cfg = j.at("config");
    m.config.families = cfg.at("families").get<std::vector<std::string>>();
    for (const Json& tj : cfg.at("tiers"))
      m.config.tiers.push_back(
          {tj.at("name").get<std::string>(), range_from_json(tj.at("range"))});
    m.config.videos_per_cell = cfg.at("videos_per_cell").get<int>();
    m.config.frames_per_video = cfg.at("frames_per_video").get<int>();
    m.config.fps = cfg.at("fps").get<double>();
    m.config.script = script_from_json(cfg.at("script"));
    m.template_files = j.at("templates").get<std::vector<std::string>>();
    for (const Json& ej : j.at("entries")) {
      BenchmarkEntry e;
      e.video_id = ej.at("video_id").get<std::string>();
      e.family = ej.at("family").get<std::string>();
      e.tier = ej.at("tier").get<std::string>();
      e.template_name = ej.at("template").get<std::string>();
      e.video_seed = ej.at("seed").get<std::uint64_t>();
      e.video_dir = ej.at("dir").get<std::string>();
      e.n_frames = ej.at("frames").get<int>();
      m.entries.push_back(std::move(e));
    }
    return m;
  } catch (const Json::exception& e) {
    throw FormatError("malformed benchmark manifest " + path + ": " + e.what());
  }
}

SynthVideo regenerate_entry(const BenchmarkManifest& m, const BenchmarkEntry& entry) {
  const TierConfig* tier = nullptr;
  for (const auto& t : m.config.tiers)
    if (t.name == entry.tier) tier = &t;
  if (!tier) throw ValidationError("manifest entry names unknown tier: " + entry.tier);
  const ControllerTemplate tmpl =
      make_template(entry.family, template_seed(m.master_seed, entry.family));
  SynthVideo video =
      synth_video(tmpl, entry.n_frames, m.config.script, tier->range, entry.video_seed);
  video.video_id = entry.video_id;
  video.fps = m.config.fps;
  return video;
}

}  // namespace padtrack
