#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "padtrack/common.hpp"

namespace padtrack {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const { return std::sqrt(x * x + y * y); }
  bool operator==(const Vec2& o) const = default;
};

// Row-major 2x3 affine: [a b tx; c d ty], mapping (x, y) -> (ax+by+tx, cx+dy+ty).
struct Affine2 {
  double a = 1, b = 0, tx = 0;
  double c = 0, d = 1, ty = 0;

  static Affine2 identity() { return {}; }

  static Affine2 similarity(double scale, double angle_rad, double tx, double ty) {
    const double cs = scale * std::cos(angle_rad);
    const double sn = scale * std::sin(angle_rad);
    return {cs, -sn, tx, sn, cs, ty};
  }

  Vec2 apply(const Vec2& p) const { return {a * p.x + b * p.y + tx, c * p.x + d * p.y + ty}; }

  double det() const { return a * d - b * c; }

  Affine2 inverse() const {
    const double D = det();
    if (std::abs(D) < 1e-12) throw ValidationError("affine is singular, cannot invert");
    const double ia = d / D, ib = -b / D, ic = -c / D, id = a / D;
    return {ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)};
  }

  // this ∘ other (apply other first).
  Affine2 compose(const Affine2& o) const {
    return {a * o.a + b * o.c, a * o.b + b * o.d, a * o.tx + b * o.ty + tx,
            c * o.a + d * o.c, c * o.b + d * o.d, c * o.tx + d * o.ty + ty};
  }

  std::array<double, 6> coeffs() const { return {a, b, tx, c, d, ty}; }
  static Affine2 from_coeffs(const std::array<double, 6>& v) {
    return {v[0], v[1], v[2], v[3], v[4], v[5]};
  }

  // Geometric mean of the singular values' magnitude: |scale| of the map.
  double scale_magnitude() const { return std::sqrt(std::abs(det())); }
};

struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open in pixel space

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool empty() const { return x1 <= x0 || y1 <= y0; }

  Rect clamped(double w, double h) const {
    return {std::clamp(x0, 0.0, w), std::clamp(y0, 0.0, h), std::clamp(x1, 0.0, w),
            std::clamp(y1, 0.0, h)};
  }

  bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

inline Rect intersect(const Rect& a, const Rect& b) {
  return {std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
}

inline double iou(const Rect& a, const Rect& b) {
  const double inter = intersect(a, b).area();
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Axis-aligned bound of a rectangle [0,w)x[0,h) under an affine map.
inline Rect transformed_bounds(const Affine2& t, double w, double h) {
  const Vec2 corners[4] = {t.apply({0, 0}), t.apply({w, 0}), t.apply({0, h}), t.apply({w, h})};
  Rect r{corners[0].x, corners[0].y, corners[0].x, corners[0].y};
  for (int i = 1; i < 4; ++i) {
    r.x0 = std::min(r.x0, corners[i].x);
    r.y0 = std::min(r.y0, corners[i].y);
    r.x1 = std::max(r.x1, corners[i].x);
    r.y1 = std::max(r.y1, corners[i].y);
  }
  return r;
}

}  // namespace padtrack
