#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "padtrack/common.hpp"

namespace padtrack {

// Button slot order of the unified gamepad layout.
enum Button : int {
  kDpadUp = 0,
  kDpadDown = 1,
  kDpadLeft = 2,
  kDpadRight = 3,
  kFaceA = 4,
  kFaceB = 5,
  kFaceX = 6,
  kFaceY = 7,
  kShoulderLB = 8,
  kShoulderRB = 9,
  kTriggerLT = 10,
  kTriggerRT = 11,
  kThumbL3 = 12,
  kThumbR3 = 13,
  kStart = 14,
  kBack = 15,
};

inline constexpr int kNumButtons = 16;
inline constexpr int kNumAxes = 4;  // lx, ly, rx, ry; up = +1
inline constexpr int kActionDim = kNumButtons + kNumAxes;

// One timestep of the unified action space: 16 booleans + 4 axes in [-1, 1].
struct ActionFrame {
  std::array<bool, kNumButtons> buttons{};
  std::array<double, kNumAxes> sticks{};  // lx, ly, rx, ry

  bool valid() const {
    for (double s : sticks)
      if (!std::isfinite(s) || s < -1.0 || s > 1.0) return false;
    return true;
  }

  bool operator==(const ActionFrame& o) const = default;
};

// Discrete 11x11 joystick cell per stick; (5, 5) is centered. Coordinates are
// image-space: cx grows rightward, cy grows downward.
struct GridReading {
  int left_cx = 5, left_cy = 5;
  int right_cx = 5, right_cy = 5;

  bool valid() const {
    auto ok = [](int v) { return v >= 0 && v <= 10; };
    return ok(left_cx) && ok(left_cy) && ok(right_cx) && ok(right_cy);
  }

  bool centered_left() const { return left_cx == 5 && left_cy == 5; }
  bool centered_right() const { return right_cx == 5 && right_cy == 5; }

  bool operator==(const GridReading& o) const = default;
};

inline constexpr int kGridCenter = 5;
inline constexpr int kGridMax = 10;

// Flat-vector layout: slots 0..15 buttons as {0,1}, slots 16..19 axes.
std::vector<double> encode_action(const ActionFrame& frame);

// Inverse of encode_action: buttons by > 0.5 threshold, sticks clamped.
ActionFrame decode_action(const std::vector<double>& v);

// True iff no button is pressed and both grid cells are exactly (5, 5).
bool is_null_action(const std::array<bool, kNumButtons>& buttons, const GridReading& grid);

// Quantizes continuous stick displacements (y up = +1) to image-space grid
// cells: cell_x = round(5 + 5*sx), cell_y = round(5 - 5*sy), clamped to 0..10.
GridReading quantize_sticks(const ActionFrame& frame);

// Continuous displacements named by the grid cell, inverse of quantize_sticks
// on the 11-point lattice: sx = (cx - 5)/5, sy = -(cy - 5)/5.
std::array<double, kNumAxes> grid_to_sticks(const GridReading& grid);

}  // namespace padtrack
