#include "padtrack/action.hpp"

#include <algorithm>

namespace padtrack {

std::vector<double> encode_action(const ActionFrame& frame) {
  std::vector<double> v(kActionDim);
  for (int i = 0; i < kNumButtons; ++i) v[i] = frame.buttons[i] ? 1.0 : 0.0;
  for (int i = 0; i < kNumAxes; ++i) v[kNumButtons + i] = frame.sticks[i];
  return v;
}

ActionFrame decode_action(const std::vector<double>& v) {
  if (v.size() != static_cast<std::size_t>(kActionDim))
    throw DimensionError("decode_action: expected vector of length " +
                         std::to_string(kActionDim) + ", got " + std::to_string(v.size()));
  ActionFrame f;
  for (int i = 0; i < kNumButtons; ++i) f.buttons[i] = v[i] > 0.5;
  for (int i = 0; i < kNumAxes; ++i) f.sticks[i] = std::clamp(v[kNumButtons + i], -1.0, 1.0);
  return f;
}

bool is_null_action(const std::array<bool, kNumButtons>& buttons, const GridReading& grid) {
  for (bool b : buttons)
    if (b) return false;
  return grid.centered_left() && grid.centered_right();
}

namespace {
int cell_of(double displacement) {
  const int c = static_cast<int>(std::lround(kGridCenter + kGridCenter * displacement));
  return std::clamp(c, 0, kGridMax);
}
}  // namespace

GridReading quantize_sticks(const ActionFrame& frame) {
  GridReading g;
  g.left_cx = cell_of(frame.sticks[0]);
  g.left_cy = cell_of(-frame.sticks[1]);
  g.right_cx = cell_of(frame.sticks[2]);
  g.right_cy = cell_of(-frame.sticks[3]);
  return g;
}

std::array<double, kNumAxes> grid_to_sticks(const GridReading& grid) {
  const double k = kGridCenter;
  return {(grid.left_cx - k) / k, -(grid.left_cy - k) / k, (grid.right_cx - k) / k,
          -(grid.right_cy - k) / k};
}

}  // namespace padtrack
