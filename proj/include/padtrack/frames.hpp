#pragma once

#include <functional>
#include <string>
#include <vector>

#include "padtrack/image.hpp"

namespace padtrack {

// Random-access view over the frames of one video. `get(i)` returns the RGB
// frame at index i in [0, count); implementations throw IoError naming the
// frame index when a read fails.
struct FrameSource {
  int count = 0;
  std::function<ImageU8(int)> get;
};

// Wraps an in-memory frame list (frames are copied once into shared storage).
FrameSource memory_frame_source(std::vector<ImageU8> frames);

// Scans `dir` for frame_NNNNNN.png files. Indices must be exactly 0..n-1;
// gaps or duplicates are rejected up front. Frames load lazily on get().
FrameSource directory_frame_source(const std::string& dir);

}  // namespace padtrack
