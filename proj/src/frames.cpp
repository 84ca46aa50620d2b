#include "padtrack/frames.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <memory>

#include "padtrack/common.hpp"
#include "padtrack/imageio.hpp"

namespace padtrack {
namespace {

ImageU8 ensure_rgb(ImageU8 img) {
  if (img.channels() == 3) return img;
  ImageU8 out(img.width(), img.height(), 3);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (img.channels() == 1) {
        const std::uint8_t g = img.at(x, y, 0);
        out.at(x, y, 0) = g;
        out.at(x, y, 1) = g;
        out.at(x, y, 2) = g;
      } else {
        out.at(x, y, 0) = img.at(x, y, 0);
        out.at(x, y, 1) = img.at(x, y, 1);
        out.at(x, y, 2) = img.at(x, y, 2);
      }
    }
  }
  return out;
}

}  // namespace

FrameSource memory_frame_source(std::vector<ImageU8> frames) {
  auto store = std::make_shared<std::vector<ImageU8>>(std::move(frames));
  FrameSource src;
  src.count = static_cast<int>(store->size());
  src.get = [store](int i) {
    if (i < 0 || i >= static_cast<int>(store->size()))
      throw ValidationError("frame index " + std::to_string(i) + " out of range");
    return ensure_rgb((*store)[i]);
  };
  return src;
}

FrameSource directory_frame_source(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<long> indices;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    long idx = 0;
    int consumed = 0;
    if (std::sscanf(name.c_str(), "frame_%06ld.png%n", &idx, &consumed) == 1 &&
        consumed == static_cast<int>(name.size()))
      indices.push_back(idx);
  }
  if (indices.empty()) throw FormatError("no frame_NNNNNN.png files in " + dir);
  std::sort(indices.begin(), indices.end());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] != static_cast<long>(i))
      throw FormatError("frame indices in " + dir + " are not contiguous from 0: found frame " +
                        std::to_string(indices[i]) + " at rank " + std::to_string(i));
  }

  const std::string base = dir;
  FrameSource src;
  src.count = static_cast<int>(indices.size());
  src.get = [base](int i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%06d.png", i);
    try {
      return ensure_rgb(read_png((fs::path(base) / name).string()));
    } catch (const Error& e) {
      throw IoError("frame " + std::to_string(i) + ": " + e.what());
    }
  };
  return src;
}

}  // namespace padtrack
