#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <vector>

#include "padtrack/common.hpp"

namespace padtrack {

// Dense row-major raster with a runtime channel count (1 = gray, 3 = RGB,
// 4 = RGBA). Value semantics; cheap to move.
template <typename T>
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, T fill = T{})
      : width_(width), height_(height), channels_(channels) {
    if (width < 0 || height < 0 || channels < 1 || channels > 4)
      throw ValidationError("bad image dimensions");
    pixels_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return pixels_.empty(); }
  std::size_t size() const { return pixels_.size(); }

  T* data() { return pixels_.data(); }
  const T* data() const { return pixels_.data(); }
  std::vector<T>& pixels() { return pixels_; }
  const std::vector<T>& pixels() const { return pixels_; }

  T& at(int x, int y, int c = 0) {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  const T& at(int x, int y, int c = 0) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  T* row(int y) { return pixels_.data() + static_cast<std::size_t>(y) * width_ * channels_; }
  const T* row(int y) const {
    return pixels_.data() + static_cast<std::size_t>(y) * width_ * channels_;
  }

  bool in_bounds(int x, int y) const { return x >= 0 && x < width_ && y >= 0 && y < height_; }

  bool operator==(const Image& o) const {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_ &&
           pixels_ == o.pixels_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<T> pixels_;
};

using ImageU8 = Image<std::uint8_t>;
using ImageF = Image<float>;

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0) + 0.5);
}

// Bilinear sample of one channel at subpixel (x, y); coordinates are pixel
// centers (0, 0 = center of the top-left pixel). Out-of-bounds reads clamp.
template <typename T>
double sample_bilinear(const Image<T>& img, double x, double y, int c) {
  const int w = img.width(), h = img.height();
  const double fx = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const double fy = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double ax = fx - x0, ay = fy - y0;
  const double v00 = img.at(x0, y0, c), v10 = img.at(x1, y0, c);
  const double v01 = img.at(x0, y1, c), v11 = img.at(x1, y1, c);
  return (v00 * (1 - ax) + v10 * ax) * (1 - ay) + (v01 * (1 - ax) + v11 * ax) * ay;
}

// Rec.601 luma in [0, 1] from an 8-bit RGB/RGBA image.
ImageF to_grayscale(const ImageU8& rgb);

// Bilinear resize (any channel count).
ImageU8 resize_bilinear(const ImageU8& src, int out_w, int out_h);
ImageF resize_bilinear(const ImageF& src, int out_w, int out_h);

// Separable Gaussian blur on a single-channel float image.
ImageF gaussian_blur(const ImageF& src, double sigma);

// 2x decimation (2x2 box filter) for pyramid construction.
ImageF downsample2(const ImageF& src);

}  // namespace padtrack
