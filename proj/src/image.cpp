#include "padtrack/image.hpp"

#include <cmath>

#include "padtrack/parallel.hpp"

namespace padtrack {

ImageF to_grayscale(const ImageU8& rgb) {
  if (rgb.channels() < 3) {
    ImageF out(rgb.width(), rgb.height(), 1);
    for (int y = 0; y < rgb.height(); ++y)
      for (int x = 0; x < rgb.width(); ++x)
        out.at(x, y) = static_cast<float>(rgb.at(x, y, 0) / 255.0);
    return out;
  }
  ImageF out(rgb.width(), rgb.height(), 1);
  par::for_each_index(rgb.height(), [&](std::ptrdiff_t y) {
    const std::uint8_t* src = rgb.row(static_cast<int>(y));
    float* dst = out.row(static_cast<int>(y));
    const int c = rgb.channels();
    for (int x = 0; x < rgb.width(); ++x) {
      const std::uint8_t* p = src + static_cast<std::size_t>(x) * c;
      dst[x] = static_cast<float>((0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0);
    }
  });
  return out;
}

namespace {

template <typename T>
Image<T> resize_bilinear_impl(const Image<T>& src, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw ValidationError("resize target must be positive");
  Image<T> out(out_w, out_h, src.channels());
  const double sx = static_cast<double>(src.width()) / out_w;
  const double sy = static_cast<double>(src.height()) / out_h;
  par::for_each_index(out_h, [&](std::ptrdiff_t y) {
    for (int x = 0; x < out_w; ++x) {
      const double srcx = (x + 0.5) * sx - 0.5;
      const double srcy = (y + 0.5) * sy - 0.5;
      for (int c = 0; c < src.channels(); ++c) {
        const double v = sample_bilinear(src, srcx, srcy, c);
        if constexpr (std::is_same_v<T, std::uint8_t>)
          out.at(x, static_cast<int>(y), c) = to_u8(v);
        else
          out.at(x, static_cast<int>(y), c) = static_cast<float>(v);
      }
    }
  });
  return out;
}

}  // namespace

ImageU8 resize_bilinear(const ImageU8& src, int out_w, int out_h) {
  return resize_bilinear_impl(src, out_w, out_h);
}

ImageF resize_bilinear(const ImageF& src, int out_w, int out_h) {
  return resize_bilinear_impl(src, out_w, out_h);
}

ImageF gaussian_blur(const ImageF& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[i + radius] = static_cast<float>(v);
    sum += v;
  }
  for (auto& k : kernel) k = static_cast<float>(k / sum);

  // Both passes accumulate taps in ascending order into a per-row double
  // buffer; the element-wise inner loops vectorize where a per-pixel
  // reduction would not, and the sums match the naive form bit for bit.
  const int w = src.width(), h = src.height();
  ImageF tmp(w, h, 1);
  par::for_each_index(h, [&](std::ptrdiff_t y) {
    const float* in = src.row(static_cast<int>(y));
    float* out = tmp.row(static_cast<int>(y));
    std::vector<double> acc(w, 0.0);
    for (int i = -radius; i <= radius; ++i) {
      const double k = kernel[i + radius];
      const int lo = std::min(w, std::max(0, -i));
      const int hi = std::max(lo, std::min(w, w - i));
      for (int x = 0; x < lo; ++x) acc[x] += k * in[0];
      for (int x = lo; x < hi; ++x) acc[x] += k * in[x + i];
      for (int x = std::max(lo, hi); x < w; ++x) acc[x] += k * in[w - 1];
    }
    for (int x = 0; x < w; ++x) out[x] = static_cast<float>(acc[x]);
  });
  ImageF out(w, h, 1);
  par::for_each_index(h, [&](std::ptrdiff_t y) {
    float* dst = out.row(static_cast<int>(y));
    std::vector<double> acc(w, 0.0);
    for (int i = -radius; i <= radius; ++i) {
      const int yy = std::clamp(static_cast<int>(y) + i, 0, h - 1);
      const float* in = tmp.row(yy);
      const double k = kernel[i + radius];
      for (int x = 0; x < w; ++x) acc[x] += k * in[x];
    }
    for (int x = 0; x < w; ++x) dst[x] = static_cast<float>(acc[x]);
  });
  return out;
}

ImageF downsample2(const ImageF& src) {
  const int w = std::max(1, src.width() / 2);
  const int h = std::max(1, src.height() / 2);
  ImageF out(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int x0 = 2 * x, y0 = 2 * y;
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const int y1 = std::min(y0 + 1, src.height() - 1);
      out.at(x, y) = 0.25f * (src.at(x0, y0) + src.at(x1, y0) + src.at(x0, y1) + src.at(x1, y1));
    }
  }
  return out;
}

}  // namespace padtrack
