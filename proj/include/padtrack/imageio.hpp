#pragma once

#include <string>
#include <vector>

#include "padtrack/image.hpp"

namespace padtrack {

// PNG I/O (8-bit gray/RGB/RGBA). Writing is deterministic for a fixed
// zlib/libpng build; the determinism contract relies on that.
ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);

std::vector<unsigned char> png_encode(const ImageU8& img);
ImageU8 png_decode(const std::vector<unsigned char>& bytes);

// In-memory JPEG round-trip at the given quality (1..100). Used to simulate
// video-compression artifacts with a real lossy codec.
ImageU8 jpeg_roundtrip(const ImageU8& rgb, int quality);

std::vector<unsigned char> jpeg_encode(const ImageU8& rgb, int quality);
ImageU8 jpeg_decode(const std::vector<unsigned char>& bytes);

}  // namespace padtrack
