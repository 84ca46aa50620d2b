#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "padtrack/common.hpp"
#include "padtrack/image.hpp"

namespace padtrack {

using Json = nlohmann::json;

// Reads and parses a JSON file; parse failures raise FormatError naming the path.
Json read_json(const std::string& path);

// Writes pretty-printed JSON followed by a trailing newline.
void write_json(const std::string& path, const Json& j);

std::string base64_encode(const std::vector<std::uint8_t>& data);
std::vector<std::uint8_t> base64_decode(const std::string& text);

// RGBA/RGB/gray raster packed as a base64 PNG string, for embedding in JSON.
std::string image_to_base64_png(const ImageU8& img);
ImageU8 image_from_base64_png(const std::string& text);

}  // namespace padtrack
