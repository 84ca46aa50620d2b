#pragma once

#include <charconv>
#include <string>
#include <string_view>

#include "padtrack/common.hpp"

namespace padtrack {

// Shortest decimal form that parses back to the identical double. All
// numeric text in track/trajectory files goes through these two functions,
// which is what makes the round-trip bit-exact.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw FormatError("invalid number: '" + std::string(s) + "'");
  return v;
}

inline long parse_long(std::string_view s) {
  long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw FormatError("invalid integer: '" + std::string(s) + "'");
  return v;
}

}  // namespace padtrack
