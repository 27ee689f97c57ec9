#pragma once

#include <charconv>
#include <string>
#include <system_error>

#include "dpnas/errors.hpp"

namespace dpnas {

// Shortest round-trip decimal form; keeps CSV/JSON output byte-stable.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("bad number: '" + s + "'");
  return v;
}

}  // namespace dpnas
