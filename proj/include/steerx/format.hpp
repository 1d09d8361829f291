#pragma once

#include <steerx/error.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <string_view>

namespace steerx {

/// Decimal text with 17 significant digits; round-trips any double exactly.
inline std::string format_sig(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16e", v);
  return buf;
}

inline double parse_sig(const std::string& s) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw Error("parse_sig: not a number: '" + s + "'");
  return v;
}

/// JSON string literal (quoted, escaped).
inline std::string json_quote(std::string_view s) { return nlohmann::json(s).dump(); }

/// JSON number token carrying >= 12 significant digits; NaN becomes null.
inline std::string json_number(double v) {
  if (std::isnan(v)) return "null";
  return format_sig(v);
}

}  // namespace steerx
