#pragma once

// Small text helpers shared by descriptors, configs and manifests.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "crosspoint/errors.hpp"

namespace crosspoint::text {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, 16);
  std::string digits(buf, res.ptr);
  return std::string(16 - digits.size(), '0') + digits;
}

inline double parse_double(std::string_view s, std::string_view what) {
  s = trim(s);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(std::string(what) + ": expected a number, got '" + std::string(s) + "'");
  }
  return v;
}

inline std::uint64_t parse_uint(std::string_view s, std::string_view what) {
  s = trim(s);
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(std::string(what) + ": expected a non-negative integer, got '" +
                      std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::size_t> parse_uint_list(std::string_view s, std::string_view what) {
  std::vector<std::size_t> out;
  if (trim(s).empty()) return out;
  for (const auto& item : split(s, ',')) out.push_back(static_cast<std::size_t>(parse_uint(item, what)));
  return out;
}

template <class T>
std::string join(const std::vector<T>& items, std::string_view sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(items[i]);
    } else if constexpr (std::is_arithmetic_v<T>) {
      out += std::to_string(items[i]);
    } else {
      out += items[i];
    }
  }
  return out;
}

}  // namespace crosspoint::text
