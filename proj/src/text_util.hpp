#pragma once

#include <charconv>
#include <string>
#include <string_view>
#include <vector>

#include "filterbench/error.hpp"

namespace filterbench::detail {

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

inline std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(text.substr(start));
      return out;
    }
    out.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename T>
T parse_number(std::string_view text, std::string_view what) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw Error(ErrorKind::Parse, "bad " + std::string(what) + " '" + std::string(text) + "'");
  }
  return value;
}

inline int parse_int(std::string_view text) { return parse_number<int>(text, "integer"); }
inline float parse_float(std::string_view text) { return parse_number<float>(text, "number"); }
inline double parse_double(std::string_view text) { return parse_number<double>(text, "number"); }

}  // namespace filterbench::detail
