#pragma once

// Canonical JSON text: object keys sorted, floats printed with 17 significant
// digits so every double round-trips exactly, no insignificant whitespace
// unless an indent is requested.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "json.hpp"

#include "domainshift/error.hpp"

namespace domainshift {

namespace detail {

inline void append_double(std::string& out, double v) {
  if (!std::isfinite(v)) {
    out += "null";
    return;
  }
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s(buf, static_cast<std::size_t>(n));
  // Keep the value visibly a float so readers do not narrow it to an integer.
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  out += s;
}

inline void append_canonical(std::string& out, const nlohmann::json& j, int indent, int depth) {
  auto newline = [&](int d) {
    if (indent < 0) return;
    out += '\n';
    out.append(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += '{';
      bool first = true;
      // nlohmann's default object type is a std::map, so iteration is sorted.
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        out += nlohmann::json(it.key()).dump();
        out += indent < 0 ? ":" : ": ";
        append_canonical(out, it.value(), indent, depth + 1);
      }
      newline(depth);
      out += '}';
      return;
    }
    case nlohmann::json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out += '[';
      bool first = true;
      for (const auto& v : j) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        append_canonical(out, v, indent, depth + 1);
      }
      newline(depth);
      out += ']';
      return;
    }
    case nlohmann::json::value_t::number_float:
      append_double(out, j.get<double>());
      return;
    default:
      out += j.dump();
  }
}

}  // namespace detail

/// Serialize `j` canonically. indent < 0 gives the compact form.
inline std::string dump_canonical(const nlohmann::json& j, int indent = -1) {
  std::string out;
  detail::append_canonical(out, j, indent, 0);
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::IoError, "cannot open for writing", path);
  out << text;
  require(static_cast<bool>(out), ErrorKind::IoError, "write failed", path);
}

inline void write_canonical(const std::string& path, const nlohmann::json& j, int indent = -1) {
  write_text_file(path, dump_canonical(j, indent) + '\n');
}

}  // namespace domainshift
