#include "mtci/kv.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <sstream>

#include "mtci/error.hpp"

namespace mtci {

void KeyValues::set(std::string key, std::string value) {
  auto it = std::find_if(entries_.begin(), entries_.end(),
                         [&](const auto& e) { return e.first == key; });
  if (it != entries_.end()) {
    it->second = std::move(value);
  } else {
    entries_.emplace_back(std::move(key), std::move(value));
  }
}

void KeyValues::set(std::string key, double value) { set(std::move(key), format_double(value)); }

void KeyValues::set(std::string key, std::size_t value) {
  set(std::move(key), std::to_string(value));
}

bool KeyValues::contains(std::string_view key) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
}

const std::string& KeyValues::get(std::string_view key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return v;
  throw ConfigError(std::string(key), "missing");
}

double KeyValues::get_double(std::string_view key) const {
  return parse_double(get(key), std::string(key));
}

std::size_t KeyValues::get_size(std::string_view key) const {
  return parse_size(get(key), std::string(key));
}

std::string KeyValues::to_block() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

std::string KeyValues::to_line() const {
  std::string out;
  for (const auto& [k, v] : entries_) {
    if (!out.empty()) out += ' ';
    out += k + "=" + v;
  }
  return out;
}

KeyValues KeyValues::parse_block(std::string_view text) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value, got '" + line + "'", lineno);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

double parse_double(const std::string& text, const std::string& field) {
  // strtod keeps subnormal and overflowing values (as +-inf) that from_chars rejects
  char* end = nullptr;
  const double v = text.empty() || std::isspace(static_cast<unsigned char>(text[0]))
                       ? 0.0
                       : std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size() || text.empty()) {
    throw ConfigError(field, "not a number: '" + text + "'");
  }
  return v;
}

std::size_t parse_size(const std::string& text, const std::string& field) {
  std::size_t v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError(field, "not a non-negative integer: '" + text + "'");
  }
  return v;
}

}  // namespace mtci
