#pragma once
// key=value text records used for manifests, logs and embedded configs.

#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mtci {

/// Insertion-ordered record.
class KeyValues {
 public:
  void set(std::string key, std::string value);
  void set(std::string key, double value);
  void set(std::string key, std::size_t value);
  void set(std::string key, const char* value) { set(std::move(key), std::string(value)); }

  bool contains(std::string_view key) const;
  /// Throws ConfigError when absent.
  const std::string& get(std::string_view key) const;
  double get_double(std::string_view key) const;
  std::size_t get_size(std::string_view key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  /// One `key=value` per line.
  std::string to_block() const;
  /// All entries on a single space-separated line.
  std::string to_line() const;
  /// Parses `key=value` lines; blank lines and lines starting with '#' are skipped.
  static KeyValues parse_block(std::string_view text);

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

double parse_double(const std::string& text, const std::string& field);
std::size_t parse_size(const std::string& text, const std::string& field);

}  // namespace mtci
