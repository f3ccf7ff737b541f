#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ivit/error.hpp"

namespace ivit {

/// Ordered `key = value` block. Used for config files and for the metadata
/// entry embedded in checkpoints.
class KeyValues {
 public:
  void set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries_)
      if (k == key) {
        v = std::move(value);
        return;
      }
    entries_.emplace_back(key, std::move(value));
  }

  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }
  void set(const std::string& key, double value) { set(key, format_double(value)); }
  void set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }

  bool contains(const std::string& key) const {
    for (const auto& e : entries_)
      if (e.first == key) return true;
    return false;
  }

  const std::string& get(const std::string& key) const {
    for (const auto& e : entries_)
      if (e.first == key) return e.second;
    throw Error("missing key '" + key + "'");
  }

  double get_double(const std::string& key) const { return parse_double(key, get(key)); }
  std::uint64_t get_uint(const std::string& key) const { return parse_uint(key, get(key)); }
  bool get_bool(const std::string& key) const { return parse_bool(key, get(key)); }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  bool operator==(const KeyValues&) const = default;

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

  /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
  /// When `allowed` is non-empty, any other key is rejected.
  static KeyValues parse(const std::string& text, const std::set<std::string>& allowed = {}) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      require(eq != std::string::npos, "line " + std::to_string(lineno) + ": expected 'key = value'");
      const std::string key = trim(body.substr(0, eq));
      const std::string value = trim(body.substr(eq + 1));
      require(!key.empty(), "line " + std::to_string(lineno) + ": empty key");
      require(allowed.empty() || allowed.count(key) != 0,
              "line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      kv.set(key, value);
    }
    return kv;
  }

  static std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return os.str();
  }

  static double parse_double(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos == s.size() && std::isfinite(v)) return v;
    } catch (const std::exception&) {
    }
    throw Error("key '" + key + "': expected a number, got '" + s + "'");
  }

  static std::uint64_t parse_uint(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc() && ptr == s.data() + s.size(),
            "key '" + key + "': expected a non-negative integer, got '" + s + "'");
    return v;
  }

  static bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw Error("key '" + key + "': expected true/false, got '" + s + "'");
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace ivit
