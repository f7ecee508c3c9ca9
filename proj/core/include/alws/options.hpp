#pragma once

#include <cstdlib>
#include <map>
#include <string>

#include "alws/common.hpp"

namespace alws {

// Flat string key/value bag, the parsed form of one run-config section.
// Typed getters fall back to the given default when the key is absent and
// fail loudly when a present value does not parse.
class Options {
 public:
  Options() = default;

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    char* end = nullptr;
    double v = std::strtod(it->second.c_str(), &end);
    check(end != it->second.c_str() && *end == '\0',
          "option '" + key + "': cannot parse '" + it->second + "' as a number");
    return v;
  }

  int get_int(const std::string& key, int fallback) const {
    double v = get_double(key, static_cast<double>(fallback));
    int i = static_cast<int>(v);
    check(static_cast<double>(i) == v,
          "option '" + key + "': expected an integer, got '" +
              get_string(key, "") + "'");
    return i;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& s = it->second;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    fail("option '" + key + "': cannot parse '" + s + "' as a boolean");
  }

  const std::map<std::string, std::string>& items() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace alws
