#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mamba_spike/error.hpp"

namespace mamba_spike {

/// Flat key-value run configuration with dotted section keys:
///
///   # comment
///   frontend.lif.tau_m = 30
///   dataset = synth-gesture
///
/// Readers consume keys; finish() rejects anything left over, so unknown or
/// misspelled keys fail loudly instead of being ignored.
class Config {
 public:
  Config() = default;

  static Config parse_string(const std::string& text, const std::string& origin = "<config>") {
    Config cfg;
    cfg.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string stripped = strip(line);
      if (stripped.empty() || stripped[0] == '#') continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos) {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": expected `key = value`, got \"" +
                          stripped + "\"");
      }
      const std::string key = strip(stripped.substr(0, eq));
      const std::string value = strip(stripped.substr(eq + 1));
      if (key.empty()) {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
      }
      if (cfg.values_.count(key)) {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": duplicate key \"" + key + "\"");
      }
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  /// Overrides or adds a key (CLI flags layer on top of the file).
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require_string(const std::string& key) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) throw ContractError(origin_ + ": missing required key \"" + key + "\"");
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw FormatError(origin_ + ": key \"" + key + "\" is not a number: \"" + it->second + "\"");
    }
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(it->second, &pos);
      if (pos != it->second.size() || v < 0) throw std::invalid_argument("bad");
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw FormatError(origin_ + ": key \"" + key + "\" is not a non-negative integer: \"" +
                        it->second + "\"");
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("bad");
      return v;
    } catch (const std::exception&) {
      throw FormatError(origin_ + ": key \"" + key + "\" is not an unsigned integer: \"" +
                        it->second + "\"");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "on") return true;
    if (it->second == "false" || it->second == "0" || it->second == "off") return false;
    throw FormatError(origin_ + ": key \"" + key + "\" is not a boolean: \"" + it->second + "\"");
  }

  /// Rejects unconsumed keys; call after every reader has taken its keys.
  void finish() const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : values_) {
      if (!consumed_.count(k)) unknown.push_back(k);
    }
    if (!unknown.empty()) {
      std::string msg = origin_ + ": unknown config key";
      if (unknown.size() > 1) msg += "s";
      msg += ":";
      for (const auto& k : unknown) msg += " \"" + k + "\"";
      throw FormatError(msg);
    }
  }

  /// All key/value pairs in sorted order (std::map iteration), for echoing
  /// the resolved configuration into reports.
  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
  std::string origin_ = "<config>";
};

}  // namespace mamba_spike
