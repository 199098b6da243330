#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqlab {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Flat key=value experiment config. '#' starts a comment, blank lines are
// skipped, duplicate keys are errors. Consumers read through the typed
// getters, which record every key they accept; unknown_keys() then names
// anything left over so a typo cannot silently fall back to a default.
class Config {
 public:
  Config() = default;

  static Config parse_string(const std::string& text,
                             const std::string& origin = "<string>") {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                 ": expected key=value");
      std::string key = detail::trim(line.substr(0, eq));
      std::string val = detail::trim(line.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                 ": empty key");
      if (!cfg.kv_.emplace(key, val).second)
        throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                 ": duplicate key '" + key + "'");
    }
    return cfg;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str(), path);
  }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    touched_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  std::string require_string(const std::string& key) const {
    touched_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end())
      throw std::runtime_error("config: missing required key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    touched_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    return parse_double(key, it->second);
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    touched_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    return parse_size(key, it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    touched_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::runtime_error("config: key '" + key + "' wants true/false, got '" +
                             it->second + "'");
  }

  // keys present in the file that no getter ever asked about
  std::vector<std::string> unknown_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : kv_) {
      (void)v;
      if (!touched_.count(k)) out.push_back(k);
    }
    return out;
  }

  void reject_unknown_keys() const {
    std::vector<std::string> stray = unknown_keys();
    if (stray.empty()) return;
    std::string msg = "config: unknown key(s):";
    for (const std::string& k : stray) msg += " '" + k + "'";
    throw std::runtime_error(msg);
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

  // sweep support: replace or add one key
  void set(const std::string& key, const std::string& val) { kv_[key] = val; }

 private:
  static double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double d = 0.0;
    try {
      d = std::stod(v, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != v.size())
      throw std::runtime_error("config: key '" + key + "' wants a number, got '" +
                               v + "'");
    return d;
  }

  static std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
      n = std::stoull(v, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != v.size() || (!v.empty() && v[0] == '-'))
      throw std::runtime_error("config: key '" + key +
                               "' wants a non-negative integer, got '" + v + "'");
    return std::size_t(n);
  }

  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> touched_;
};

}  // namespace seqlab
