#pragma once

#include <map>
#include <string>
#include <vector>

namespace tdsim {

// Flat key=value config file with optional [section] headers. Keys inside a
// section are stored as "section.key". '#' starts a comment. Unknown keys are
// kept; callers decide what they need. Parse problems throw ConfigError with
// the offending line number.
class Config {
 public:
  Config() = default;

  static Config load(const std::string& path);
  static Config parse(const std::string& text, const std::string& path);

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& def) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double def) const;
  int get_int(const std::string& key) const;
  int get_int(const std::string& key, int def) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool def) const;

  // Whitespace-separated list of doubles.
  std::vector<double> get_doubles(const std::string& key) const;

  void set(const std::string& key, const std::string& value);

  const std::map<std::string, std::string>& entries() const { return values_; }
  const std::string& source_path() const { return path_; }
  // Line where a key was defined, 0 if set programmatically.
  int line_of(const std::string& key) const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  std::string path_;
};

}  // namespace tdsim
