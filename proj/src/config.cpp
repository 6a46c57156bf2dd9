#include "tdsim/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tdsim/errors.hpp"

namespace tdsim {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

Config Config::parse(const std::string& text, const std::string& path) {
  Config cfg;
  cfg.path_ = path;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(path, lineno, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError(path, lineno, "empty section name");
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path, lineno, "expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(path, lineno, "empty key");
    if (!section.empty()) key = section + "." + key;
    if (cfg.values_.count(key))
      throw ConfigError(path, lineno, "duplicate key: " + key);
    cfg.values_[key] = value;
    cfg.lines_[key] = lineno;
  }
  return cfg;
}

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

int Config::line_of(const std::string& key) const {
  auto it = lines_.find(key);
  return it == lines_.end() ? 0 : it->second;
}

std::string Config::get_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end())
    throw ConfigError(path_ + ": missing required key: " + key);
  return it->second;
}

std::string Config::get_string(const std::string& key,
                               const std::string& def) const {
  auto it = values_.find(key);
  return it == values_.end() ? def : it->second;
}

double Config::get_double(const std::string& key) const {
  std::string v = get_string(key);
  char* end = nullptr;
  double d = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError(path_, line_of(key), "not a number: " + key + " = " + v);
  return d;
}

double Config::get_double(const std::string& key, double def) const {
  return has(key) ? get_double(key) : def;
}

int Config::get_int(const std::string& key) const {
  std::string v = get_string(key);
  char* end = nullptr;
  long n = std::strtol(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError(path_, line_of(key), "not an integer: " + key + " = " + v);
  return static_cast<int>(n);
}

int Config::get_int(const std::string& key, int def) const {
  return has(key) ? get_int(key) : def;
}

bool Config::get_bool(const std::string& key) const {
  std::string v = get_string(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(path_, line_of(key), "not a boolean: " + key + " = " + v);
}

bool Config::get_bool(const std::string& key, bool def) const {
  return has(key) ? get_bool(key) : def;
}

std::vector<double> Config::get_doubles(const std::string& key) const {
  std::istringstream in(get_string(key));
  std::vector<double> out;
  std::string tok;
  while (in >> tok) {
    char* end = nullptr;
    double d = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0')
      throw ConfigError(path_, line_of(key),
                        "not a number in list: " + key + " element '" + tok + "'");
    out.push_back(d);
  }
  return out;
}

void Config::set(const std::string& key, const std::string& value) {
  values_[key] = value;
  lines_[key] = 0;
}

}  // namespace tdsim
