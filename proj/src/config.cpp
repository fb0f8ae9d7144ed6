#include "panis/config.hpp"

#include "panis/error.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace panis {
namespace {

std::string trim(const std::string& s) {
  auto begin = std::find_if_not(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
  auto end = std::find_if_not(s.rbegin(), s.rend(), [](unsigned char c) { return std::isspace(c); }).base();
  return begin < end ? std::string(begin, end) : std::string();
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  int lineNo = 0;
  while (std::getline(is, line)) {
    ++lineNo;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(ErrorKind::Config, origin + ":" + std::to_string(lineNo) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::Config, origin + ":" + std::to_string(lineNo) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(ErrorKind::Config, origin + ":" + std::to_string(lineNo) + ": empty key");
    cfg.set(section.empty() ? key : section + "." + key, value);
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Config, "cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path);
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
  touched_.try_emplace(key, false);
}

bool KeyValueConfig::has(const std::string& key) const { return values_.contains(key); }

std::string KeyValueConfig::getString(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  touched_[key] = true;
  return it->second;
}

double KeyValueConfig::getDouble(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  touched_[key] = true;
  try {
    std::size_t used = 0;
    double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::Config, "config key '" + key + "' expects a number, got '" + it->second + "'");
  }
}

long long KeyValueConfig::getInt(const std::string& key, long long fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  touched_[key] = true;
  long long v = 0;
  const std::string& s = it->second;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    fail(ErrorKind::Config, "config key '" + key + "' expects an integer, got '" + s + "'");
  }
  return v;
}

bool KeyValueConfig::getBool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  touched_[key] = true;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail(ErrorKind::Config, "config key '" + key + "' expects a boolean, got '" + it->second + "'");
}

std::vector<std::string> KeyValueConfig::unusedKeys() const {
  std::vector<std::string> out;
  for (const auto& [key, used] : touched_)
    if (!used) out.push_back(key);
  return out;
}

std::string KeyValueConfig::toText() const {
  std::ostringstream os;
  for (const auto& [key, value] : values_) os << key << " = " << value << '\n';
  return os.str();
}

}  // namespace panis
