#pragma once

#include <map>
#include <string>
#include <vector>

namespace panis {

/// Flat `key = value` store read from a human-editable text file.
///
/// Lines are `key = value`; `#` starts a comment; blank lines are ignored.
/// A `[section]` header prefixes the keys that follow with `section.`.
/// Later assignments override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string getString(const std::string& key, const std::string& fallback) const;
  double getDouble(const std::string& key, double fallback) const;
  long long getInt(const std::string& key, long long fallback) const;
  bool getBool(const std::string& key, bool fallback) const;

  /// Keys that were set but never read; used to reject typos.
  std::vector<std::string> unusedKeys() const;

  /// Canonical text form, sorted by key; round-trips through parse().
  std::string toText() const;

  const std::map<std::string, std::string>& entries() const noexcept { return values_; }

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> touched_;
};

}  // namespace panis
