#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace refinery {

// `key = value` lines grouped under `[section]` headers. '#' starts a comment.
// Keys keep insertion order so echoing a config reproduces it.
class ConfigSection {
 public:
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  const std::string* find(const std::string& key) const;
  const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

 private:
  std::vector<std::pair<std::string, std::string>> items_;
};

class RunConfig {
 public:
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);

  // Missing sections read as empty.
  const ConfigSection& section(const std::string& name) const;
  ConfigSection& mutable_section(const std::string& name);
  void set(const std::string& section, const std::string& key, const std::string& value);

  // Applies "section.key=value" overrides.
  void apply_override(const std::string& dotted);

  std::string to_text() const;
  std::vector<std::string> section_names() const;

 private:
  std::map<std::string, ConfigSection> sections_;
};

// Typed reader that remembers which keys were consumed; finish() rejects
// any key nobody asked for.
class SectionReader {
 public:
  SectionReader(const ConfigSection& section, std::string name)
      : section_(section), name_(std::move(name)) {}

  std::string get_string(const std::string& key, const std::string& fallback);
  int get_int(const std::string& key, int fallback);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback);
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback);

  void finish() const;

 private:
  const std::string* lookup(const std::string& key);
  [[noreturn]] void bad(const std::string& key, const std::string& value,
                        const char* expected) const;

  const ConfigSection& section_;
  std::string name_;
  std::set<std::string> used_;
};

std::string format_double(double v);
std::string join_ints(const std::vector<int>& v);
std::string join_doubles(const std::vector<double>& v);

}  // namespace refinery
