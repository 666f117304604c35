#include "refinery/config.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "refinery/error.hpp"

namespace refinery {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && !s.empty();
}

}  // namespace

void ConfigSection::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : items_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  items_.emplace_back(key, value);
}

bool ConfigSection::has(const std::string& key) const { return find(key) != nullptr; }

const std::string* ConfigSection::find(const std::string& key) const {
  for (const auto& [k, v] : items_) {
    if (k == key) return &v;
  }
  return nullptr;
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::string current;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ValidationError("config line " + std::to_string(lineno) + ": bad section header");
      }
      current = trim(line.substr(1, line.size() - 2));
      cfg.mutable_section(current);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    if (current.empty()) {
      throw ValidationError("config line " + std::to_string(lineno) +
                            ": key outside of any [section]");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) {
      throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
    }
    cfg.set(current, key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const ConfigSection& RunConfig::section(const std::string& name) const {
  static const ConfigSection kEmpty;
  auto it = sections_.find(name);
  return it == sections_.end() ? kEmpty : it->second;
}

std::vector<std::string> RunConfig::section_names() const {
  std::vector<std::string> out;
  for (const auto& [name, sec] : sections_) out.push_back(name);
  return out;
}

ConfigSection& RunConfig::mutable_section(const std::string& name) { return sections_[name]; }

void RunConfig::set(const std::string& section, const std::string& key,
                    const std::string& value) {
  sections_[section].set(key, value);
}

void RunConfig::apply_override(const std::string& dotted) {
  const auto eq = dotted.find('=');
  const auto dot = dotted.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ValidationError("override '" + dotted + "' must look like section.key=value");
  }
  set(trim(dotted.substr(0, dot)), trim(dotted.substr(dot + 1, eq - dot - 1)),
      trim(dotted.substr(eq + 1)));
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& [name, sec] : sections_) {
    if (!first) os << "\n";
    first = false;
    os << "[" << name << "]\n";
    for (const auto& [k, v] : sec.items()) os << k << " = " << v << "\n";
  }
  return os.str();
}

const std::string* SectionReader::lookup(const std::string& key) {
  used_.insert(key);
  return section_.find(key);
}

void SectionReader::bad(const std::string& key, const std::string& value,
                        const char* expected) const {
  throw ValidationError("[" + name_ + "] " + key + " = '" + value + "': expected " + expected);
}

std::string SectionReader::get_string(const std::string& key, const std::string& fallback) {
  const std::string* v = lookup(key);
  return v ? *v : fallback;
}

int SectionReader::get_int(const std::string& key, int fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  int out = 0;
  if (!parse_number(*v, out)) bad(key, *v, "an integer");
  return out;
}

std::uint64_t SectionReader::get_u64(const std::string& key, std::uint64_t fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  std::uint64_t out = 0;
  if (!parse_number(*v, out)) bad(key, *v, "an unsigned integer");
  return out;
}

double SectionReader::get_double(const std::string& key, double fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  double out = 0;
  if (!parse_number(*v, out)) bad(key, *v, "a number");
  return out;
}

bool SectionReader::get_bool(const std::string& key, bool fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "on" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "off" || *v == "no") return false;
  bad(key, *v, "a boolean");
}

std::vector<int> SectionReader::get_ints(const std::string& key,
                                         const std::vector<int>& fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  std::vector<int> out;
  for (const auto& item : split_list(*v)) {
    int x = 0;
    if (!parse_number(item, x)) bad(key, *v, "a comma-separated integer list");
    out.push_back(x);
  }
  return out;
}

std::vector<double> SectionReader::get_doubles(const std::string& key,
                                               const std::vector<double>& fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& item : split_list(*v)) {
    double x = 0;
    if (!parse_number(item, x)) bad(key, *v, "a comma-separated number list");
    out.push_back(x);
  }
  return out;
}

void SectionReader::finish() const {
  for (const auto& [k, v] : section_.items()) {
    if (!used_.contains(k)) throw ValidationError("[" + name_ + "] unknown key '" + k + "'");
  }
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

}  // namespace refinery
