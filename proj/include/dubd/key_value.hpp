#pragma once

// Human-readable "key = value" blocks, one pair per line. Blank lines and
// lines starting with '#' are ignored. Keys keep insertion order.

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dubd/tensor.hpp"

namespace dubd {

class KeyValue {
 public:
  void set(const std::string& key, std::string value) {
    for (auto& [k, v] : items_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    items_.emplace_back(key, std::move(value));
  }
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  void set(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(key, os.str());
  }
  void set(const std::string& key, long long value) { set(key, std::to_string(value)); }
  void set(const std::string& key, int value) { set(key, std::to_string(value)); }
  void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

  [[nodiscard]] bool has(const std::string& key) const {
    for (const auto& [k, v] : items_)
      if (k == key) return true;
    return false;
  }

  [[nodiscard]] const std::string& str(const std::string& key) const {
    for (const auto& [k, v] : items_)
      if (k == key) return v;
    throw ConfigError("missing key '" + key + "'");
  }
  [[nodiscard]] std::string str(const std::string& key, const std::string& fallback) const {
    return has(key) ? str(key) : fallback;
  }

  [[nodiscard]] double num(const std::string& key) const { return parse_double(key, str(key)); }
  [[nodiscard]] double num(const std::string& key, double fallback) const {
    return has(key) ? num(key) : fallback;
  }

  [[nodiscard]] long long integer(const std::string& key) const {
    const std::string& v = str(key);
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
      throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
    return out;
  }
  [[nodiscard]] long long integer(const std::string& key, long long fallback) const {
    return has(key) ? integer(key) : fallback;
  }

  [[nodiscard]] bool flag(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
  }

  /// Comma-separated numbers; empty string gives an empty list.
  [[nodiscard]] std::vector<double> list(const std::string& key) const {
    std::vector<double> out;
    if (!has(key)) return out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(parse_double(key, item));
    }
    return out;
  }
  void set_list(const std::string& key, const std::vector<double>& values) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < values.size(); ++i) os << (i ? "," : "") << values[i];
    set(key, os.str());
  }

  /// Pairs whose key starts with `prefix`, with the prefix removed.
  [[nodiscard]] KeyValue section(const std::string& prefix) const {
    KeyValue out;
    for (const auto& [k, v] : items_)
      if (k.starts_with(prefix)) out.set(k.substr(prefix.size()), v);
    return out;
  }
  void merge(const KeyValue& other, const std::string& prefix = "") {
    for (const auto& [k, v] : other.items_) set(prefix + k, v);
  }

  [[nodiscard]] const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

  [[nodiscard]] std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : items_) out += k + " = " + v + "\n";
    return out;
  }

  static KeyValue parse(std::string_view text) {
    KeyValue kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      std::string line = trim(std::string(text.substr(pos, end - pos)));
      ++line_no;
      pos = end + 1;
      if (line.empty() || line.front() == '#') {
        if (end == text.size()) break;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
      kv.set(key, trim(line.substr(eq + 1)));
      if (end == text.size()) break;
    }
    return kv;
  }

  static KeyValue load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    return out;
  }

  std::vector<std::pair<std::string, std::string>> items_;
};

}  // namespace dubd
