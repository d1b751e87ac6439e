#pragma once

// Flat "key = value" configuration text. '#' starts a comment; blank lines
// are ignored. Values are kept as strings and converted on lookup.

#include <charconv>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "omnifield/core.hpp"

namespace omnifield {

/// Shortest text that reads back as the same double.
inline std::string format_number(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& origin = "config") {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto end = std::min(text.find('\n', pos), text.size());
      std::string line(text.substr(pos, end - pos));
      pos = end + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail(ErrorKind::bad_config, origin + ":" + std::to_string(line_no) + ": expected key = value");
      const auto key = trim(std::string_view(line).substr(0, eq));
      const auto value = trim(std::string_view(line).substr(eq + 1));
      if (key.empty()) fail(ErrorKind::bad_config, origin + ":" + std::to_string(line_no) + ": empty key");
      if (kv.values_.count(key)) fail(ErrorKind::bad_config, origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) { return parse(read_file(path), path.string()); }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  /// Rejects keys outside `known` so typos surface as configuration errors.
  void check_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k)) fail(ErrorKind::bad_config, "unknown configuration key '" + k + "'");
  }

  template <class T>
  void read(const std::string& key, T& out) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return;
    out = convert<T>(key, it->second);
  }

  template <class T>
  static T convert(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1" || text == "yes") return true;
      if (text == "false" || text == "0" || text == "no") return false;
      fail(ErrorKind::bad_config, "key '" + key + "': expected a boolean, got '" + text + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
      try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing");
        return static_cast<T>(v);
      } catch (const std::logic_error&) {
        fail(ErrorKind::bad_config, "key '" + key + "': expected a number, got '" + text + "'");
      }
    } else {
      T v{};
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc{} || ptr != text.data() + text.size())
        fail(ErrorKind::bad_config, "key '" + key + "': expected an integer, got '" + text + "'");
      return v;
    }
  }

  /// Whitespace-separated list of numbers.
  static std::vector<double> number_list(const std::string& key, const std::string& text) {
    std::vector<double> out;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) out.push_back(convert<double>(key, tok));
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace omnifield
