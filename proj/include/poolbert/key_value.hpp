#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace poolbert {

// Flat `key=value` text used for model configs, training parameters and
// pipeline configs. Blank lines and lines starting with '#' are ignored;
// whitespace around keys and values is trimmed.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, std::string_view source = "<text>");
  static KeyValues load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws ParseError naming the first key not in `known`.
  void require_known(std::initializer_list<std::string_view> known) const;

  /// Lines in key order, each "key=value\n".
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
  std::string source_;
};

/// Shortest decimal form that parses back to the same double.
std::string format_double(double value);

}  // namespace poolbert
