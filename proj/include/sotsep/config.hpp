// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` files. Blank lines and `#` comments are ignored,
// whitespace around keys and values is trimmed. Readers take the keys they
// know; finish() rejects whatever is left.

#ifndef SOTSEP_CONFIG_HPP
#define SOTSEP_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sotsep {

class KeyValues {
 public:
  static KeyValues parse(std::string_view text, std::string source = "<string>");
  static KeyValues load(const std::filesystem::path& path);

  const std::string& source() const { return source_; }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  void set(const std::string& key, std::string value) {
    entries_[key] = {std::move(value), 0};
    taken_.erase(key);
  }

  std::optional<std::string> take(const std::string& key);
  std::string take_required(const std::string& key);
  std::string take_string(const std::string& key, const std::string& fallback);
  std::size_t take_size(const std::string& key, std::size_t fallback);
  std::uint64_t take_u64(const std::string& key, std::uint64_t fallback);
  double take_double(const std::string& key, double fallback);
  bool take_flag(const std::string& key, bool fallback);

  // Throws kFormat naming the first key nobody took.
  void finish() const;

 private:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };
  std::string where(const std::string& key) const;

  std::string source_;
  std::map<std::string, Entry> entries_;
  std::set<std::string> taken_;
};

std::size_t parse_size_value(const std::string& text, const std::string& what);
std::uint64_t parse_u64_value(const std::string& text, const std::string& what);
bool parse_flag_value(const std::string& text, const std::string& what);

// Renders entries back as a config file body.
std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace sotsep

#endif  // SOTSEP_CONFIG_HPP
