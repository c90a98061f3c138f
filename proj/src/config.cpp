// SPDX-License-Identifier: Apache-2.0

#include "sotsep/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "sotsep/checkpoint.hpp"
#include "sotsep/error.hpp"

namespace sotsep {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::size_t parse_size_value(const std::string& text, const std::string& what) {
  return static_cast<std::size_t>(parse_u64_value(text, what));
}

std::uint64_t parse_u64_value(const std::string& text, const std::string& what) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    fail(ErrorCode::kFormat, what + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool parse_flag_value(const std::string& text, const std::string& what) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  fail(ErrorCode::kFormat, what + ": expected true or false, got '" + text + "'");
}

KeyValues KeyValues::parse(std::string_view text, std::string source) {
  KeyValues kv;
  kv.source_ = std::move(source);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      fail(ErrorCode::kFormat, kv.source_ + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) fail(ErrorCode::kFormat, kv.source_ + ":" + std::to_string(line_no) + ": empty key");
    if (!kv.entries_.emplace(key, Entry{value, line_no}).second) {
      fail(ErrorCode::kFormat, kv.source_ + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

std::string KeyValues::where(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end() || it->second.line == 0) return source_ + ": " + key;
  return source_ + ":" + std::to_string(it->second.line) + ": " + key;
}

std::optional<std::string> KeyValues::take(const std::string& key) {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  std::string v = it->second.value;
  taken_.insert(key);
  return v;
}

std::string KeyValues::take_required(const std::string& key) {
  auto v = take(key);
  if (!v) fail(ErrorCode::kFormat, source_ + ": missing required key '" + key + "'");
  return *v;
}

std::string KeyValues::take_string(const std::string& key, const std::string& fallback) {
  return take(key).value_or(fallback);
}

std::size_t KeyValues::take_size(const std::string& key, std::size_t fallback) {
  auto v = take(key);
  return v ? parse_size_value(*v, where(key)) : fallback;
}

std::uint64_t KeyValues::take_u64(const std::string& key, std::uint64_t fallback) {
  auto v = take(key);
  return v ? parse_u64_value(*v, where(key)) : fallback;
}

double KeyValues::take_double(const std::string& key, double fallback) {
  auto v = take(key);
  return v ? parse_double(*v, where(key)) : fallback;
}

bool KeyValues::take_flag(const std::string& key, bool fallback) {
  auto v = take(key);
  return v ? parse_flag_value(*v, where(key)) : fallback;
}

void KeyValues::finish() const {
  for (const auto& [key, entry] : entries_) {
    if (!taken_.count(key)) fail(ErrorCode::kFormat, where(key) + ": unknown key");
  }
}

std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& entries) {
  std::string out;
  for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
  return out;
}

}  // namespace sotsep
