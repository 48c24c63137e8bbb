// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace wisteria {

// Flat `key = value` configuration. Blank lines and lines starting with '#'
// are ignored; later assignments override earlier ones. Typed getters mark
// keys as consumed so callers can reject unknown keys by name.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<config>");
  static KeyValues load(const std::filesystem::path& path);

  // `key=value` override as given on a command line.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const noexcept { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Throws ConfigError naming the first key that no getter consumed.
  void reject_unknown() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

// Shortest text that parses back to the same double.
std::string format_double(double v);

// Canonical serialization: one `key = value` per line in the given order.
std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace wisteria
