// Copyright 2026 The lowres-speech Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Flat "key = value" configuration with dotted keys (e.g. "pretrain.steps"),
// plus derivation of per-module seeds from one global seed.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lowres {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Config {
 public:
  /// Blank lines and lines starting with '#' are ignored.
  static Config parse(const std::string& text, const std::string& origin = "<config>");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  /// "key=value"; later overrides replace earlier values and file values.
  void apply_override(const std::string& assignment);
  /// Copies every entry of `other` over this one.
  void merge(const Config& other);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string require_string(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  /// Keys that were set but never read through a getter.
  std::set<std::string> unused_keys() const;

  /// Sorted "key = value" lines.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> read_;
};

/// Counter-based seed derivation: a pure function of the global seed, a
/// stream name and a counter, so module seeds can be logged and recomputed.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream, std::uint64_t counter = 0);

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

}  // namespace lowres
