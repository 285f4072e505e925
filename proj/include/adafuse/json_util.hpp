// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>
#include <string>
#include <utility>

#include <json.hpp>

#include "adafuse/error.hpp"

namespace adafuse {

using Json = nlohmann::json;

// Strict reader for config objects: every key must be consumed, and type
// errors report the full field path (e.g. "$.train.adapter.base_lr").
class JsonReader {
 public:
  JsonReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  const std::string& path() const { return path_; }
  std::string field(const std::string& key) const { return path_ + "." + key; }
  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!obj_.contains(key)) return fallback;
    return require<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!obj_.contains(key)) throw ConfigError(field(key) + ": missing required field");
    try {
      return obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(field(key) + ": wrong type");
    }
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    if (!obj_.contains(key)) throw ConfigError(field(key) + ": missing required field");
    return obj_.at(key);
  }

  /// Throws ConfigError naming the first key that was never read.
  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.contains(key)) throw ConfigError(field(key) + ": unknown field");
    }
  }

 private:
  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace adafuse
