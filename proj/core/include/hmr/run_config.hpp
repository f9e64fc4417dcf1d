#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hmr/common.hpp"

namespace hmr {

/// Flat key=value configuration with dotted keys. Files use one `key = value`
/// per line; `#` starts a comment. CLI overrides arrive as "key=value".
class ConfigMap {
 public:
  ConfigMap() = default;

  static ConfigMap from_file(const std::string& path);
  void apply_override(const std::string& kv);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) {
    values_[key] = value;
  }

  std::string get_string(const std::string& key, const std::string& dflt) const;
  int get_int(const std::string& key, int dflt) const;
  std::int64_t get_i64(const std::string& key, std::int64_t dflt) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) const;
  double get_double(const std::string& key, double dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;

  /// Deterministic hash over sorted key=value pairs.
  std::uint64_t hash() const;
  nlohmann::json to_json() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Per-run provenance record written next to every command's outputs.
struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::object();   // name -> content hash
  nlohmann::json outputs = nlohmann::json::object();  // name -> content hash
  nlohmann::json timing = nlohmann::json::object();   // volatile; excluded
                                                      // from reproducibility
  int schema_version = 1;

  void write(const std::string& path) const;
};

}  // namespace hmr
