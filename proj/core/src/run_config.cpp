#include "hmr/run_config.hpp"

#include <fstream>

namespace hmr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

ConfigMap ConfigMap::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  ConfigMap cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: malformed line " + std::to_string(lineno) +
                        " in " + path);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config: empty key at line " + std::to_string(lineno));
    cfg.values_[key] = value;
  }
  return cfg;
}

void ConfigMap::apply_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("config override must be key=value: " + kv);
  values_[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
}

std::string ConfigMap::get_string(const std::string& key,
                                  const std::string& dflt) const {
  auto it = values_.find(key);
  return it == values_.end() ? dflt : it->second;
}

int ConfigMap::get_int(const std::string& key, int dflt) const {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  try {
    return std::stoi(it->second);
  } catch (...) {
    throw ConfigError("config: '" + key + "' is not an integer");
  }
}

std::int64_t ConfigMap::get_i64(const std::string& key, std::int64_t dflt) const {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  try {
    return std::stoll(it->second);
  } catch (...) {
    throw ConfigError("config: '" + key + "' is not an integer");
  }
}

std::uint64_t ConfigMap::get_u64(const std::string& key,
                                 std::uint64_t dflt) const {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  try {
    return std::stoull(it->second);
  } catch (...) {
    throw ConfigError("config: '" + key + "' is not an unsigned integer");
  }
}

double ConfigMap::get_double(const std::string& key, double dflt) const {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  try {
    return std::stod(it->second);
  } catch (...) {
    throw ConfigError("config: '" + key + "' is not a number");
  }
}

bool ConfigMap::get_bool(const std::string& key, bool dflt) const {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: '" + key + "' is not a boolean");
}

std::uint64_t ConfigMap::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : values_) {
    h = fnv1a64(k.data(), k.size(), h);
    h = fnv1a64("=", 1, h);
    h = fnv1a64(v.data(), v.size(), h);
    h = fnv1a64("\n", 1, h);
  }
  return h;
}

nlohmann::json ConfigMap::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

void RunManifest::write(const std::string& path) const {
  nlohmann::json j;
  j["command"] = command;
  j["seed"] = seed;
  j["config"] = config;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["timing"] = timing;
  j["schema_version"] = schema_version;
  std::ofstream out(path);
  if (!out) throw InputError("run manifest: cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace hmr
